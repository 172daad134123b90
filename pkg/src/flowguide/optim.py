"""Bias-corrected Adam on numpy arrays."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import check_same_shape

BETA1 = 0.9
BETA2 = 0.999
EPS = 1e-8


@dataclass
class AdamState:
    """First and second moment estimates plus the step counter.

    Moments are created lazily as zeros matching the first gradient seen.
    """

    m: np.ndarray | None = None
    v: np.ndarray | None = None
    step: int = 0
    beta1: float = BETA1
    beta2: float = BETA2
    eps: float = EPS

    @classmethod
    def fresh(cls, like: np.ndarray) -> "AdamState":
        return cls(np.zeros_like(like, dtype=np.float64), np.zeros_like(like, dtype=np.float64))


def adam_step(z: np.ndarray, grad: np.ndarray, state: AdamState, lr: float) -> np.ndarray:
    """Return ``z - lr * m_hat / (sqrt(v_hat) + eps)`` and advance ``state``.

    The returned array keeps ``z``'s dtype; moments are kept in float64.
    """
    check_same_shape(z, grad)
    if state.m is None:
        state.m = np.zeros(np.shape(z), dtype=np.float64)
        state.v = np.zeros(np.shape(z), dtype=np.float64)
    g = np.asarray(grad, dtype=np.float64)
    state.step += 1
    state.m = state.beta1 * state.m + (1.0 - state.beta1) * g
    state.v = state.beta2 * state.v + (1.0 - state.beta2) * (g * g)
    m_hat = state.m / (1.0 - state.beta1 ** state.step)
    v_hat = state.v / (1.0 - state.beta2 ** state.step)
    update = lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return (np.asarray(z, dtype=np.float64) - update).astype(np.asarray(z).dtype, copy=False)
