"""Velocity regularization along the accumulated flow direction.

The current velocity is split into a component parallel to the average
velocity since ``t = 1`` and an orthogonal remainder; the remainder is scaled
by ``gamma`` before the clean latent is predicted.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import DomainError, check_same_shape
from .sampler import latent_prediction


class DegenerateDirection(ArithmeticError):
    """No usable average-velocity direction exists (t = 1 or a near-zero norm)."""


@dataclass(frozen=True)
class RegularizerConfig:
    gamma: float = 0.1
    epsilon_norm: float = 1e-8
    per_frame: bool = False

    def __post_init__(self):
        if not 0.0 <= self.gamma <= 1.0:
            raise DomainError(f"gamma must lie in [0, 1], got {self.gamma}")
        if self.epsilon_norm <= 0:
            raise DomainError("epsilon_norm must be positive")


def average_velocity(z_t, z1, t) -> np.ndarray:
    """``(z_t - z1) / (t - 1)``; raises :class:`DegenerateDirection` at ``t = 1``."""
    check_same_shape(z_t, z1)
    if t >= 1.0:
        raise DegenerateDirection("average velocity is undefined at t = 1")
    z_t = np.asarray(z_t)
    return ((z_t.astype(np.float64) - np.asarray(z1, dtype=np.float64)) / (t - 1.0)).astype(z_t.dtype)


def decompose(v_t, v_avg, epsilon_norm: float = 1e-8, per_frame: bool = False):
    """Split ``v_t`` into ``(v_proj, v_orth)`` relative to ``v_avg``.

    The projection coefficient uses one inner product over the whole tensor;
    ``per_frame=True`` computes one coefficient per frame instead.
    """
    check_same_shape(v_t, v_avg)
    v = np.asarray(v_t, dtype=np.float64)
    a = np.asarray(v_avg, dtype=np.float64)
    if per_frame:
        axes = tuple(range(1, v.ndim))
        den = np.sum(a * a, axis=axes, keepdims=True)
        if np.any(den < epsilon_norm * (a[0].size)):
            raise DegenerateDirection("average velocity has a near-zero frame")
        coef = np.sum(v * a, axis=axes, keepdims=True) / den
    else:
        den = float(np.dot(a.ravel(), a.ravel()))
        if den < epsilon_norm * a.size:
            raise DegenerateDirection("average velocity has near-zero norm")
        coef = float(np.dot(v.ravel(), a.ravel())) / den
    proj = coef * a
    dtype = np.asarray(v_t).dtype
    return proj.astype(dtype), (v - proj).astype(dtype)


def regulate(v_proj, v_orth, gamma: float) -> np.ndarray:
    if not 0.0 <= gamma <= 1.0:
        raise DomainError(f"gamma must lie in [0, 1], got {gamma}")
    check_same_shape(v_proj, v_orth)
    v_proj = np.asarray(v_proj)
    return (v_proj + gamma * np.asarray(v_orth)).astype(v_proj.dtype, copy=False)


def regulated_velocity(z_t, z1, v_t, t, config: RegularizerConfig = RegularizerConfig()):
    """Regulated velocity, or ``v_t`` itself when no direction is available.

    Returns ``(v_reg, v_avg)``; ``v_avg`` is None when the fallback was used.
    """
    try:
        v_avg = average_velocity(z_t, z1, t)
        v_proj, v_orth = decompose(v_t, v_avg, config.epsilon_norm, config.per_frame)
    except DegenerateDirection:
        return np.array(v_t, copy=True), None
    if config.gamma == 1.0:
        # nothing is decayed; skip the split so the result is bit-identical to v_t
        return np.array(v_t, copy=True), v_avg
    return regulate(v_proj, v_orth, config.gamma), v_avg


def regulated_prediction(z_t, z1, v_t, t, config: RegularizerConfig = RegularizerConfig()):
    """Return ``(z0_hat, v_reg)`` with ``z0_hat = z_t - t v_reg``."""
    if not 0.0 < t <= 1.0:
        raise DomainError(f"t must lie in (0, 1], got {t}")
    v_reg, _ = regulated_velocity(z_t, z1, v_t, t, config)
    return latent_prediction(z_t, v_reg, t), v_reg
