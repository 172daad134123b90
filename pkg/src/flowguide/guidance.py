"""Motion guidance on clean-latent predictions.

The source video is forward-noised (no inversion) and passed through the
field with the empty condition to obtain a motion representation.  The target
latent ``z_t`` is then nudged by Adam so that its own representation and its
frame differences match the source's.

Gradients never traverse the field: the velocity is a constant from a plain
forward evaluation, so ``d z0_hat / d z_t`` is the identity.  Only the
velocity representation mode needs a vector-Jacobian product from the field.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, replace
from enum import Enum

import numpy as np

from .core import DomainError, SeededRng, ShapeError, check_same_shape, lerp_path, norm
from .fields import CapabilityError, VelocityField
from .optim import AdamState, adam_step
from .regularization import RegularizerConfig, regulated_velocity
from .sampler import target_velocity


class SourceRep(str, Enum):
    LATENT_PREDICTION = "latent-prediction"
    CLEAN_LATENT = "clean-latent"
    VELOCITY = "velocity"
    DENOISED_LATENT = "denoised-latent"


class DiffMode(str, Enum):
    ALL_PAIRS = "all-pairs"
    ADJACENT = "adjacent"


@dataclass(frozen=True)
class GuidanceConfig:
    """Guidance hyperparameters.

    Losses are sums of squares (not means), so ``alpha:beta`` keeps its
    meaning at any tensor size but interacts with ``lr`` only through Adam's
    scale invariance.  ``detach_avg=False`` also differentiates the average
    velocity, which depends on ``z_t``; ``source_cfg`` applies guidance scale
    to the empty-condition source pass as well.
    """

    alpha: float = 4.0
    beta: float = 1.0
    lr: float = 0.003
    k_opt: int = 3
    t_opt: int = 10
    source_rep: SourceRep = SourceRep.LATENT_PREDICTION
    diff_mode: DiffMode = DiffMode.ALL_PAIRS
    gamma: float = 0.1
    detach_avg: bool = True
    source_cfg: bool = False
    per_frame_projection: bool = False

    def __post_init__(self):
        object.__setattr__(self, "source_rep", SourceRep(self.source_rep))
        object.__setattr__(self, "diff_mode", DiffMode(self.diff_mode))
        if self.alpha < 0 or self.beta < 0 or (self.alpha == 0 and self.beta == 0):
            raise DomainError("alpha and beta must be non-negative and not both zero")
        if self.k_opt < 0 or self.t_opt < 0:
            raise DomainError("k_opt and t_opt must be non-negative")
        if self.lr < 0:
            raise DomainError("lr must be non-negative")
        RegularizerConfig(self.gamma)

    @property
    def regularizer(self) -> RegularizerConfig:
        return RegularizerConfig(self.gamma, per_frame=self.per_frame_projection)

    def replace(self, **changes) -> "GuidanceConfig":
        return replace(self, **changes)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["source_rep"] = self.source_rep.value
        d["diff_mode"] = self.diff_mode.value
        return d


@dataclass
class SourceMotionRep:
    mode: SourceRep
    payload: np.ndarray
    diff: np.ndarray | None
    t: float
    dt: float
    evals: int = 0
    z_src_t: np.ndarray | None = None


def forward_noise(z_src0, t, rng: SeededRng) -> np.ndarray:
    """``(1 - t) z_src0 + t eps`` with fresh standard-normal ``eps``."""
    z_src0 = np.asarray(z_src0)
    eps = rng.normal(z_src0.shape, z_src0.dtype)
    return lerp_path(z_src0, eps, t)


def frame_diff(z, mode=DiffMode.ALL_PAIRS) -> np.ndarray:
    """Frame differences of an ``(F, ...)`` tensor.

    all-pairs: shape ``(F, F-1, ...)`` with slab ``[i, slot]`` = ``z[i] - z[j]``
    for the ``j != i`` in increasing order.  adjacent: ``z[i+1] - z[i]``.
    """
    z = np.asarray(z)
    f = z.shape[0]
    if f < 2:
        raise ShapeError("frame differences need at least 2 frames")
    if DiffMode(mode) is DiffMode.ADJACENT:
        return z[1:] - z[:-1]
    pairs = z[:, None] - z[None, :]
    return pairs[~np.eye(f, dtype=bool)].reshape((f, f - 1) + z.shape[1:])


def source_representation(field: VelocityField, z_src0, t, dt, mode=SourceRep.LATENT_PREDICTION,
                          rng: SeededRng | None = None, diff_mode=DiffMode.ALL_PAIRS,
                          with_diff: bool = True, cfg_scale=None) -> SourceMotionRep:
    """Motion representation of the source at noise level ``t``.

    One empty-condition field eval for every mode except clean-latent (none).
    ``cfg_scale`` is accepted for the source pass only when explicitly set.
    """
    mode = SourceRep(mode)
    if not 0.0 < t <= 1.0:
        raise DomainError(f"t must lie in (0, 1], got {t}")
    z_src0 = np.asarray(z_src0)
    z_src_t = None
    evals = 0
    if mode is SourceRep.CLEAN_LATENT:
        payload = z_src0.copy()
    else:
        if rng is None:
            raise ValueError("forward noising needs an rng")
        z_src_t = forward_noise(z_src0, t, rng)
        v_src = target_velocity(field, z_src_t, t, None, cfg_scale)
        evals = 1 if cfg_scale is None else 2
        if mode is SourceRep.LATENT_PREDICTION:
            payload = z_src_t - t * v_src
        elif mode is SourceRep.DENOISED_LATENT:
            payload = z_src_t - v_src * dt
        else:
            payload = v_src
    diff = frame_diff(payload, diff_mode) if with_diff else None
    return SourceMotionRep(mode, payload.astype(z_src0.dtype, copy=False), diff, t, dt, evals, z_src_t)


def _payload(rep):
    return rep.payload if isinstance(rep, SourceMotionRep) else np.asarray(rep)


def guidance_loss(rep_src, rep_tgt, alpha, beta, mode=DiffMode.ALL_PAIRS):
    """Return ``(L, L_LA, L_DA)``; components carry their weights so ``L = L_LA + L_DA``."""
    src = _payload(rep_src)
    check_same_shape(src, rep_tgt)
    d = np.asarray(rep_tgt, dtype=np.float64) - np.asarray(src, dtype=np.float64)
    la = alpha * float(np.sum(d * d))
    if beta:
        dd = frame_diff(d, mode)
        da = beta * float(np.sum(dd * dd))
    else:
        da = 0.0
    return la + da, la, da


def loss_gradient_wrt_target(d, alpha, beta, mode=DiffMode.ALL_PAIRS) -> np.ndarray:
    """Gradient of the guidance loss w.r.t. the target representation, given ``d = tgt - src``."""
    d = np.asarray(d, dtype=np.float64)
    g = 2.0 * alpha * d
    if beta:
        f = d.shape[0]
        if DiffMode(mode) is DiffMode.ALL_PAIRS:
            g = g + 4.0 * beta * (f * d - d.sum(axis=0, keepdims=True))
        else:
            step = d[1:] - d[:-1]
            g[1:] += 2.0 * beta * step
            g[:-1] -= 2.0 * beta * step
    return g


def target_representation(z_t, t, v_reg, rep_src: SourceMotionRep) -> np.ndarray:
    """Target-side counterpart of the source representation for a frozen velocity."""
    scale = rep_src.dt if rep_src.mode is SourceRep.DENOISED_LATENT else t
    z_t = np.asarray(z_t)
    return (z_t - scale * np.asarray(v_reg)).astype(z_t.dtype, copy=False)


def _avg_through(g, z_t, z1, v_t, t, scale, config: RegularizerConfig):
    """Add the dependence of ``z_t - scale * v_reg`` on ``z_t`` through the average velocity."""
    if t >= 1.0:
        return g
    a = (np.asarray(z_t, np.float64) - np.asarray(z1, np.float64)) / (t - 1.0)
    v = np.asarray(v_t, np.float64)
    axes = tuple(range(1, a.ndim)) if config.per_frame else None
    keep = config.per_frame
    aa = np.sum(a * a, axis=axes, keepdims=keep)
    limit = config.epsilon_norm * (a[0].size if config.per_frame else a.size)
    if np.any(aa < limit):
        return g
    av = np.sum(a * v, axis=axes, keepdims=keep)
    ag = np.sum(a * g, axis=axes, keepdims=keep)
    # transpose Jacobian of the projection (a.v / a.a) a with respect to a, applied to g
    jt_g = (v * ag + av * g) / aa - 2.0 * av * ag * a / (aa * aa)
    return g - scale * (1.0 - config.gamma) / (t - 1.0) * jt_g


def guidance_gradient(z_t, t, v_reg, rep_src: SourceMotionRep, alpha, beta, mode=DiffMode.ALL_PAIRS,
                      *, z1=None, v_t=None, regularizer: RegularizerConfig | None = None) -> np.ndarray:
    """Exact gradient of the guidance loss w.r.t. ``z_t`` with the velocity held fixed.

    With ``v_reg`` frozen the prediction is an affine shift of ``z_t``, so the
    gradient equals the loss gradient w.r.t. the prediction.  Passing ``z1``,
    ``v_t`` and ``regularizer`` additionally differentiates the average
    velocity (``v_t`` itself stays constant).
    """
    if rep_src.mode is SourceRep.VELOCITY:
        raise CapabilityError("velocity representations need guidance_gradient_velocity_mode")
    tgt = target_representation(z_t, t, v_reg, rep_src)
    d = tgt.astype(np.float64) - np.asarray(rep_src.payload, np.float64)
    g = loss_gradient_wrt_target(d, alpha, beta, mode)
    if z1 is not None and regularizer is not None and v_t is not None:
        scale = rep_src.dt if rep_src.mode is SourceRep.DENOISED_LATENT else t
        g = _avg_through(g, z_t, z1, v_t, t, scale, regularizer)
    return g.astype(np.asarray(z_t).dtype, copy=False)


def guidance_gradient_velocity_mode(field: VelocityField, z_t, t, v_src, alpha, beta=0.0,
                                    mode=DiffMode.ALL_PAIRS, condition=None, cfg_scale=None):
    """Gradient of ``alpha |v_src - v(z_t)|^2 (+ beta diff term)`` through the field.

    Returns ``(gradient, v)`` where ``v`` is the target velocity used.
    """
    if not field.supports_vjp:
        raise CapabilityError(f"{type(field).__name__} cannot differentiate its velocity")
    v = target_velocity(field, z_t, t, condition, cfg_scale)
    g_v = loss_gradient_wrt_target(np.asarray(v, np.float64) - np.asarray(v_src, np.float64),
                                   alpha, beta, mode)
    if cfg_scale is None:
        grad = field.vjp(z_t, t, condition, g_v)
    else:
        j_cond = field.vjp(z_t, t, condition, g_v)
        j_empty = field.vjp(z_t, t, None, g_v)
        grad = j_empty + cfg_scale * (j_cond - j_empty)
    return np.asarray(grad).astype(np.asarray(z_t).dtype, copy=False), v


def optimize_latent(z_t, t, z1, field: VelocityField, rep_src: SourceMotionRep,
                    config: GuidanceConfig, condition=None, cfg_scale=None):
    """Run ``k_opt`` Adam steps on ``z_t`` against the source representation.

    Each inner step makes one target-branch velocity evaluation (two with
    guidance scale), regulates it, forms the prediction and its loss, and takes
    one Adam step with a fresh optimizer state per call.  Returns the updated
    latent and one record per inner step.
    """
    z = np.array(z_t, copy=True)
    state = AdamState()
    records = []
    per_eval = 1 if cfg_scale is None else 2
    reg = config.regularizer
    for k in range(config.k_opt):
        if rep_src.mode is SourceRep.VELOCITY:
            grad, v = guidance_gradient_velocity_mode(field, z, t, rep_src.payload, config.alpha,
                                                      config.beta, config.diff_mode, condition, cfg_scale)
            loss = guidance_loss(rep_src, v, config.alpha, config.beta, config.diff_mode)
        else:
            v = target_velocity(field, z, t, condition, cfg_scale)
            v_reg, _ = regulated_velocity(z, z1, v, t, reg)
            tgt = target_representation(z, t, v_reg, rep_src)
            loss = guidance_loss(rep_src, tgt, config.alpha, config.beta, config.diff_mode)
            extra = {} if config.detach_avg else {"z1": z1, "v_t": v, "regularizer": reg}
            grad = guidance_gradient(z, t, v_reg, rep_src, config.alpha, config.beta,
                                     config.diff_mode, **extra)
        records.append({"inner_step": k, "L": loss[0], "L_LA": loss[1], "L_DA": loss[2],
                        "grad_norm": norm(grad), "evals": per_eval})
        z = adam_step(z, grad, state, config.lr)
    return z, records


def step_loss(z_t, t, z1, v, rep_src: SourceMotionRep, config: GuidanceConfig):
    """Guidance loss at ``z_t`` for an already computed target velocity (no field calls)."""
    if rep_src.mode is SourceRep.VELOCITY:
        return guidance_loss(rep_src, v, config.alpha, config.beta, config.diff_mode)
    v_reg, _ = regulated_velocity(z_t, z1, v, t, config.regularizer)
    tgt = target_representation(z_t, t, v_reg, rep_src)
    return guidance_loss(rep_src, tgt, config.alpha, config.beta, config.diff_mode)
