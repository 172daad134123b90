"""Forward-Euler integration of a velocity field from noise (t=1) to data (t=0)."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import formats
from .core import DomainError, TimeGrid, check_same_shape
from .fields import VelocityField, cfg_velocity


def latent_prediction(z_t, v, t) -> np.ndarray:
    """One-step estimate of the clean latent, ``z_t - t v``."""
    check_same_shape(z_t, v)
    if not 0.0 <= t <= 1.0:
        raise DomainError(f"t must lie in [0, 1], got {t}")
    z_t = np.asarray(z_t)
    return (z_t - t * np.asarray(v)).astype(z_t.dtype, copy=False)


def euler_step(z_t, v, dt) -> np.ndarray:
    if dt <= 0:
        raise DomainError("dt must be positive")
    check_same_shape(z_t, v)
    z_t = np.asarray(z_t)
    return (z_t - np.asarray(v) * dt).astype(z_t.dtype, copy=False)


def target_velocity(field: VelocityField, z_t, t, condition, cfg_scale) -> np.ndarray:
    """Target-branch velocity: plain eval, or two-branch guided eval when ``cfg_scale`` is set."""
    if cfg_scale is None:
        return field.eval(z_t, t, condition)
    return cfg_velocity(field, z_t, t, condition, cfg_scale)


@dataclass
class StepRecord:
    step: int
    t: float
    z: np.ndarray
    v: Optional[np.ndarray]
    z0_hat: np.ndarray
    v_reg: Optional[np.ndarray] = None
    losses: dict = field(default_factory=dict)
    evals: int = 0


@dataclass
class DenoiseTrace:
    """Append-only per-step record of a denoising run.

    There is one record per field-evaluating step plus a closing record at
    ``t = 0`` holding the final latent (its prediction is the latent itself).
    """

    records: list[StepRecord] = field(default_factory=list)

    def append(self, record: StepRecord) -> None:
        self.records.append(record)

    def __len__(self) -> int:
        return len(self.records)

    def __getitem__(self, i) -> StepRecord:
        return self.records[i]

    @property
    def eval_counts(self) -> list[int]:
        return [r.evals for r in self.records]


def sample(field: VelocityField, z1, grid: TimeGrid, cfg_scale=None, condition=None,
           trace: bool = True):
    """Integrate ``dz = -v dt`` over ``grid``; returns ``(z0, DenoiseTrace)``.

    The field is evaluated at ``t = 1, 1 - dt, ..., dt`` and never at 0.
    """
    z = np.array(z1, copy=True)
    dt = grid.dt
    rec = DenoiseTrace()
    evals = 0
    for k, t in grid:
        v = target_velocity(field, z, t, condition, cfg_scale)
        evals += 1 if cfg_scale is None else 2
        if trace:
            rec.append(StepRecord(k, t, z, v, latent_prediction(z, v, t), evals=evals))
        z = euler_step(z, v, dt)
    if trace:
        rec.append(StepRecord(grid.steps, 0.0, z, None, z.copy(), evals=evals))
    return z, rec


def montage(frames, separator: float = 1.0) -> np.ndarray:
    """Lay ``(F, H, W)`` frames side by side with 1-px separators."""
    frames = np.asarray(frames)
    f, h, w = frames.shape
    out = np.full((h, f * w + (f - 1)), separator, dtype=np.float64)
    for k in range(f):
        out[:, k * (w + 1):k * (w + 1) + w] = frames[k]
    return out


def visualize_trace(trace: DenoiseTrace, decoder) -> list[np.ndarray]:
    """Decode each step's clean-latent prediction into a one-row frame strip."""
    if len(trace) == 0:
        raise ValueError("empty trace")
    return [montage(decoder(r.z0_hat)) for r in trace.records]


def trace_montage(trace: DenoiseTrace, decoder, separator: float = 1.0) -> np.ndarray:
    """Steps x frames grid: ``len(trace)*H + len(trace)-1`` rows, ``F*W + F-1`` columns."""
    strips = visualize_trace(trace, decoder)
    h, w = strips[0].shape
    out = np.full((len(strips) * (h + 1) - 1, w), separator, dtype=np.float64)
    for i, s in enumerate(strips):
        out[i * (h + 1):i * (h + 1) + h] = s
    return out


def save_trace(directory, trace: DenoiseTrace) -> Path:
    """Write z, v, v_reg and prediction tensors per step plus ``trace.json``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    index = []
    for r in trace.records:
        entry = {"step": r.step, "t": r.t, "evals": r.evals, "losses": r.losses}
        for name in ("z", "v", "v_reg", "z0_hat"):
            value = getattr(r, name)
            if value is not None:
                fname = f"step_{r.step:04d}_{name}.fmlt"
                formats.save_fmlt(directory / fname, value)
                entry[name] = fname
        index.append(entry)
    path = directory / "trace.json"
    formats.write_json(path, {"records": index, "format_versions": formats.FORMAT_VERSIONS})
    return path


def load_trace(directory) -> DenoiseTrace:
    directory = Path(directory)
    idx = formats.read_json(directory / "trace.json")
    trace = DenoiseTrace()
    for e in idx["records"]:
        get = lambda name: formats.load_fmlt(directory / e[name]) if name in e else None  # noqa: E731
        trace.append(StepRecord(e["step"], e["t"], get("z"), get("v"), get("z0_hat"), get("v_reg"),
                                e.get("losses", {}), e.get("evals", 0)))
    return trace
