"""Guided motion transfer end to end, the unguided control and ablation sweeps."""

from __future__ import annotations

import itertools
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .core import DomainError, NumericError, SeededRng, TimeGrid, sample_gaussian
from .fields import OracleField, VelocityField
from .guidance import (GuidanceConfig, SourceRep, optimize_latent, source_representation,
                       step_loss)
from .metrics import all_metrics
from .regularization import regulated_velocity
from .sampler import DenoiseTrace, StepRecord, euler_step, latent_prediction, target_velocity
from .toy_world import AppearanceClass, Trajectory, build_dataset, get_codec, render_video

Z1_STREAM = 0
NOISE_STREAM = 1

LOSS_COLUMNS = ["denoise_step", "t", "inner_step", "L", "L_LA", "L_DA", "grad_norm", "evals"]
METRIC_COLUMNS = ["trajectory_rmse", "motion_fidelity", "diff_similarity", "appearance_score",
                  "temporal_consistency"]


class NumericFailure(NumericError):
    def __init__(self, step, message="non-finite latent"):
        super().__init__(f"{message} at denoising step {step}")
        self.step = step


@dataclass(frozen=True)
class SamplerConfig:
    steps: int = 50
    cfg_scale: Optional[float] = 6.0

    @property
    def grid(self) -> TimeGrid:
        return TimeGrid(self.steps)

    @property
    def evals_per_call(self) -> int:
        return 1 if self.cfg_scale is None else 2

    def to_dict(self) -> dict:
        return {"steps": self.steps, "cfg_scale": self.cfg_scale}


@dataclass
class TransferJob:
    """One source video to re-render with the motion kept and a new class."""

    source_video: np.ndarray
    target_class: int
    trajectory: object = None
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    guidance: GuidanceConfig = field(default_factory=GuidanceConfig)
    seed: int = 0
    name: str = "job"
    difficulty: str = "easy"

    def validate(self, latent_shape=None):
        if self.guidance.t_opt > self.sampler.steps:
            raise DomainError("t_opt cannot exceed the number of denoising steps")
        if np.asarray(self.source_video).shape[0] < 2:
            raise DomainError("source video needs at least 2 frames")

    def with_(self, **changes) -> "TransferJob":
        d = dict(self.__dict__)
        d.update(changes)
        return TransferJob(**d)


@dataclass
class RunReport:
    video: np.ndarray
    latent: np.ndarray
    trace: DenoiseTrace
    metrics: dict
    evals: dict
    loss_rows: list
    step_losses: list
    wall_time: float
    config: dict = field(default_factory=dict)


def expected_evals(sampler: SamplerConfig, guidance: GuidanceConfig) -> dict:
    """Field-eval counts implied by a configuration."""
    c = sampler.evals_per_call
    t_opt = min(guidance.t_opt, sampler.steps)
    src = 0 if guidance.source_rep is SourceRep.CLEAN_LATENT else (c if guidance.source_cfg else 1)
    vjp = 0
    if guidance.source_rep is SourceRep.VELOCITY:
        vjp = t_opt * guidance.k_opt * c
    return {"target": sampler.steps * c + t_opt * guidance.k_opt * c, "source": t_opt * src, "vjp": vjp}


def transfer(job: TransferJob, field: VelocityField, codec="identity",
             appearance: AppearanceClass | None = None, trace: bool = True) -> RunReport:
    """Guided generation: optimize the latent during the first ``t_opt`` steps, then plain Euler.

    Every step ends with a fresh target-branch evaluation at the (possibly
    optimized) latent, and the unregularized velocity drives the Euler update.
    Raises :class:`NumericFailure` naming the step if the latent turns
    non-finite.
    """
    job.validate()
    codec = get_codec(codec)
    g, s = job.guidance, job.sampler
    grid = s.grid
    cond = int(job.target_class)
    c = s.cfg_scale
    src0 = codec.encode(job.source_video) if job.guidance.t_opt > 0 else None
    shape = src0.shape if src0 is not None else _field_shape(field, codec, job.source_video)
    start = time.perf_counter()
    base_vjp = getattr(field, "vjp_count", 0)
    target_evals = source_evals = 0

    z1 = sample_gaussian(shape, SeededRng(job.seed, Z1_STREAM))
    noise_rng = SeededRng(job.seed, NOISE_STREAM)
    z = z1.copy()
    rec = DenoiseTrace()
    loss_rows, step_losses = [], []
    for k, t in grid:
        losses = {}
        v_reg = None
        rep = None
        if k < g.t_opt:
            before = field.eval_count
            rep = source_representation(field, src0, t, grid.dt, g.source_rep, noise_rng, g.diff_mode,
                                        cfg_scale=c if g.source_cfg else None)
            source_evals += field.eval_count - before
            z, rows = optimize_latent(z, t, z1, field, rep, g, cond, c)
            for row in rows:
                target_evals += row["evals"]
                loss_rows.append({"denoise_step": k, "t": t, **row, "evals": target_evals})
            if not np.all(np.isfinite(z)):
                raise NumericFailure(k)
        before = field.eval_count
        v = target_velocity(field, z, t, cond, c)
        target_evals += field.eval_count - before
        if not np.all(np.isfinite(v)):
            raise NumericFailure(k, "non-finite velocity")
        if rep is not None:
            after = step_loss(z, t, z1, v, rep, g)
            v_reg, _ = regulated_velocity(z, z1, v, t, g.regularizer)
            first = loss_rows[-len(rows)]["L"] if rows else after[0]
            losses = {"L_before": first, "L_after": after[0], "L_LA": after[1], "L_DA": after[2]}
            step_losses.append({"denoise_step": k, "t": t, **losses})
        if trace:
            rec.append(StepRecord(k, t, z, v, latent_prediction(z, v, t), v_reg, losses,
                                  target_evals + source_evals))
        z = euler_step(z, v, grid.dt)
        if not np.all(np.isfinite(z)):
            raise NumericFailure(k)
    if trace:
        rec.append(StepRecord(grid.steps, 0.0, z, None, z.copy(), None, {}, target_evals + source_evals))

    evals = {"target": target_evals, "source": source_evals,
             "vjp": getattr(field, "vjp_count", 0) - base_vjp}
    expected = expected_evals(s, g)
    if evals != expected:
        raise AssertionError(f"eval accounting mismatch: {evals} != {expected}")
    video = codec.decode(z)
    if appearance is None and isinstance(field, OracleField):
        appearance = field.dataset.classes.get(cond)
    metrics = all_metrics(job.source_video, video, appearance) if appearance is not None else {}
    config = {"sampler": s.to_dict(), "guidance": g.to_dict(), "seed": job.seed,
              "target_class": cond, "job": job.name, "codec": codec.name}
    return RunReport(video, z, rec, metrics, evals, loss_rows, step_losses,
                     time.perf_counter() - start, config)


def _field_shape(field, codec, source_video):
    if isinstance(field, OracleField):
        return field.dataset.latent_shape
    f, h, w = np.asarray(source_video).shape[:3]
    return codec.latent_shape(f, h, w)


def generate_baseline(field: VelocityField, condition: int, sampler: SamplerConfig = SamplerConfig(),
                      seed: int = 0, source_video=None, codec="identity", trace: bool = True) -> RunReport:
    """Unguided generation; identical to :func:`transfer` with ``t_opt = 0``."""
    if source_video is None:
        f, h, w, _ = field.dataset.latent_shape
        source_video = get_codec(codec).decode(np.zeros(field.dataset.latent_shape, np.float32))
    job = TransferJob(source_video, condition, sampler=sampler, guidance=GuidanceConfig(t_opt=0),
                      seed=seed, name="baseline")
    return transfer(job, field, codec, trace=trace)


# ---------------------------------------------------------------------------
# standard toy benchmark

DISK = AppearanceClass(0, "disk", 4.0, 1.0)
SQUARE = AppearanceClass(1, "square", 4.0, 1.0)
RING = AppearanceClass(2, "ring", 4.0, 1.0)
BENCHMARK_CLASSES = (DISK, SQUARE, RING)


# Latent entries of a 49-frame 480x720 clip under a 4x temporal, 8x spatial, 16-channel video VAE.
REFERENCE_LATENT_SIZE = 13 * 60 * 90 * 16


def desk_scale_lr(latent_size: int, lr: float = GuidanceConfig.lr,
                  reference_size: int = REFERENCE_LATENT_SIZE) -> float:
    """Rescale a guidance learning rate to a latent with ``latent_size`` entries.

    Adam moves every coordinate by about ``lr`` per step, so the shift of the
    latent toward the source motion grows like ``lr * sqrt(size)``.  Keeping
    that shift fixed across latent sizes gives ``lr * sqrt(reference / size)``.
    """
    if latent_size <= 0:
        raise DomainError("latent_size must be positive")
    return lr * math.sqrt(reference_size / latent_size)


def trajectory_bank(frames: int = 8, size: int = 32) -> list:
    """32 motions with pairwise distinct mean-centred tracks that fit a ``size`` canvas."""
    c = size / 2.0
    mid = (frames - 1) / 2.0
    bank = []
    for speed in (1.0, 2.0):
        for j in range(8):
            ang = j * math.pi / 4
            v = (speed * math.cos(ang), speed * math.sin(ang))
            bank.append(Trajectory("linear", (c - mid * v[0], c - mid * v[1]), v))
    for omega, phase in ((math.pi / 4, 0.0), (-math.pi / 4, 0.0), (math.pi / 4, math.pi), (-math.pi / 6, math.pi / 2)):
        bank.append(Trajectory("circular", (c, c), radius=6.0, omega=omega, phase=phase))
    period = 2 * math.pi / (frames - 1)
    for vel in ((1.5, 0.0), (-1.5, 0.0), (0.0, 1.5), (0.0, -1.5)):
        for phase in (0.0, math.pi):
            bank.append(Trajectory("sinusoidal", (c - mid * vel[0], c - mid * vel[1]), vel,
                                   omega=period, phase=phase, amplitude=4.0))
    left, right = c - 6.0, c + 6.0
    # the aggregate centroid moves at (s1 + s2) / 2, so the pairs use distinct sums
    for s1, s2 in ((1.5, -1.5), (1.5, -0.5), (1.5, 1.5), (-1.5, -1.5)):
        bank.append((Trajectory("linear", (left, c - mid * s1), (0.0, s1)),
                     Trajectory("linear", (right, c - mid * s2), (0.0, s2))))
    return bank


def difficulty(motion) -> str:
    if not isinstance(motion, Trajectory) or motion.kind == "sinusoidal":
        return "hard"
    return "easy" if motion.kind == "linear" else "medium"


# bank indices of the default sources: four easy linear, four hard
EASY_SOURCES = (0, 3, 10, 13)
HARD_SOURCES = (24, 27, 28, 30)


def standard_benchmark(frames: int = 8, size: int = 32, codec="identity",
                       source_class: AppearanceClass = RING, target_classes=(DISK, SQUARE),
                       sources=EASY_SOURCES + HARD_SOURCES,
                       sampler: SamplerConfig = SamplerConfig(),
                       guidance: GuidanceConfig | None = None):
    """Dataset of every class on every bank motion, plus one job per (source, target class).

    Sources are rendered in ``source_class`` and targets are the other classes,
    so every job is a genuine appearance change.  Without an explicit
    ``guidance`` the jobs use the default config with :func:`desk_scale_lr`.
    """
    bank = trajectory_bank(frames, size)
    classes = (*target_classes, source_class)
    specs = [(cls, motion) for cls in classes for motion in bank]
    dataset = build_dataset(specs, frames, size, size, codec)
    if guidance is None:
        guidance = GuidanceConfig(lr=desk_scale_lr(int(np.prod(dataset.latent_shape))))
    jobs = []
    for i in sources:
        video = render_video(source_class, bank[i], frames, size, size)
        for cls in target_classes:
            jobs.append(TransferJob(video, cls.id, bank[i], sampler, guidance,
                                    name=f"src{i:02d}-to-{cls.shape}", difficulty=difficulty(bank[i])))
    return dataset, jobs


# ---------------------------------------------------------------------------
# ablation sweeps

GRID_KEYS = ("gamma", "alpha_beta", "t_opt", "k_opt", "source_rep", "diff_mode")
SWEEP_COLUMNS = (["config_id", "job", "seed", "status", "error", "gamma", "alpha", "beta", "t_opt",
                  "k_opt", "source_rep", "diff_mode"] + METRIC_COLUMNS
                 + ["evals_target", "evals_source", "wall_time"])
AGG_COLUMNS = ["config_id", "gamma", "alpha", "beta", "t_opt", "k_opt", "source_rep", "diff_mode", "n",
               "failed"] + [f"{m}_{s}" for m in METRIC_COLUMNS for s in ("mean", "std")]


def expand_grid(grid: dict, base: GuidanceConfig = GuidanceConfig()) -> list[GuidanceConfig]:
    """Cartesian product of the listed values over ``base``."""
    unknown = set(grid) - set(GRID_KEYS)
    if unknown:
        raise KeyError(f"unknown grid keys {sorted(unknown)}")
    keys = [k for k in GRID_KEYS if k in grid]
    if not keys or any(len(grid[k]) == 0 for k in keys):
        raise ValueError("ablation grid is empty")
    configs = []
    for values in itertools.product(*(grid[k] for k in keys)):
        changes = {}
        for k, val in zip(keys, values):
            if k == "alpha_beta":
                changes["alpha"], changes["beta"] = (float(x) for x in val)
            else:
                changes[k] = val
        configs.append(base.replace(**changes))
    return configs


def _run_row(args):
    cid, config, job, seed, field, codec = args
    row = {"config_id": cid, "job": job.name, "seed": seed, "gamma": config.gamma, "alpha": config.alpha,
           "beta": config.beta, "t_opt": config.t_opt, "k_opt": config.k_opt,
           "source_rep": config.source_rep.value, "diff_mode": config.diff_mode.value}
    try:
        report = transfer(job.with_(guidance=config, seed=seed), field, codec, trace=False)
    except Exception as exc:  # recorded, sweep continues
        row.update(status="failed", error=f"{type(exc).__name__}: {exc}")
        return row
    row.update(status="ok", error="", evals_target=report.evals["target"],
               evals_source=report.evals["source"], wall_time=report.wall_time, **report.metrics)
    return row


def ablate(grid: dict, jobs, seeds, field: VelocityField, base: GuidanceConfig = GuidanceConfig(),
           codec="identity", workers: int = 1):
    """Run every (config, job, seed) combination.

    Returns ``(rows, aggregates)``; rows keep a deterministic order regardless
    of ``workers``.  Failed runs are kept as rows with ``status="failed"``.
    """
    configs = expand_grid(grid, base)
    tasks = [(cid, cfg, job, seed, field, codec)
             for cid, cfg in enumerate(configs) for job in jobs for seed in seeds]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(_run_row, tasks, chunksize=max(1, len(tasks) // (4 * workers))))
    else:
        rows = [_run_row(t) for t in tasks]
    return rows, aggregate(rows)


def aggregate(rows) -> list[dict]:
    out = []
    for cid, group in itertools.groupby(sorted(rows, key=lambda r: r["config_id"]), key=lambda r: r["config_id"]):
        group = list(group)
        ok = [r for r in group if r["status"] == "ok"]
        agg = {k: group[0][k] for k in ("config_id", "gamma", "alpha", "beta", "t_opt", "k_opt",
                                        "source_rep", "diff_mode")}
        agg.update(n=len(ok), failed=len(group) - len(ok))
        for m in METRIC_COLUMNS:
            vals = np.array([r[m] for r in ok], dtype=np.float64)
            vals = vals[np.isfinite(vals)]
            agg[f"{m}_mean"] = float(vals.mean()) if len(vals) else float("nan")
            agg[f"{m}_std"] = float(vals.std(ddof=1)) if len(vals) > 1 else 0.0
        out.append(agg)
    return out
