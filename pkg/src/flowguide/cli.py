"""Command-line front end: dataset generation, sampling, guided transfer and sweeps.

Exit codes: 0 success, 2 usage or validation error, 3 numeric failure.
Every run directory gets a ``manifest.json`` that is enough to re-run it
with ``--from-manifest``.
"""

from __future__ import annotations

import argparse
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import formats
from .core import DomainError, NumericError, ShapeError
from .fields import ConditionError, OracleField
from .guidance import DiffMode, GuidanceConfig, SourceRep
from .metrics import all_metrics
from .pipeline import (AGG_COLUMNS, BENCHMARK_CLASSES, EASY_SOURCES, GRID_KEYS, HARD_SOURCES, LOSS_COLUMNS,
                       METRIC_COLUMNS, SWEEP_COLUMNS, SamplerConfig, TransferJob, ablate,
                       desk_scale_lr, standard_benchmark, trajectory_bank, transfer)
from .sampler import load_trace, montage, save_trace, trace_montage
from .toy_world import GeometryError, build_dataset, get_codec, load_dataset, save_dataset

log = logging.getLogger("flowguide")

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC = 0, 2, 3
SHAPES = {c.shape: c for c in BENCHMARK_CLASSES}


class UsageError(ValueError):
    """Bad flags or inputs detected before any compute."""


# ---------------------------------------------------------------------------
# argument parsing

def _positive_int(text):
    value = int(text)
    if value <= 0:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {text}")
    return value


def _ratio(text):
    try:
        a, b = (float(x) for x in text.split(":"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected alpha:beta such as 4:1, got {text!r}") from None
    return a, b


def _lr(text):
    return text if text == "auto" else float(text)


def _cfg(text):
    return None if text.lower() in ("none", "off") else float(text)


def _add_sampler_flags(p):
    p.add_argument("--steps", type=_positive_int, default=50,
                   help="denoising steps T (published default 50)")
    p.add_argument("--cfg", type=_cfg, default=6.0,
                   help="classifier-free guidance scale, or 'none' for a single conditional eval "
                        "(published default 6)")
    p.add_argument("--seed", type=int, default=0, help="seed for the initial noise and source noising")


def _add_guidance_flags(p):
    p.add_argument("--t-opt", type=int, default=10,
                   help="number of leading denoising steps with latent optimization (published default 10)")
    p.add_argument("--k-opt", type=int, default=3,
                   help="optimizer steps per guided denoising step (published default 3)")
    p.add_argument("--lr", type=_lr, default=0.003,
                   help="Adam learning rate (published default 0.003); 'auto' rescales it to the "
                        "latent size of the dataset")
    p.add_argument("--alpha-beta", type=_ratio, default=(4.0, 1.0),
                   help="weights of latent and difference alignment as alpha:beta (published default 4:1)")
    p.add_argument("--gamma", type=float, default=0.1,
                   help="decay of the velocity component orthogonal to the average direction "
                        "(published default 0.1)")
    p.add_argument("--source-rep", choices=[m.value for m in SourceRep], default="latent-prediction",
                   help="source motion representation (published choice: latent-prediction)")
    p.add_argument("--diff-mode", choices=[m.value for m in DiffMode], default="all-pairs",
                   help="frame-difference operator of the difference-alignment term")
    p.add_argument("--per-frame-projection", action="store_true",
                   help="project the velocity frame by frame instead of over the whole tensor")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="flowguide", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="count", default=0, help="more logging (repeatable)")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="render a toy video dataset")
    p.add_argument("--out", type=Path, required=True, help="dataset directory (created if absent)")
    p.add_argument("--classes", default="disk,square",
                   help=f"comma-separated class shapes from {sorted(SHAPES)}")
    p.add_argument("--motions", type=_positive_int, default=4,
                   help="number of trajectories drawn from the built-in bank")
    p.add_argument("--benchmark", action="store_true",
                   help="write the standard benchmark dataset instead (all classes, all bank motions)")
    p.add_argument("--frames", type=int, default=8)
    p.add_argument("--size", type=int, default=32, help="square canvas side in pixels")
    p.add_argument("--codec", choices=["identity", "pooled"], default="identity")
    p.add_argument("--seed", type=int, default=0, help="seed for choosing bank motions")

    p = sub.add_parser("sample", help="unguided generation of one class")
    p.add_argument("--data", type=Path, required=True, help="dataset manifest or directory")
    p.add_argument("--target-class", type=int, required=True)
    p.add_argument("--out", type=Path, required=True, help="run directory")
    _add_sampler_flags(p)

    p = sub.add_parser("transfer", help="guided transfer of a source item's motion to a target class")
    p.add_argument("--data", type=Path, help="dataset manifest or directory")
    p.add_argument("--source-index", type=int, help="dataset item whose decoded video is the source")
    p.add_argument("--target-class", type=int)
    p.add_argument("--out", type=Path, required=True, help="run directory")
    p.add_argument("--from-manifest", type=Path,
                   help="re-run exactly the configuration recorded in a run manifest")
    _add_sampler_flags(p)
    _add_guidance_flags(p)

    p = sub.add_parser("ablate", help="sweep guidance settings over the standard benchmark")
    p.add_argument("--out", type=Path, required=True, help="directory for the sweep CSVs")
    p.add_argument("--grid-gamma", dest="grid_gamma", type=float, nargs="*")
    p.add_argument("--grid-alpha-beta", dest="grid_alpha_beta", type=_ratio, nargs="*")
    p.add_argument("--grid-t-opt", dest="grid_t_opt", type=int, nargs="*")
    p.add_argument("--grid-k-opt", dest="grid_k_opt", type=int, nargs="*")
    p.add_argument("--grid-source-rep", dest="grid_source_rep", nargs="*",
                   choices=[m.value for m in SourceRep])
    p.add_argument("--grid-diff-mode", dest="grid_diff_mode", nargs="*", choices=[m.value for m in DiffMode])
    p.add_argument("--jobs", choices=["all", "easy", "hard"], default="all")
    p.add_argument("--seeds", type=_positive_int, default=5, help="seeds 0..N-1 per job")
    p.add_argument("--workers", type=_positive_int, default=1)
    _add_sampler_flags(p)
    _add_guidance_flags(p)
    p.set_defaults(lr="auto")

    p = sub.add_parser("inspect-trace", help="write per-step clean-latent prediction montages")
    p.add_argument("run", type=Path, help="run directory holding trace/")
    p.add_argument("--out", type=Path, help="montage directory (default RUN/inspect)")

    p = sub.add_parser("metrics", help="score a generated video against a source video")
    p.add_argument("--source", type=Path, required=True, help="FMLT video or directory of PGM frames")
    p.add_argument("--generated", type=Path, required=True, help="FMLT video or directory of PGM frames")
    p.add_argument("--target-shape", choices=sorted(SHAPES), required=True,
                   help="appearance class used for the appearance score")
    p.add_argument("--out", type=Path, help="append the scores to this CSV instead of printing")
    return parser


# ---------------------------------------------------------------------------
# helpers

def _guidance_from_args(args, latent_size) -> GuidanceConfig:
    alpha, beta = args.alpha_beta
    lr = desk_scale_lr(latent_size) if args.lr == "auto" else args.lr
    try:
        return GuidanceConfig(alpha=alpha, beta=beta, lr=lr, k_opt=args.k_opt, t_opt=args.t_opt,
                              source_rep=args.source_rep, diff_mode=args.diff_mode, gamma=args.gamma,
                              per_frame_projection=args.per_frame_projection)
    except DomainError as exc:
        raise UsageError(str(exc)) from None


def _load_video(path: Path) -> np.ndarray:
    if path.is_dir():
        frames = sorted(path.glob("*.pgm"))
        if not frames:
            raise UsageError(f"no PGM frames in {path}")
        return np.stack([formats.load_pgm(f) for f in frames]).astype(np.float32) / 255.0
    video = formats.load_fmlt(path)
    return video[..., 0] if video.ndim == 4 and video.shape[-1] == 1 else video


def _write_run(out: Path, report, codec, manifest: dict) -> None:
    """Frames, final latent, trace, montage, loss report and manifest of one run."""
    out.mkdir(parents=True, exist_ok=True)
    formats.save_frames(out / "frames", report.video)
    formats.save_fmlt(out / "latent.fmlt", report.latent)
    formats.save_fmlt(out / "video.fmlt", report.video)
    save_trace(out / "trace", report.trace)
    formats.save_pgm(out / "montage.pgm", trace_montage(report.trace, codec.decode))
    formats.write_csv(out / "report.csv", LOSS_COLUMNS, report.loss_rows)
    manifest = {**manifest, **report.config, "evals": report.evals, "metrics": report.metrics,
                "format_versions": formats.FORMAT_VERSIONS}
    formats.write_json(out / "manifest.json", manifest)


def _check_class(dataset, target_class):
    if target_class not in dataset.classes:
        raise UsageError(f"target class {target_class} not in dataset classes {sorted(dataset.classes)}")


# ---------------------------------------------------------------------------
# subcommands

def cmd_gen_data(args) -> int:
    if args.benchmark:
        dataset, _ = standard_benchmark(args.frames, args.size, args.codec)
    else:
        if args.size <= 0 or args.frames < 2:
            raise UsageError("canvas size must be positive and frames at least 2")
        names = [s.strip() for s in args.classes.split(",") if s.strip()]
        bad = [s for s in names if s not in SHAPES]
        if bad or not names:
            raise UsageError(f"unknown class shapes {bad}; choose from {sorted(SHAPES)}")
        bank = trajectory_bank(args.frames, args.size)
        if args.motions > len(bank):
            raise UsageError(f"at most {len(bank)} motions are available")
        picks = np.sort(np.random.default_rng(args.seed).choice(len(bank), args.motions, replace=False))
        specs = [(SHAPES[s], bank[i]) for s in names for i in picks]
        dataset = build_dataset(specs, args.frames, args.size, args.size, args.codec)
    path = save_dataset(args.out, dataset)
    log.info("wrote %d items to %s", len(dataset), path)
    print(path)
    return EXIT_OK


def cmd_sample(args) -> int:
    dataset = load_dataset(args.data)
    _check_class(dataset, args.target_class)
    codec = get_codec(dataset.codec)
    sampler = SamplerConfig(args.steps, args.cfg)
    source = codec.decode(np.zeros(dataset.latent_shape, np.float32))
    job = TransferJob(source, args.target_class, sampler=sampler, guidance=GuidanceConfig(t_opt=0),
                      seed=args.seed, name="sample")
    report = transfer(job, OracleField(dataset), codec, trace=True)
    report.metrics = {}
    _write_run(args.out, report, codec, {"command": "sample", "data": str(Path(args.data).resolve())})
    print(args.out)
    return EXIT_OK


def _transfer_settings(args):
    """Resolve flags, or a recorded manifest, into ``(data, source_index, job settings)``."""
    if args.from_manifest is not None:
        m = formats.read_json(args.from_manifest)
        if m.get("command") != "transfer":
            raise UsageError(f"{args.from_manifest} is not a transfer manifest")
        s = m["sampler"]
        return (Path(m["data"]), int(m["source_index"]), int(m["target_class"]), int(m["seed"]),
                SamplerConfig(s["steps"], s["cfg_scale"]), GuidanceConfig(**m["guidance"]))
    if args.data is None or args.source_index is None or args.target_class is None:
        raise UsageError("transfer needs --data, --source-index and --target-class (or --from-manifest)")
    return args.data, args.source_index, args.target_class, args.seed, SamplerConfig(args.steps, args.cfg), None


def cmd_transfer(args) -> int:
    data, index, target, seed, sampler, guidance = _transfer_settings(args)
    dataset = load_dataset(data)
    _check_class(dataset, target)
    if not 0 <= index < len(dataset):
        raise UsageError(f"source index {index} out of range for {len(dataset)} items")
    if guidance is None:
        guidance = _guidance_from_args(args, int(np.prod(dataset.latent_shape)))
    if guidance.t_opt > sampler.steps:
        raise UsageError("--t-opt cannot exceed --steps")
    codec = get_codec(dataset.codec)
    source = codec.decode(dataset.latents[index])
    job = TransferJob(source, target, sampler=sampler, guidance=guidance, seed=seed, name=f"item{index}")
    report = transfer(job, OracleField(dataset), codec, trace=True)
    manifest = {"command": "transfer", "data": str(Path(data).resolve()), "source_index": index}
    _write_run(args.out, report, codec, manifest)
    log.info("evals %s metrics %s", report.evals, report.metrics)
    print(args.out)
    return EXIT_OK


def _fresh_path(directory: Path, stem: str) -> Path:
    """A path in ``directory`` that does not exist yet (never overwrite a sweep)."""
    path = directory / f"{stem}.csv"
    n = 1
    while path.exists():
        path = directory / f"{stem}_{n}.csv"
        n += 1
    return path


def cmd_ablate(args) -> int:
    grid = {k: getattr(args, "grid_" + k) for k in GRID_KEYS if getattr(args, "grid_" + k) is not None}
    if not grid or any(len(v) == 0 for v in grid.values()):
        raise UsageError("ablation grid is empty; give at least one --grid-* flag with values")
    sources = {"all": EASY_SOURCES + HARD_SOURCES, "easy": EASY_SOURCES, "hard": HARD_SOURCES}[args.jobs]
    sampler = SamplerConfig(args.steps, args.cfg)
    dataset, jobs = standard_benchmark(sources=sources, sampler=sampler)
    base = _guidance_from_args(args, int(np.prod(dataset.latent_shape)))
    rows, agg = ablate(grid, jobs, list(range(args.seeds)), OracleField(dataset), base,
                       workers=args.workers)
    args.out.mkdir(parents=True, exist_ok=True)
    stem = "ablation_" + time.strftime("%Y%m%d-%H%M%S")
    rows_path = _fresh_path(args.out, stem)
    formats.write_csv(rows_path, SWEEP_COLUMNS, rows)
    formats.write_csv(_fresh_path(args.out, rows_path.stem + "_agg"), AGG_COLUMNS, agg)
    failed = sum(r["status"] != "ok" for r in rows)
    log.info("%d rows, %d failed", len(rows), failed)
    print(rows_path)
    return EXIT_OK


def cmd_inspect_trace(args) -> int:
    trace_dir = args.run / "trace"
    if not (trace_dir / "trace.json").exists():
        raise UsageError(f"no trace found in {args.run}")
    manifest_path = args.run / "manifest.json"
    codec_name = formats.read_json(manifest_path).get("codec", "identity") if manifest_path.exists() else "identity"
    codec = get_codec(codec_name)
    trace = load_trace(trace_dir)
    out = args.out or args.run / "inspect"
    out.mkdir(parents=True, exist_ok=True)
    for r in trace.records:
        formats.save_pgm(out / f"step_{r.step:04d}.pgm", montage(codec.decode(r.z0_hat)))
    print(out)
    return EXIT_OK


def cmd_metrics(args) -> int:
    src, gen = _load_video(args.source), _load_video(args.generated)
    scores = all_metrics(src, gen, SHAPES[args.target_shape])
    if args.out:
        formats.write_csv(args.out, METRIC_COLUMNS, [scores], mode="a")
    else:
        for k in METRIC_COLUMNS:
            print(f"{k}\t{scores[k]:.6f}")
    return EXIT_OK


COMMANDS = {"gen-data": cmd_gen_data, "sample": cmd_sample, "transfer": cmd_transfer,
            "ablate": cmd_ablate, "inspect-trace": cmd_inspect_trace, "metrics": cmd_metrics}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(message)s")
    try:
        return COMMANDS[args.command](args)
    except NumericError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (UsageError, DomainError, ShapeError, GeometryError, ConditionError, formats.FormatError,
            FileNotFoundError, KeyError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
