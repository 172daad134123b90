"""Synthetic videos of moving shapes with known trajectories, and the codecs.

Canvas coordinates are continuous pixel units: pixel ``(row, col)`` covers
``[col, col + 1) x [row, row + 1)`` and its center sits at
``(col + 0.5, row + 0.5)``.  Positions are ``(x, y)`` = (column, row).
"""

from __future__ import annotations

import math
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence, Union

import numpy as np

from . import formats
from .core import DTYPE, ShapeError

SHAPES = ("disk", "square", "ring")
KINDS = ("linear", "circular", "sinusoidal")
RING_INNER_FRACTION = 0.5


class GeometryError(ValueError):
    """A shape does not fit on the canvas."""


@dataclass(frozen=True)
class AppearanceClass:
    id: int
    shape: str
    radius: float
    intensity: float = 1.0

    def __post_init__(self):
        if self.shape not in SHAPES:
            raise ValueError(f"unknown shape {self.shape!r}; expected one of {SHAPES}")
        if self.radius < 1:
            raise ValueError("radius must be at least 1 px")
        if not 0.0 < self.intensity <= 1.0:
            raise ValueError("intensity must lie in (0, 1]")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d) -> "AppearanceClass":
        return cls(int(d["id"]), d["shape"], float(d["radius"]), float(d["intensity"]))


@dataclass(frozen=True)
class Trajectory:
    """Parametric path of a shape center over frames ``k = 0..F-1``.

    linear:      ``start + k * velocity``
    circular:    ``start + radius * (cos(phase + omega k), sin(phase + omega k))``
    sinusoidal:  ``start + k * velocity + amplitude * sin(phase + omega k) * n``
                 where ``n`` is the unit normal to ``velocity`` (the y axis when
                 velocity is zero)
    """

    kind: str
    start: tuple[float, float]
    velocity: tuple[float, float] = (0.0, 0.0)
    radius: float = 0.0
    omega: float = 0.0
    phase: float = 0.0
    amplitude: float = 0.0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown trajectory kind {self.kind!r}")
        object.__setattr__(self, "start", tuple(float(v) for v in self.start))
        object.__setattr__(self, "velocity", tuple(float(v) for v in self.velocity))

    def positions(self, frames: int) -> np.ndarray:
        k = np.arange(frames, dtype=np.float64)[:, None]
        start = np.asarray(self.start)
        vel = np.asarray(self.velocity)
        if self.kind == "linear":
            return start + k * vel
        if self.kind == "circular":
            ang = self.phase + self.omega * k
            return start + self.radius * np.hstack([np.cos(ang), np.sin(ang)])
        speed = math.hypot(*vel)
        normal = np.array([-vel[1], vel[0]]) / speed if speed > 0 else np.array([0.0, 1.0])
        return start + k * vel + self.amplitude * np.sin(self.phase + self.omega * k) * normal

    def to_dict(self) -> dict:
        d = asdict(self)
        d["start"] = list(self.start)
        d["velocity"] = list(self.velocity)
        return d

    @classmethod
    def from_dict(cls, d) -> "Trajectory":
        return cls(**{**d, "start": tuple(d["start"]), "velocity": tuple(d.get("velocity", (0.0, 0.0)))})


# a scene item moves one or more copies of a shape, each along its own path
Motion = Union[Trajectory, Sequence[Trajectory]]


def _motions(traj: Motion) -> tuple[Trajectory, ...]:
    return (traj,) if isinstance(traj, Trajectory) else tuple(traj)


def motion_to_json(traj: Motion):
    paths = _motions(traj)
    return paths[0].to_dict() if len(paths) == 1 else [p.to_dict() for p in paths]


def motion_from_json(obj) -> Motion:
    if isinstance(obj, list):
        return tuple(Trajectory.from_dict(d) for d in obj)
    return Trajectory.from_dict(obj)


def _disk_cdf(x, y, r):
    """Area of the origin-centred disk of radius r inside {X <= x, Y <= y}."""
    X = np.clip(x, -r, r)
    s = np.sqrt(np.clip(r * r - y * y, 0.0, None))

    def prim(u):
        u = np.clip(u, -r, r)
        return 0.5 * (u * np.sqrt(np.clip(r * r - u * u, 0.0, None)) + r * r * np.arcsin(u / r))

    def seg(lo, hi):
        # [lo, hi] clipped on the right by X; returns (lo', hi') with hi' >= lo'
        top = np.maximum(np.minimum(hi, X), lo)
        return lo, top

    y_pos = y >= 0
    area = np.zeros(np.broadcast(x, y).shape)
    for lo, hi in ((-r, -s), (s, r)):
        a, b = seg(np.broadcast_to(lo, area.shape), np.broadcast_to(hi, area.shape))
        area += np.where(y_pos, 2.0 * (prim(b) - prim(a)), 0.0)
    a, b = seg(-s, s)
    area += y * (b - a) + prim(b) - prim(a)
    return area


def disk_coverage(cx, cy, r, height, width) -> np.ndarray:
    """Exact fraction of each pixel covered by a disk."""
    xs = np.arange(width + 1, dtype=np.float64) - cx
    ys = np.arange(height + 1, dtype=np.float64) - cy
    A = _disk_cdf(xs[None, :], ys[:, None], float(r))
    cov = A[1:, 1:] - A[:-1, 1:] - A[1:, :-1] + A[:-1, :-1]
    return np.clip(cov, 0.0, 1.0)


def square_coverage(cx, cy, half, height, width) -> np.ndarray:
    """Exact fraction of each pixel covered by an axis-aligned square."""
    def overlap(n, c):
        lo = np.arange(n, dtype=np.float64)
        return np.clip(np.minimum(lo + 1, c + half) - np.maximum(lo, c - half), 0.0, 1.0)

    return overlap(height, cy)[:, None] * overlap(width, cx)[None, :]


def shape_coverage(appearance: AppearanceClass, cx, cy, height, width) -> np.ndarray:
    r = appearance.radius
    if appearance.shape == "disk":
        return disk_coverage(cx, cy, r, height, width)
    if appearance.shape == "square":
        return square_coverage(cx, cy, r, height, width)
    outer = disk_coverage(cx, cy, r, height, width)
    inner = disk_coverage(cx, cy, RING_INNER_FRACTION * r, height, width)
    return np.clip(outer - inner, 0.0, 1.0)


def render_video(appearance: AppearanceClass, trajectory: Motion, frames: int = 8,
                 height: int = 32, width: int = 32) -> np.ndarray:
    """Rasterize the shape along its trajectory into an ``(F, H, W)`` video.

    Several trajectories render several copies; overlapping copies add and are
    clamped to 1.  Raises :class:`GeometryError` when any copy leaves the
    canvas.
    """
    if frames < 2:
        raise ShapeError("a video needs at least 2 frames")
    r = appearance.radius
    if 2 * r > min(height, width):
        raise GeometryError(f"shape of radius {r} does not fit a {height}x{width} canvas")
    video = np.zeros((frames, height, width), dtype=np.float64)
    for path in _motions(trajectory):
        pos = path.positions(frames)
        if (pos[:, 0].min() - r < 0 or pos[:, 0].max() + r > width
                or pos[:, 1].min() - r < 0 or pos[:, 1].max() + r > height):
            raise GeometryError(f"trajectory {path} leaves the {height}x{width} canvas")
        for k, (cx, cy) in enumerate(pos):
            video[k] += appearance.intensity * shape_coverage(appearance, cx, cy, height, width)
    return np.clip(video, 0.0, 1.0).astype(DTYPE)


class IdentityCodec:
    """Maps pixel values in [0, 1] to latents in [-1, 1] one-to-one."""

    name = "identity"
    factor = 1

    def latent_shape(self, frames, height, width):
        return (frames, height, width, 1)

    def encode(self, video) -> np.ndarray:
        v = np.asarray(video, dtype=DTYPE)
        return (2.0 * v - 1.0)[..., None].astype(DTYPE)

    def decode(self, z) -> np.ndarray:
        z = np.asarray(z)
        return np.clip((z[..., 0] + 1.0) * 0.5, 0.0, 1.0).astype(DTYPE)


class PooledCodec(IdentityCodec):
    """Averages 2x2 pixel blocks; decoding upsamples by replication."""

    name = "pooled"
    factor = 2

    def latent_shape(self, frames, height, width):
        return (frames, height // 2, width // 2, 1)

    def encode(self, video) -> np.ndarray:
        v = np.asarray(video, dtype=np.float64)
        f, h, w = v.shape
        if h % 2 or w % 2:
            raise ShapeError("pooled codec needs even height and width")
        pooled = v.reshape(f, h // 2, 2, w // 2, 2).mean(axis=(2, 4))
        return (2.0 * pooled - 1.0)[..., None].astype(DTYPE)

    def decode(self, z) -> np.ndarray:
        small = super().decode(z)
        return np.repeat(np.repeat(small, 2, axis=1), 2, axis=2)


CODECS = {"identity": IdentityCodec, "pooled": PooledCodec}


def get_codec(codec="identity"):
    if isinstance(codec, str):
        return CODECS[codec]()
    return codec


def encode(video, codec="identity") -> np.ndarray:
    return get_codec(codec).encode(video)


def decode(z, codec="identity") -> np.ndarray:
    return get_codec(codec).decode(z)


@dataclass
class Dataset:
    """Labelled latents over which the oracle field is exact.

    ``condition=None`` is the empty condition and selects every item.
    """

    latents: np.ndarray
    labels: np.ndarray
    classes: dict[int, AppearanceClass]
    motions: list = field(default_factory=list)
    codec: str = "identity"
    video_shape: tuple[int, int, int] = (8, 32, 32)

    def __post_init__(self):
        self.latents = np.asarray(self.latents, dtype=DTYPE)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.latents.ndim != 5 or len(self.latents) == 0:
            raise ShapeError("dataset needs a non-empty (N, F, H, W, C) latent stack")
        if len(self.labels) != len(self.latents):
            raise ShapeError("one label per latent required")
        unknown = set(self.labels.tolist()) - set(self.classes)
        if unknown:
            raise ValueError(f"labels {sorted(unknown)} missing from the class table")

    def __len__(self) -> int:
        return len(self.latents)

    @property
    def latent_shape(self) -> tuple[int, ...]:
        return tuple(self.latents.shape[1:])

    def subset(self, condition=None) -> np.ndarray:
        if condition is None:
            return self.latents
        return self.latents[self.labels == int(condition)]

    def items(self):
        return list(zip(self.latents, self.labels.tolist()))


def build_dataset(specs, frames: int = 8, height: int = 32, width: int = 32,
                  codec="identity") -> Dataset:
    """Render and encode ``(AppearanceClass, trajectory)`` pairs in order."""
    codec = get_codec(codec)
    latents, labels, motions, classes = [], [], [], {}
    seen = set()
    for appearance, motion in specs:
        known = classes.setdefault(appearance.id, appearance)
        if known != appearance:
            raise ValueError(f"class id {appearance.id} is bound to two different appearances")
        key = (appearance, repr(motion_to_json(motion)))
        if key in seen:
            warnings.warn(f"duplicate dataset item for class {appearance.id}; keeping it", stacklevel=2)
        seen.add(key)
        latents.append(codec.encode(render_video(appearance, motion, frames, height, width)))
        labels.append(appearance.id)
        motions.append(motion)
    return Dataset(np.stack(latents), np.array(labels), classes, motions, codec.name,
                   (frames, height, width))


def save_dataset(directory, dataset: Dataset, previews: bool = True) -> Path:
    """Write one FMLT file per latent, optional PGM previews and ``manifest.json``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    codec = get_codec(dataset.codec)
    items = []
    for i, (z, label) in enumerate(zip(dataset.latents, dataset.labels.tolist())):
        name = f"item_{i:04d}.fmlt"
        formats.save_fmlt(directory / name, z)
        entry = {"file": name, "class_id": int(label)}
        if i < len(dataset.motions):
            entry["trajectory"] = motion_to_json(dataset.motions[i])
        if previews:
            entry["frames"] = formats.save_frames(directory / f"item_{i:04d}", codec.decode(z))
        items.append(entry)
    manifest = {
        "items": items,
        "classes": [c.to_dict() for _, c in sorted(dataset.classes.items())],
        "codec": dataset.codec,
        "video_shape": list(dataset.video_shape),
        "format_versions": formats.FORMAT_VERSIONS,
    }
    path = directory / "manifest.json"
    formats.write_json(path, manifest)
    return path


def load_dataset(manifest_path) -> Dataset:
    manifest_path = Path(manifest_path)
    if manifest_path.is_dir():
        manifest_path = manifest_path / "manifest.json"
    m = formats.read_json(manifest_path)
    root = manifest_path.parent
    classes = {c["id"]: AppearanceClass.from_dict(c) for c in m["classes"]}
    latents = [formats.load_fmlt(root / it["file"]) for it in m["items"]]
    labels = [it["class_id"] for it in m["items"]]
    motions = [motion_from_json(it["trajectory"]) if "trajectory" in it else None for it in m["items"]]
    return Dataset(np.stack(latents), np.array(labels), classes, motions, m.get("codec", "identity"),
                   tuple(m.get("video_shape", latents[0].shape[:3])))
