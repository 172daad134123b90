"""Toy-scale motion, appearance and smoothness scores for ``(F, H, W)`` videos."""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .core import ShapeError
from .toy_world import AppearanceClass, shape_coverage

NCC_EPS = 1e-12
TEMPLATE_OFFSETS = 4


class MassError(ValueError):
    """A frame has no intensity, so its centroid is undefined."""


@dataclass
class CentroidTrack:
    positions: np.ndarray  # (F, 2) as (x, y) in pixel units
    mass: np.ndarray  # (F,)

    def __len__(self) -> int:
        return len(self.positions)


def centroid_track(video) -> CentroidTrack:
    """Intensity-weighted centroid of every frame, pixel centers at ``index + 0.5``."""
    v = np.asarray(video, dtype=np.float64)
    if v.ndim == 4:
        v = v[..., 0]
    mass = v.sum(axis=(1, 2))
    if np.any(mass <= 0):
        raise MassError(f"frames {np.flatnonzero(mass <= 0).tolist()} have zero mass")
    ys = np.arange(v.shape[1]) + 0.5
    xs = np.arange(v.shape[2]) + 0.5
    cx = np.einsum("fhw,w->f", v, xs) / mass
    cy = np.einsum("fhw,h->f", v, ys) / mass
    return CentroidTrack(np.stack([cx, cy], axis=1), mass)


def _positions(track):
    return track.positions if isinstance(track, CentroidTrack) else np.asarray(track, np.float64)


def trajectory_rmse(src_track, gen_track) -> float:
    """RMS distance between mean-centred tracks."""
    a, b = _positions(src_track), _positions(gen_track)
    if a.shape != b.shape:
        raise ShapeError(f"track lengths differ: {a.shape} vs {b.shape}")
    d = (a - a.mean(0)) - (b - b.mean(0))
    return float(np.sqrt(np.mean(np.sum(d * d, axis=1))))


def motion_fidelity(src_track, gen_track) -> float:
    return 1.0 / (1.0 + trajectory_rmse(src_track, gen_track))


def _cosine(a, b) -> float:
    a = np.ravel(a).astype(np.float64)
    b = np.ravel(b).astype(np.float64)
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        return 0.0
    return float(np.clip(np.dot(a, b) / (na * nb), -1.0, 1.0))


def diff_field_similarity(src_video, gen_video) -> float:
    """Mean cosine similarity of consecutive-frame differences (0 for static diffs)."""
    s, g = np.asarray(src_video, np.float64), np.asarray(gen_video, np.float64)
    if s.shape != g.shape:
        raise ShapeError(f"video shapes differ: {s.shape} vs {g.shape}")
    ds, dg = np.diff(s, axis=0), np.diff(g, axis=0)
    return float(np.mean([_cosine(a, b) for a, b in zip(ds, dg)]))


def temporal_consistency(video) -> float:
    v = np.asarray(video, np.float64)
    if v.shape[0] < 2:
        raise ShapeError("temporal consistency needs at least 2 frames")
    return float(np.mean([_cosine(a, b) for a, b in zip(v[:-1], v[1:])]))


@lru_cache(maxsize=64)
def class_templates(appearance: AppearanceClass, offsets: int = TEMPLATE_OFFSETS) -> np.ndarray:
    """Class prototype patches rendered at a grid of subpixel offsets.

    Returns a ``(offsets**2, P, P)`` stack of zero-mean, unit-norm patches.
    """
    r = appearance.radius
    size = int(np.ceil(2 * r)) + 2
    out = []
    for oy in range(offsets):
        for ox in range(offsets):
            c = size / 2.0
            patch = appearance.intensity * shape_coverage(
                appearance, c + ox / offsets - 0.5, c + oy / offsets - 0.5, size, size)
            patch = patch - patch.mean()
            out.append(patch / np.linalg.norm(patch))
    return np.stack(out)


def _max_ncc(frame, templates) -> float:
    p = templates.shape[-1]
    if frame.shape[0] < p or frame.shape[1] < p:
        raise ShapeError("frame smaller than the class template")
    win = sliding_window_view(frame, (p, p)).reshape(-1, p * p)
    win = win - win.mean(axis=1, keepdims=True)
    wn = np.linalg.norm(win, axis=1)
    scores = win @ templates.reshape(len(templates), -1).T
    ncc = np.where(wn[:, None] > NCC_EPS, scores / np.maximum(wn[:, None], NCC_EPS), 0.0)
    return float(ncc.max())


def appearance_score(video, appearance: AppearanceClass) -> float:
    """Mean over frames of the best normalized cross-correlation with the class template.

    Flat windows score 0, so a blank video scores 0; the result is clipped to [0, 1].
    """
    v = np.asarray(video, np.float64)
    if v.ndim == 4:
        v = v[..., 0]
    templates = class_templates(appearance)
    return float(np.clip(np.mean([_max_ncc(f, templates) for f in v]), 0.0, 1.0))


def all_metrics(src_video, gen_video, appearance: AppearanceClass) -> dict:
    """Every run-report metric; trajectory terms are NaN when a frame is empty."""
    try:
        rmse = trajectory_rmse(centroid_track(src_video), centroid_track(gen_video))
    except MassError:
        rmse = float("nan")
    return {
        "trajectory_rmse": rmse,
        "motion_fidelity": 1.0 / (1.0 + rmse) if np.isfinite(rmse) else 0.0,
        "diff_similarity": diff_field_similarity(src_video, gen_video),
        "appearance_score": appearance_score(gen_video, appearance),
        "temporal_consistency": temporal_consistency(gen_video),
    }
