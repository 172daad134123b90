"""Latent tensors, the uniform time grid and seeded random streams.

Latents are plain ``numpy`` arrays of rank 4 laid out as
``(frames, height, width, channels)``.  Values are stored as float32;
reductions accumulate in float64.  Functions here accept any floating dtype
and preserve it, which lets gradient checks run in float64.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

DTYPE = np.float32


class ShapeError(ValueError):
    """Tensor shapes are incompatible with the requested operation."""


class DomainError(ValueError):
    """A scalar argument lies outside its admissible range."""


class NumericError(FloatingPointError):
    """A tensor acquired non-finite values."""


def as_latent(x, dtype=None) -> np.ndarray:
    """Validate ``x`` as a latent tensor and return it as an array.

    The array must be rank 4 with every axis at least 1 and contain only
    finite values.  ``dtype`` defaults to float32 unless ``x`` is already a
    floating array, in which case its precision is kept.
    """
    arr = np.asarray(x)
    if dtype is None:
        dtype = arr.dtype if np.issubdtype(arr.dtype, np.floating) else DTYPE
    arr = arr.astype(dtype, copy=False)
    if arr.ndim != 4 or min(arr.shape) < 1:
        raise ShapeError(f"latent must have shape (F, H, W, C) with all axes >= 1, got {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise NumericError("latent contains NaN or Inf")
    return arr


def check_same_shape(a: np.ndarray, b: np.ndarray) -> None:
    if np.shape(a) != np.shape(b):
        raise ShapeError(f"shape mismatch: {np.shape(a)} vs {np.shape(b)}")


def inner_product(a: np.ndarray, b: np.ndarray) -> float:
    """Sum of elementwise products over the fully flattened tensors."""
    check_same_shape(a, b)
    return float(np.dot(np.ravel(a).astype(np.float64), np.ravel(b).astype(np.float64)))


def sq_norm(a: np.ndarray) -> float:
    flat = np.ravel(a).astype(np.float64)
    return float(np.dot(flat, flat))


def norm(a: np.ndarray) -> float:
    return float(np.sqrt(sq_norm(a)))


def lerp_path(z0: np.ndarray, z1: np.ndarray, t: float) -> np.ndarray:
    """Point ``(1 - t) z0 + t z1`` on the straight path between two latents."""
    check_same_shape(z0, z1)
    if not 0.0 <= t <= 1.0:
        raise DomainError(f"t must lie in [0, 1], got {t}")
    if t == 0.0:
        return np.array(z0, copy=True)
    if t == 1.0:
        return np.array(z1, copy=True)
    dtype = np.result_type(z0, z1)
    return ((1.0 - t) * z0 + t * z1).astype(dtype, copy=False)


@dataclass(frozen=True)
class TimeGrid:
    """Uniform knots ``t_k = 1 - k / steps`` for ``k = 0..steps``.

    ``shift`` is a placeholder for a timestep-shift schedule; only the
    identity (``shift=1.0``) is implemented.
    """

    steps: int
    shift: float = 1.0

    def __post_init__(self):
        if int(self.steps) != self.steps or self.steps < 1:
            raise DomainError(f"steps must be a positive integer, got {self.steps}")
        if self.shift != 1.0:
            raise NotImplementedError("shifted timestep schedules are not implemented")

    @property
    def dt(self) -> float:
        return 1.0 / self.steps

    @property
    def knots(self) -> np.ndarray:
        return 1.0 - np.arange(self.steps + 1, dtype=np.float64) / self.steps

    def __len__(self) -> int:
        return self.steps

    def __iter__(self):
        # (k, t_k) for every step that evaluates the field; the final knot t=0 is excluded
        for k in range(self.steps):
            yield k, 1.0 - k / self.steps


@dataclass
class SeededRng:
    """Reproducible normal stream keyed by ``(seed, stream)``.

    Backed by numpy's PCG64 seeded through ``SeedSequence(seed,
    spawn_key=(stream,))``; normals come from ``Generator.standard_normal`` in
    float64 and are rounded to the requested dtype.  Distinct stream ids give
    independent sequences for the same seed.
    """

    seed: int
    stream: int = 0
    _gen: np.random.Generator = field(init=False, repr=False)

    def __post_init__(self):
        ss = np.random.SeedSequence(int(self.seed) & 0xFFFFFFFFFFFFFFFF,
                                    spawn_key=(int(self.stream) & 0xFFFFFFFFFFFFFFFF,))
        self._gen = np.random.Generator(np.random.PCG64(ss))

    @property
    def generator(self) -> np.random.Generator:
        return self._gen

    def normal(self, shape, dtype=DTYPE) -> np.ndarray:
        return self._gen.standard_normal(tuple(shape)).astype(dtype)

    def uniform(self, low=0.0, high=1.0, size=None):
        return self._gen.uniform(low, high, size)

    def integers(self, low, high=None, size=None):
        return self._gen.integers(low, high, size)


def sample_gaussian(shape, rng: SeededRng, dtype=DTYPE) -> np.ndarray:
    """Standard-normal latent of the given ``(F, H, W, C)`` shape."""
    shape = tuple(int(s) for s in shape)
    if len(shape) != 4 or min(shape) < 1:
        raise ShapeError(f"invalid latent shape {shape}")
    return rng.normal(shape, dtype)
