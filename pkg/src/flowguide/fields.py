"""Velocity fields ``v(z_t, t, condition)``.

A field is called only through :meth:`VelocityField.eval`, which counts its
invocations and never exposes gradients.  The oracle additionally offers an
explicit vector-Jacobian product, used solely by the velocity-representation
guidance mode.

Conditions are integer class labels; ``None`` is the empty condition.
"""

from __future__ import annotations

import threading
from pathlib import Path

import numpy as np
from scipy.special import logsumexp

from . import formats
from .core import DomainError, SeededRng, check_same_shape
from .optim import AdamState, adam_step
from .toy_world import Dataset

T_MIN = 1e-3


class ConditionError(ValueError):
    """The condition selects no dataset items or is unknown to the field."""


class CapabilityError(TypeError):
    """The field does not support the requested operation."""


class VelocityField:
    """Base class: subclasses implement ``_velocity`` on a single latent."""

    supports_vjp = False

    def __init__(self):
        self._lock = threading.Lock()
        self.eval_count = 0
        self.vjp_count = 0

    def __getstate__(self):
        state = dict(self.__dict__)
        del state["_lock"]
        return state

    def __setstate__(self, state):
        self.__dict__.update(state)
        self._lock = threading.Lock()

    def _bump(self, attr="eval_count"):
        with self._lock:
            setattr(self, attr, getattr(self, attr) + 1)

    def eval(self, z_t, t, condition=None) -> np.ndarray:
        self._bump()
        z = np.asarray(z_t)
        out = self._velocity(z, float(t), condition)
        return out.astype(z.dtype, copy=False)

    def vjp(self, z_t, t, condition, u) -> np.ndarray:
        raise CapabilityError(f"{type(self).__name__} does not provide vector-Jacobian products")

    def _velocity(self, z, t, condition):
        raise NotImplementedError


class OracleField(VelocityField):
    """Exact flow-matching velocity for a finite dataset.

    With items ``x_i`` of the conditioned subset and logits
    ``a_i = -|z - (1 - t) x_i|^2 / (2 t^2)`` the velocity is
    ``sum_i softmax(a)_i (z - x_i) / t``.  Below ``t_min`` the field falls back
    to the nearest item's conditional velocity.
    """

    supports_vjp = True

    def __init__(self, dataset: Dataset, t_min: float = T_MIN):
        super().__init__()
        if t_min <= 0:
            raise DomainError("t_min must be positive")
        self.dataset = dataset
        self.t_min = float(t_min)
        self._flat = dataset.latents.reshape(len(dataset), -1).astype(np.float64)
        self._sq = np.einsum("ij,ij->i", self._flat, self._flat)
        self._labels = dataset.labels
        self._subsets = {}

    def _items(self, condition):
        """Item matrix and squared norms of the conditioned subset."""
        if condition is None:
            return self._flat, self._sq
        key = int(condition)
        if key not in self._subsets:
            mask = self._labels == key
            if not mask.any():
                raise ConditionError(f"no dataset items with class {condition}")
            self._subsets[key] = (self._flat[mask], self._sq[mask])
        return self._subsets[key]

    def weights(self, z_t, t, condition=None) -> np.ndarray:
        """Posterior weights over the conditioned items (sum to one)."""
        a = self._logits(np.ravel(z_t).astype(np.float64), float(t), *self._items(condition))
        return np.exp(a - logsumexp(a))

    @staticmethod
    def _sq_dist(z, t, items, sq):
        # |z - (1-t) x_i|^2 expanded; float64 keeps the cancellation error far below the logit scale
        s = 1.0 - t
        return np.maximum(np.dot(z, z) - 2.0 * s * (items @ z) + s * s * sq, 0.0)

    @classmethod
    def _logits(cls, z, t, items, sq):
        return -cls._sq_dist(z, t, items, sq) / (2.0 * t * t)

    def _velocity(self, z, t, condition):
        if not 0.0 <= t <= 1.0:
            raise DomainError(f"t must lie in [0, 1], got {t}")
        items, sq = self._items(condition)
        zf = z.ravel().astype(np.float64)
        if t < self.t_min:
            nearest = items[np.argmin(self._sq_dist(zf, t, items, sq))]
            return ((zf - nearest) / max(t, self.t_min)).reshape(z.shape)
        a = self._logits(zf, t, items, sq)
        w = np.exp(a - logsumexp(a))
        mean = w @ items
        return ((zf - mean) / t).reshape(z.shape)

    def vjp(self, z_t, t, condition, u) -> np.ndarray:
        """``J^T u`` for ``J = d velocity / d z_t`` (analytic, no autograd)."""
        z = np.asarray(z_t)
        check_same_shape(z, u)
        t = float(t)
        if t < self.t_min:
            raise DomainError(f"vjp requires t >= t_min={self.t_min}")
        self._bump("vjp_count")
        items, sq = self._items(condition)
        zf = z.ravel().astype(np.float64)
        uf = np.ravel(u).astype(np.float64)
        a = self._logits(zf, t, items, sq)
        w = np.exp(a - logsumexp(a))
        c = items @ uf
        # sum_i grad(w_i) c_i = (1 - t)/t^2 * sum_i w_i (c_i - c_bar) x_i
        corr = (1.0 - t) / (t * t) * ((w * (c - w @ c)) @ items)
        return ((uf - corr) / t).reshape(z.shape).astype(z.dtype, copy=False)


def oracle_velocity(field: OracleField, z_t, t, condition=None) -> np.ndarray:
    return field.eval(z_t, t, condition)


def oracle_velocity_vjp(field: OracleField, z_t, t, condition, u) -> np.ndarray:
    return field.vjp(z_t, t, condition, u)


def cfg_velocity(field: VelocityField, z_t, t, condition, scale: float) -> np.ndarray:
    """Classifier-free guidance ``v_empty + s (v_cond - v_empty)``."""
    if scale < 0:
        raise DomainError("guidance scale must be non-negative")
    v_cond = field.eval(z_t, t, condition)
    v_empty = field.eval(z_t, t, None)
    return (v_empty + scale * (v_cond - v_empty)).astype(v_cond.dtype, copy=False)


class CfgField(VelocityField):
    """Wraps ``base`` so every eval is a two-branch guided evaluation.

    Counting happens on ``base``: each call here costs two base evals.
    """

    def __init__(self, base: VelocityField, scale: float, condition=None):
        super().__init__()
        if scale < 0:
            raise DomainError("guidance scale must be non-negative")
        self.base = base
        self.scale = float(scale)
        self.condition = condition

    @property
    def supports_vjp(self):
        return self.base.supports_vjp

    def eval(self, z_t, t, condition=None):
        cond = self.condition if condition is None else condition
        return cfg_velocity(self.base, z_t, t, cond, self.scale)

    def vjp(self, z_t, t, condition, u):
        cond = self.condition if condition is None else condition
        j_cond = self.base.vjp(z_t, t, cond, u)
        j_empty = self.base.vjp(z_t, t, None, u)
        return j_empty + self.scale * (j_cond - j_empty)


class MlpField(VelocityField):
    """Two-hidden-layer tanh network trained with the flow-matching loss.

    Input is the flattened latent, the time and a one-hot condition (all zeros
    for the empty condition); output is the flattened velocity.
    """

    nonlinearity = "tanh"

    def __init__(self, latent_shape, class_ids=(), hidden: int = 64, seed: int = 0,
                 t_min: float = T_MIN):
        super().__init__()
        self.latent_shape = tuple(int(s) for s in latent_shape)
        self.class_ids = [int(c) for c in class_ids]
        self.hidden = int(hidden)
        self.seed = int(seed)
        self.t_min = float(t_min)
        d = int(np.prod(self.latent_shape))
        d_in = d + 1 + len(self.class_ids)
        self.layer_sizes = [d_in, self.hidden, self.hidden, d]
        gen = SeededRng(seed, stream=0xA11).generator
        self.params = {}
        for i, (n_in, n_out) in enumerate(zip(self.layer_sizes[:-1], self.layer_sizes[1:]), start=1):
            self.params[f"W{i}"] = gen.normal(0.0, 1.0 / np.sqrt(n_in), (n_in, n_out))
            self.params[f"b{i}"] = np.zeros(n_out)
        self.optim = {k: AdamState() for k in self.params}

    @property
    def parameter_count(self) -> int:
        return int(sum(p.size for p in self.params.values()))

    def _features(self, z, t, conditions):
        z = np.asarray(z, dtype=np.float64).reshape(len(t), -1)
        onehot = np.zeros((len(t), len(self.class_ids)))
        for row, c in enumerate(conditions):
            if c is not None:
                try:
                    onehot[row, self.class_ids.index(int(c))] = 1.0
                except ValueError:
                    raise ConditionError(f"unknown class {c}") from None
        return np.hstack([z, np.asarray(t, dtype=np.float64)[:, None], onehot])

    def forward(self, x):
        p = self.params
        h1 = np.tanh(x @ p["W1"] + p["b1"])
        h2 = np.tanh(h1 @ p["W2"] + p["b2"])
        return h2 @ p["W3"] + p["b3"], (x, h1, h2)

    def backward(self, grad_out, cache):
        x, h1, h2 = cache
        p = self.params
        g = {"W3": h2.T @ grad_out, "b3": grad_out.sum(0)}
        d2 = (grad_out @ p["W3"].T) * (1.0 - h2 * h2)
        g["W2"], g["b2"] = h1.T @ d2, d2.sum(0)
        d1 = (d2 @ p["W2"].T) * (1.0 - h1 * h1)
        g["W1"], g["b1"] = x.T @ d1, d1.sum(0)
        return g

    def _velocity(self, z, t, condition):
        out, _ = self.forward(self._features(z[None], [t], [condition]))
        return out.reshape(z.shape)

    def save(self, directory) -> None:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        for name, value in self.params.items():
            formats.save_fmlt(directory / f"{name}.fmlt", value)
        formats.write_json(directory / "header.json", {
            "layer_sizes": self.layer_sizes, "nonlinearity": self.nonlinearity,
            "seed": self.seed, "latent_shape": list(self.latent_shape),
            "class_ids": self.class_ids, "t_min": self.t_min,
            "params": sorted(self.params), "format_versions": formats.FORMAT_VERSIONS,
        })

    @classmethod
    def load(cls, directory) -> "MlpField":
        directory = Path(directory)
        h = formats.read_json(directory / "header.json")
        net = cls(h["latent_shape"], h["class_ids"], h["layer_sizes"][1], h["seed"], h["t_min"])
        for name in h["params"]:
            net.params[name] = formats.load_fmlt(directory / f"{name}.fmlt").astype(np.float64)
        return net


def fm_train_step(field: MlpField, dataset: Dataset, rng: SeededRng, lr_train: float,
                  batch_size: int = 32, p_uncond: float = 0.1, optimizer: str = "adam") -> float:
    """One manual-backprop step on the flow-matching loss; returns the pre-step loss.

    Samples items ``x``, noise ``z1`` and ``t ~ U[t_min, 1]``, regresses
    ``v(z_t, t, c)`` onto ``z1 - x`` with a per-sample squared error summed
    over entries and averaged over the batch.  A fraction ``p_uncond`` of the
    batch drops its label so the empty condition is learned too.
    """
    gen = rng.generator
    idx = gen.integers(0, len(dataset), batch_size)
    x = dataset.latents[idx].reshape(batch_size, -1).astype(np.float64)
    z1 = gen.standard_normal(x.shape)
    t = gen.uniform(field.t_min, 1.0, batch_size)
    zt = (1.0 - t)[:, None] * x + t[:, None] * z1
    labels = [None if gen.uniform() < p_uncond else int(c) for c in dataset.labels[idx]]
    pred, cache = field.forward(field._features(zt, t, labels))
    resid = pred - (z1 - x)
    loss = float(np.mean(np.sum(resid * resid, axis=1)))
    grads = field.backward(2.0 * resid / batch_size, cache)
    if lr_train == 0:
        return loss
    for name, g in grads.items():
        if optimizer == "sgd":
            field.params[name] = field.params[name] - lr_train * g
        else:
            field.params[name] = adam_step(field.params[name], g, field.optim[name], lr_train)
    return loss
