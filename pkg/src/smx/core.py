"""Numerical primitives shared by the planners and learners."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any

import numpy as np

# Normalisation tolerance for probability vectors and the min-max degeneracy gap.
NORM_TOL = 1e-9
DEGENERATE_TOL = 1e-12
SAMPLE_NORM_TOL = 1e-6


class InvalidArgument(ValueError):
    """Raised when an operation receives an input outside its contract."""


class RngStream:
    """Seeded, splittable random stream.

    A stream is identified by ``(seed, stream_id)`` plus the path of splits
    that produced it.  Children are derived from the seed sequence, not from
    the parent's generator, so drawing from the parent never perturbs them.
    """

    def __init__(self, seed: int, stream_id: int = 0, _path: tuple[int, ...] = ()):
        self.seed = int(seed)
        self.stream_id = int(stream_id)
        self._path = tuple(_path)
        ss = np.random.SeedSequence(self.seed, spawn_key=(self.stream_id, *self._path))
        self.generator = np.random.Generator(np.random.PCG64(ss))
        self._children = 0

    def split(self, n: int | None = None) -> "RngStream | list[RngStream]":
        """Return one child stream, or a list of ``n`` children."""
        count = 1 if n is None else int(n)
        kids = []
        for _ in range(count):
            kids.append(RngStream(self.seed, self.stream_id, self._path + (self._children,)))
            self._children += 1
        return kids[0] if n is None else kids

    def __repr__(self) -> str:
        return f"RngStream(seed={self.seed}, stream_id={self.stream_id}, path={self._path})"


def as_generator(rng: RngStream | np.random.Generator) -> np.random.Generator:
    if isinstance(rng, RngStream):
        return rng.generator
    return rng


def _finite_vector(values, name: str = "values") -> np.ndarray:
    arr = np.asarray(values, dtype=np.float64)
    if arr.size == 0:
        raise InvalidArgument(f"{name} must be non-empty")
    if not np.all(np.isfinite(arr)):
        raise InvalidArgument(f"{name} must be finite, got {arr!r}")
    return arr


def softmax_temp(values, tau: float) -> np.ndarray:
    """Normalised ``exp(values / tau)`` along the last axis."""
    if not tau > 0:
        raise InvalidArgument(f"tau must be positive, got {tau}")
    x = _finite_vector(values) / tau
    x = x - x.max(axis=-1, keepdims=True)
    e = np.exp(x)
    return e / e.sum(axis=-1, keepdims=True)


def minmax_normalise(values) -> np.ndarray:
    """Affinely map ``values`` onto [0, 1] along the last axis.

    Rows whose spread is below ``DEGENERATE_TOL`` map to all zeros, which a
    downstream softmax turns into a uniform distribution.
    """
    x = _finite_vector(values)
    lo = x.min(axis=-1, keepdims=True)
    spread = x.max(axis=-1, keepdims=True) - lo
    degenerate = spread <= DEGENERATE_TOL
    out = (x - lo) / np.where(degenerate, 1.0, spread)
    return np.where(degenerate, 0.0, out)


def _check_probs(probs, tol: float) -> np.ndarray:
    p = np.asarray(probs, dtype=np.float64)
    if p.ndim != 1 or p.size == 0:
        raise InvalidArgument("probs must be a non-empty vector")
    if not np.all(np.isfinite(p)) or np.any(p < 0):
        raise InvalidArgument(f"probs must be finite and nonnegative, got {p!r}")
    if abs(p.sum() - 1.0) > tol:
        raise InvalidArgument(f"probs must sum to 1 (got {p.sum()!r})")
    return p


def sample_categorical(probs, rng: RngStream | np.random.Generator) -> int:
    """Draw one index from ``probs`` using exactly one uniform variate."""
    p = _check_probs(probs, SAMPLE_NORM_TOL)
    u = as_generator(rng).random()
    cdf = np.cumsum(p)
    idx = int(np.searchsorted(cdf, u * cdf[-1], side="right"))
    return min(idx, p.size - 1)


def sample_categorical_rows(probs: np.ndarray, gen: np.random.Generator) -> np.ndarray:
    """Inverse-CDF sampling of one index per row of ``probs`` (one draw per row)."""
    cdf = np.cumsum(probs, axis=-1)
    u = gen.random(probs.shape[:-1])[..., None] * cdf[..., -1:]
    idx = (cdf <= u).sum(axis=-1)
    return np.minimum(idx, probs.shape[-1] - 1)


def sample_indices(probs: np.ndarray, n: int, gen: np.random.Generator) -> np.ndarray:
    """``n`` i.i.d. draws from one categorical (multinomial resampling)."""
    cdf = np.cumsum(probs)
    u = gen.random(n) * cdf[-1]
    return np.minimum(np.searchsorted(cdf, u, side="right"), len(probs) - 1)


def mix_dirichlet_noise(probs, alpha: float, weight: float, rng) -> np.ndarray:
    """Blend ``probs`` with a Dirichlet(alpha) draw: ``(1-weight) p + weight d``."""
    if not alpha > 0:
        raise InvalidArgument(f"alpha must be positive, got {alpha}")
    if not 0.0 <= weight <= 1.0:
        raise InvalidArgument(f"weight must lie in [0, 1], got {weight}")
    p = _check_probs(probs, SAMPLE_NORM_TOL)
    noise = dirichlet(alpha, p.size, as_generator(rng))
    out = (1.0 - weight) * p + weight * noise
    return out / out.sum()


def dirichlet(alpha: float, size: int, gen: np.random.Generator, batch: tuple = ()) -> np.ndarray:
    # Gamma draws underflow to exactly 0 for tiny alpha; fall back to a one-hot draw.
    g = gen.gamma(alpha, 1.0, size=batch + (size,))
    total = g.sum(axis=-1, keepdims=True)
    empty = total[..., 0] <= 0
    if np.any(empty):
        picks = gen.integers(size, size=int(empty.sum()))
        g[empty] = np.eye(size)[picks]
        total = g.sum(axis=-1, keepdims=True)
    return g / total


def effective_sample_size(probs) -> float:
    p = np.asarray(probs, dtype=np.float64)
    return float(1.0 / np.sum(p * p))


@dataclass
class PolicyDistribution:
    """Categorical, diagonal-Gaussian or empirical (dirac mixture) action distribution."""

    kind: str
    probs: np.ndarray | None = None
    mean: np.ndarray | None = None
    stddev: np.ndarray | None = None
    atoms: np.ndarray | None = None
    masses: np.ndarray | None = None
    meta: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        if self.kind == "categorical":
            self.probs = _check_probs(self.probs, NORM_TOL)
        elif self.kind == "gaussian":
            self.mean = np.asarray(self.mean, dtype=np.float64)
            self.stddev = np.asarray(self.stddev, dtype=np.float64)
            if self.mean.shape != self.stddev.shape:
                raise InvalidArgument("mean and stddev shapes differ")
            if np.any(self.stddev <= 0):
                raise InvalidArgument("stddev must be strictly positive")
        elif self.kind == "empirical":
            self.atoms = np.asarray(self.atoms)
            self.masses = _check_probs(self.masses, NORM_TOL)
            if len(self.atoms) != len(self.masses):
                raise InvalidArgument("atoms and masses lengths differ")
        else:
            raise InvalidArgument(f"unknown distribution kind {self.kind!r}")

    @classmethod
    def categorical(cls, probs) -> "PolicyDistribution":
        return cls("categorical", probs=probs)

    @classmethod
    def gaussian(cls, mean, stddev) -> "PolicyDistribution":
        return cls("gaussian", mean=mean, stddev=stddev)

    @classmethod
    def empirical(cls, atoms, masses) -> "PolicyDistribution":
        return cls("empirical", atoms=atoms, masses=masses)

    def sample(self, rng):
        gen = as_generator(rng)
        if self.kind == "categorical":
            return sample_categorical(self.probs, gen)
        if self.kind == "gaussian":
            return self.mean + self.stddev * gen.standard_normal(self.mean.shape)
        return self.atoms[sample_categorical(self.masses, gen)]

    def mode(self):
        if self.kind == "categorical":
            return int(np.argmax(self.probs))
        if self.kind == "gaussian":
            return self.mean.copy()
        return self.atoms[int(np.argmax(self.masses))]

    def as_categorical(self, num_actions: int) -> np.ndarray:
        """Dense probability vector over ``num_actions`` discrete actions."""
        if self.kind == "categorical":
            return self.probs
        if self.kind == "empirical":
            return np.bincount(self.atoms.astype(np.int64), weights=self.masses, minlength=num_actions)
        raise InvalidArgument("a gaussian has no dense categorical form")
