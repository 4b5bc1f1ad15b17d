"""Containers, error types and seeded randomness shared across the package.

Sequences are stored row-major: one row per time step, one column per
feature dimension. Everything is float64.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

DTYPE = np.float64


class DimensionError(ValueError):
    """Operands have incompatible shapes."""


class DomainError(ValueError):
    """Input contains NaN/inf or is otherwise outside the valid domain."""


class ContractError(RuntimeError):
    """A cached trace does not belong to the call it is being used with."""


def _as_finite(values, name="values", ndim=None) -> np.ndarray:
    arr = np.asarray(values, dtype=DTYPE)
    if ndim is not None and arr.ndim != ndim:
        raise DimensionError(f"{name}: expected {ndim}-d array, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise DomainError(f"{name} contains non-finite entries")
    return arr


# -- matrix helpers --------------------------------------------------------

def _check_same(a, b, op):
    if a.shape != b.shape:
        raise DimensionError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def add(a, b) -> np.ndarray:
    a, b = np.asarray(a, dtype=DTYPE), np.asarray(b, dtype=DTYPE)
    _check_same(a, b, "add")
    return a + b


def sub(a, b) -> np.ndarray:
    a, b = np.asarray(a, dtype=DTYPE), np.asarray(b, dtype=DTYPE)
    _check_same(a, b, "sub")
    return a - b


def scale(a, c: float) -> np.ndarray:
    return np.asarray(a, dtype=DTYPE) * float(c)


def matvec(m, v) -> np.ndarray:
    m, v = np.asarray(m, dtype=DTYPE), np.asarray(v, dtype=DTYPE)
    if m.ndim != 2 or v.ndim != 1 or m.shape[1] != v.shape[0]:
        raise DimensionError(f"matvec: shape mismatch {m.shape} vs {v.shape}")
    return m @ v


def identity(n: int) -> np.ndarray:
    return np.eye(n, dtype=DTYPE)


def rows(m, start: int, stop: int) -> np.ndarray:
    m = np.asarray(m, dtype=DTYPE)
    if m.ndim != 2 or not 0 <= start <= stop <= m.shape[0]:
        raise DimensionError(f"rows: cannot take [{start}:{stop}] of shape {m.shape}")
    return m[start:stop]


# -- data containers ---------------------------------------------------------

@dataclass(frozen=True)
class Series:
    """One multivariate time series (T x D) with an optional class label."""

    values: np.ndarray
    label: Optional[int] = None
    id: Optional[str] = None

    def __post_init__(self):
        arr = _as_finite(self.values, "Series.values")
        if arr.ndim == 1:
            arr = arr[:, None]
        if arr.ndim != 2 or arr.shape[0] < 1 or arr.shape[1] < 1:
            raise DimensionError(f"Series.values must be T x D with T, D >= 1, got {arr.shape}")
        arr = np.ascontiguousarray(arr)
        arr.flags.writeable = False
        object.__setattr__(self, "values", arr)
        if self.label is not None:
            if int(self.label) != self.label or self.label < 0:
                raise DomainError(f"label must be a nonnegative int, got {self.label!r}")
            object.__setattr__(self, "label", int(self.label))

    @property
    def length(self) -> int:
        return self.values.shape[0]

    @property
    def dim(self) -> int:
        return self.values.shape[1]


@dataclass(frozen=True)
class Dataset:
    items: tuple
    num_classes: int
    feature_dim: int
    fixed_length: Optional[int] = None

    def __post_init__(self):
        object.__setattr__(self, "items", tuple(self.items))
        for s in self.items:
            if s.dim != self.feature_dim:
                raise DimensionError(
                    f"series {s.id!r} has feature dim {s.dim}, dataset expects {self.feature_dim}")
            if self.fixed_length is not None and s.length != self.fixed_length:
                raise DimensionError(
                    f"series {s.id!r} has length {s.length}, dataset fixed length is {self.fixed_length}")
            if s.label is not None and s.label >= self.num_classes:
                raise DomainError(f"label {s.label} out of range for K={self.num_classes}")

    def __len__(self):
        return len(self.items)

    def __iter__(self):
        return iter(self.items)

    @property
    def labels(self) -> np.ndarray:
        return np.array([s.label for s in self.items], dtype=np.int64)

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.num_classes)

    def check_training(self):
        """Every class must be represented in a training set."""
        missing = np.flatnonzero(self.class_counts() == 0)
        if missing.size:
            raise DomainError(f"training set has no samples of classes {missing.tolist()}")

    def to_array(self) -> np.ndarray:
        """Stack into (N, L, D); requires a fixed length."""
        if self.fixed_length is None:
            raise DimensionError("dataset has variable lengths; resample first")
        if not self.items:
            return np.zeros((0, self.fixed_length, self.feature_dim), dtype=DTYPE)
        return np.stack([s.values for s in self.items])

    def subset(self, indices: Sequence[int]) -> "Dataset":
        return Dataset([self.items[i] for i in indices], self.num_classes,
                       self.feature_dim, self.fixed_length)


# -- randomness -------------------------------------------------------------

STREAMS = {"init": 0, "shuffle": 1, "synth": 2, "split": 3}


@dataclass
class Rng:
    """Seeded PCG64 generators, one independent substream per purpose.

    Substream ``name`` is ``PCG64(SeedSequence(seed, spawn_key=(STREAMS[name],)))``,
    so draws from one purpose never shift another purpose's stream.
    """

    seed: int
    _gens: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        if not 0 <= int(self.seed) < 2 ** 64:
            raise DomainError(f"seed must be a 64-bit unsigned integer, got {self.seed}")
        self.seed = int(self.seed)

    def stream(self, name: str) -> np.random.Generator:
        if name not in STREAMS:
            raise KeyError(f"unknown rng stream {name!r}; known: {sorted(STREAMS)}")
        if name not in self._gens:
            ss = np.random.SeedSequence(self.seed, spawn_key=(STREAMS[name],))
            self._gens[name] = np.random.Generator(np.random.PCG64(ss))
        return self._gens[name]

    def get_state(self) -> dict:
        return {name: gen.bit_generator.state for name, gen in self._gens.items()}

    def set_state(self, state: dict):
        for name, st in state.items():
            self.stream(name).bit_generator.state = st
