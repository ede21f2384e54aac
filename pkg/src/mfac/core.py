"""Shared types: configuration, gradient storage and coordinate blocking."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence, Union

import numpy as np

DTYPES = {"f32": np.float32, "f64": np.float64}

BlockSize = Union[int, str]


class ConfigError(ValueError):
    """Invalid configuration values or incompatible settings."""


class FormatError(ValueError):
    """A file or buffer does not follow the expected layout."""


class NumericalError(RuntimeError):
    """A recursion produced values that break positive-definiteness."""


@dataclass(frozen=True)
class FisherConfig:
    """Size and dampening of a Fisher approximation.

    Parameters
    ----------
    m : int
        Number of rank-one terms (the window length for the dynamic sketch).
    lam : float
        Dampening added to the diagonal, ``F = lam * I + G^T G / m``.
    dim : int
        Flattened parameter count ``d``.
    block_size : int or "full"
        Width of coordinate blocks for the block-diagonal variant.
    dtype : {"f32", "f64"}
    """

    m: int
    lam: float = 1e-5
    dim: int = 1
    block_size: BlockSize = "full"
    dtype: str = "f64"

    def __post_init__(self):
        if not isinstance(self.m, (int, np.integer)) or self.m < 1:
            raise ConfigError(f"m must be a positive integer, got {self.m!r}")
        if not isinstance(self.dim, (int, np.integer)) or self.dim < 1:
            raise ConfigError(f"dim must be a positive integer, got {self.dim!r}")
        if not (math.isfinite(self.lam) and self.lam > 0):
            raise ConfigError(f"lambda must be positive and finite, got {self.lam!r}")
        if self.dtype not in DTYPES:
            raise ConfigError(f"dtype must be one of {sorted(DTYPES)}, got {self.dtype!r}")
        bs = self.block_size
        if bs != "full":
            if not isinstance(bs, (int, np.integer)) or bs < 1 or bs > self.dim:
                raise ConfigError(f"block_size must be 'full' or in [1, {self.dim}], got {bs!r}")

    @property
    def np_dtype(self):
        return DTYPES[self.dtype]

    def replace(self, **changes) -> "FisherConfig":
        values = dict(m=self.m, lam=self.lam, dim=self.dim,
                      block_size=self.block_size, dtype=self.dtype)
        values.update(changes)
        return FisherConfig(**values)

    def layout(self) -> "BlockLayout":
        width = self.dim if self.block_size == "full" else int(self.block_size)
        return BlockLayout.uniform(self.dim, width)


@dataclass(frozen=True)
class GradientMatrix:
    """Row-major ``m x d`` stack of per-sample gradients.

    The array is made read-only on construction; sketches that consume
    gradients in place take their own copy unless told otherwise.
    """

    rows: np.ndarray
    provenance: tuple | None = None

    def __post_init__(self):
        rows = np.asarray(self.rows)
        if rows.ndim != 2:
            raise ValueError(f"gradients must be 2-D (m, d), got shape {rows.shape}")
        if rows.dtype not in (np.float32, np.float64):
            rows = rows.astype(np.float64)
        check_finite(rows, "gradient")
        if self.provenance is not None and len(self.provenance) != rows.shape[0]:
            raise ValueError("provenance must have one entry per gradient row")
        rows = rows.view()
        rows.flags.writeable = False
        object.__setattr__(self, "rows", rows)

    @property
    def m(self) -> int:
        return self.rows.shape[0]

    @property
    def d(self) -> int:
        return self.rows.shape[1]

    @property
    def dtype(self):
        return self.rows.dtype

    def astype(self, dtype) -> "GradientMatrix":
        return GradientMatrix(self.rows.astype(dtype), self.provenance)


@dataclass(frozen=True)
class BlockLayout:
    """Contiguous partition of ``[0, d)``; the last block may be short."""

    dim: int
    bounds: tuple = field(default_factory=tuple)

    @classmethod
    def uniform(cls, dim: int, width: int) -> "BlockLayout":
        if width < 1:
            raise ConfigError("block width must be positive")
        starts = range(0, dim, width)
        return cls(dim, tuple((s, min(s + width, dim)) for s in starts))

    def __post_init__(self):
        pos = 0
        for start, stop in self.bounds:
            if start != pos or stop <= start:
                raise ConfigError(f"blocks must be ordered, contiguous and non-empty: {self.bounds}")
            pos = stop
        if pos != self.dim:
            raise ConfigError(f"blocks cover [0, {pos}) but dim is {self.dim}")

    def __len__(self):
        return len(self.bounds)

    def __iter__(self):
        return iter(self.bounds)

    def slices(self):
        return [slice(a, b) for a, b in self.bounds]

    def block_of(self, index: int) -> int:
        """Index of the block containing coordinate ``index``."""
        if not 0 <= index < self.dim:
            raise IndexError(f"coordinate {index} out of range [0, {self.dim})")
        starts = [a for a, _ in self.bounds]
        return int(np.searchsorted(starts, index, side="right") - 1)


def check_finite(arr: np.ndarray, what: str = "value"):
    """Raise ``ValueError`` naming the first non-finite entry."""
    arr = np.asarray(arr)
    if arr.size and not np.all(np.isfinite(arr)):
        loc = tuple(int(i) for i in np.argwhere(~np.isfinite(arr))[0])
        if arr.ndim == 2:
            raise ValueError(f"non-finite {what} at row {loc[0]}, column {loc[1]}")
        raise ValueError(f"non-finite {what} at index {loc}")


def as_rows(G, dtype=None) -> np.ndarray:
    """Return the 2-D array behind a ``GradientMatrix`` or array-like."""
    rows = G.rows if isinstance(G, GradientMatrix) else np.asarray(G)
    if rows.ndim == 1:
        rows = rows[None, :]
    if rows.ndim != 2:
        raise ValueError(f"gradients must be 2-D, got shape {rows.shape}")
    if dtype is not None and rows.dtype != dtype:
        rows = rows.astype(dtype)
    elif rows.dtype not in (np.float32, np.float64):
        rows = rows.astype(np.float64)
    return rows


def batch_average_gradients(per_sample, batch: int) -> GradientMatrix:
    """Average consecutive groups of ``batch`` rows into single samples."""
    rows = as_rows(per_sample)
    if batch < 1:
        raise ValueError("batch must be positive")
    m, d = rows.shape
    if m % batch:
        raise ValueError(f"{m} gradients cannot be split into batches of {batch}")
    if batch == 1:
        return GradientMatrix(rows.copy())
    return GradientMatrix(rows.reshape(m // batch, batch, d).mean(axis=1))


def synthetic_gradients(m: int, d: int, seed: int = 0, *, rank: int | None = None,
                        dtype=np.float64) -> np.ndarray:
    """I.i.d. standard normal gradients scaled by ``1/sqrt(d)``.

    With ``rank`` set, rows are drawn from a ``rank``-dimensional subspace plus
    a small isotropic part, which makes ``G G^T`` badly conditioned.
    """
    rng = np.random.default_rng(seed)
    if rank is None:
        G = rng.standard_normal((m, d))
    else:
        basis = rng.standard_normal((rank, d))
        G = rng.standard_normal((m, rank)) @ basis / math.sqrt(rank)
        G += 1e-3 * rng.standard_normal((m, d))
    return (G / math.sqrt(d)).astype(dtype)


def coerce_vector(x, d: int, dtype=np.float64, what: str = "vector") -> np.ndarray:
    x = np.asarray(x, dtype=dtype)
    if x.shape != (d,):
        raise ValueError(f"{what} must have shape ({d},), got {x.shape}")
    return x


def parse_indices(values: Sequence[int], d: int) -> np.ndarray:
    idx = np.asarray(values, dtype=np.int64).ravel()
    if idx.size and (idx.min() < 0 or idx.max() >= d):
        raise IndexError(f"indices must lie in [0, {d})")
    return idx
