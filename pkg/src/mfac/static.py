"""Inverse Fisher queries over a fixed set of gradients.

Setup turns the gradient rows into ``v_i = F_{i-1}^{-1} g_i`` together with
the denominators ``q_i = m + g_i . v_i``. Afterwards

    F^{-1} x = x / lam - V^T ((V x) / q)

costs two ``m x d`` products, and any single entry of the inverse is a sum of
``m`` scalars.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .core import (BlockLayout, FisherConfig, NumericalError, as_rows, check_finite,
                   coerce_vector, parse_indices)
from . import fileio

# q_i >= m holds exactly (q_i = m only for a zero gradient); anything
# noticeably below m means the recursion lost positive-definiteness.
Q_TOL = 1e-12


def check_denominators(q, m, offset=0):
    q = np.atleast_1d(np.asarray(q))
    bad = np.flatnonzero(~np.isfinite(q) | (q < m * (1 - Q_TOL)))
    if bad.size:
        i = int(bad[0])
        raise NumericalError(
            f"q-positivity violated at index {i + offset}: q = {float(q[i])!r} is below m = {m} "
            "(inverse is no longer positive definite)")


@dataclass
class StaticSketch:
    V: np.ndarray
    q: np.ndarray
    cfg: FisherConfig

    @property
    def m(self):
        return self.V.shape[0]

    @property
    def d(self):
        return self.V.shape[1]

    def ihvp(self, x) -> np.ndarray:
        x = coerce_vector(x, self.d, self.V.dtype)
        return x / self.cfg.lam - self.V.T @ ((self.V @ x) / self.q)

    def element(self, i: int, j: int) -> float:
        d = self.d
        if not (0 <= i < d and 0 <= j < d):
            raise IndexError(f"element ({i}, {j}) out of range for d={d}")
        base = 1.0 / self.cfg.lam if i == j else 0.0
        return float(base - np.sum(self.V[:, i] * self.V[:, j] / self.q))

    def row_select(self, pi) -> np.ndarray:
        """``y_i = [F^{-1}]_{i, pi[i]}`` for every row at once."""
        pi = parse_indices(pi, self.d)
        if pi.size != self.d:
            raise ValueError(f"index map must have length {self.d}, got {pi.size}")
        on_diag = (pi == np.arange(self.d)).astype(self.V.dtype)
        acc = np.zeros(self.d, dtype=self.V.dtype)
        for v, qk in zip(self.V, self.q):
            acc += v * v[pi] / qk
        return on_diag / self.cfg.lam - acc

    def diag(self) -> np.ndarray:
        return self.row_select(np.arange(self.d))

    def submatrix(self, idx) -> np.ndarray:
        """Dense ``[F^{-1}]_{idx, idx}`` assembled from ``|idx|^2`` element reads."""
        idx = parse_indices(idx, self.d)
        Vq = self.V[:, idx]
        sub = -(Vq / self.q[:, None]).T @ Vq
        sub[np.diag_indices_from(sub)] += 1.0 / self.cfg.lam
        return sub

    def validate(self):
        if self.V.ndim != 2 or self.q.shape != (self.V.shape[0],):
            raise ValueError(f"sketch shapes V{self.V.shape} and q{self.q.shape} disagree")
        check_finite(self.V, "V entry")
        check_denominators(self.q, self.cfg.m)

    def to_sections(self) -> dict:
        meta = np.array([self.cfg.lam, self.cfg.m], dtype=np.float64)
        return {"kind:st": np.zeros(0), "meta": meta, "V": self.V, "q": self.q}

    def save(self, path):
        fileio.save_container(path, self.to_sections())

    @classmethod
    def load(cls, path, validate: bool = True) -> "StaticSketch":
        sec = fileio.load_container(path)
        try:
            lam, m = sec["meta"].ravel()
            V, q = sec["V"], sec["q"].ravel()
        except KeyError as exc:
            raise fileio.FormatError(f"static sketch file lacks section {exc}") from None
        cfg = FisherConfig(m=int(m), lam=float(lam), dim=V.shape[1],
                           dtype="f32" if V.dtype == np.float32 else "f64")
        sketch = cls(V, q, cfg)
        if validate:
            sketch.validate()
        return sketch


def fold_corrections(acc, comp, rows, q, g):
    """``acc += sum_k (rows_k . g / q_k) rows_k``, one row at a time, in order.

    A fixed left-to-right fold (rather than a BLAS product over all rows)
    makes the result independent of how the rows are grouped, so paged and
    in-memory setups agree bit for bit. ``comp`` carries the Kahan
    compensation so the rounding error does not grow with the row count;
    both arrays are updated in place.
    """
    for v, qk in zip(rows, q):
        y = (np.dot(v, g) / qk) * v - comp
        t = acc + y
        comp[:] = (t - acc) - y
        acc[:] = t
    return acc


def static_setup(G, cfg: FisherConfig, overwrite: bool = False) -> StaticSketch:
    """Precompute ``V`` and ``q`` in ``O(d m^2)``.

    With ``overwrite=True`` and a writable float array of the configured dtype,
    the gradient rows are replaced by ``V`` in place.
    """
    rows = as_rows(G, cfg.np_dtype)
    if overwrite and rows is G and rows.flags.writeable:
        V = rows
    else:
        V = rows.copy()
    m = V.shape[0]
    q = np.empty(m, dtype=V.dtype)
    lam = cfg.lam
    for i in range(m):
        g = V[i].copy()
        corr = fold_corrections(np.zeros_like(g), np.zeros_like(g), V[:i], q[:i], g)
        V[i] = g / lam - corr
        q[i] = cfg.m + V[i] @ g
        check_denominators(q[i], cfg.m, offset=i)
    check_finite(V, "V entry")
    return StaticSketch(V, q, cfg)


def static_ihvp(S: StaticSketch, x) -> np.ndarray:
    return S.ihvp(x)


def static_element(S: StaticSketch, i: int, j: int) -> float:
    return S.element(i, j)


def static_row_select(S: StaticSketch, pi) -> np.ndarray:
    return S.row_select(pi)


def static_diag(S: StaticSketch) -> np.ndarray:
    return S.diag()


def _threads() -> int:
    try:
        return max(1, int(os.environ.get("MFAC_THREADS", "1")))
    except ValueError:
        return 1


@dataclass
class BlockStaticSketch:
    """Independent static sketches over contiguous coordinate blocks.

    Entries of the inverse that couple two different blocks are exactly zero.
    """

    layout: BlockLayout
    blocks: list
    cfg: FisherConfig

    @property
    def d(self):
        return self.layout.dim

    def ihvp(self, x) -> np.ndarray:
        x = coerce_vector(x, self.d, self.cfg.np_dtype)
        out = np.empty_like(x)
        for sl, sk in zip(self.layout.slices(), self.blocks):
            out[sl] = sk.ihvp(x[sl])
        return out

    def diag(self) -> np.ndarray:
        return np.concatenate([sk.diag() for sk in self.blocks])

    def element(self, i: int, j: int) -> float:
        bi, bj = self.layout.block_of(i), self.layout.block_of(j)
        if bi != bj:
            return 0.0
        start = self.layout.bounds[bi][0]
        return self.blocks[bi].element(i - start, j - start)

    def row_select(self, pi) -> np.ndarray:
        pi = parse_indices(pi, self.d)
        if pi.size != self.d:
            raise ValueError(f"index map must have length {self.d}, got {pi.size}")
        return np.array([self.element(i, int(j)) for i, j in enumerate(pi)])

    def submatrix(self, idx) -> np.ndarray:
        idx = parse_indices(idx, self.d)
        owner = np.array([self.layout.block_of(int(i)) for i in idx])
        sub = np.zeros((idx.size, idx.size), dtype=self.cfg.np_dtype)
        for b in np.unique(owner):
            pos = np.flatnonzero(owner == b)
            start = self.layout.bounds[b][0]
            sub[np.ix_(pos, pos)] = self.blocks[b].submatrix(idx[pos] - start)
        return sub


def blockwise_setup(G, cfg: FisherConfig) -> BlockStaticSketch:
    rows = as_rows(G, cfg.np_dtype)
    layout = cfg.layout()
    if layout.dim != rows.shape[1]:
        raise ValueError(f"config dim {cfg.dim} does not match gradient width {rows.shape[1]}")

    def build(bounds):
        a, b = bounds
        return static_setup(rows[:, a:b], cfg.replace(dim=b - a, block_size="full"))

    workers = min(_threads(), len(layout))
    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            blocks = list(pool.map(build, layout.bounds))
    else:
        blocks = [build(bounds) for bounds in layout.bounds]
    return BlockStaticSketch(layout, blocks, cfg)


def blockwise_ihvp(S: BlockStaticSketch, x) -> np.ndarray:
    return S.ihvp(x)


def blockwise_diag(S: BlockStaticSketch) -> np.ndarray:
    return S.diag()


def blockwise_element(S: BlockStaticSketch, i: int, j: int) -> float:
    return S.element(i, j)


def build_sketch(G, cfg: FisherConfig):
    """Plain sketch for ``block_size="full"``, block-diagonal one otherwise."""
    if cfg.block_size == "full":
        return static_setup(G, cfg)
    return blockwise_setup(G, cfg)
