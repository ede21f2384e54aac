"""Sliding-window inverse Fisher products via scalar coefficient recursions.

The sketch keeps the gradient buffer ``G`` together with three ``m x m``
matrices:

* ``GGT``, the Gram matrix of the buffered gradients;
* ``D`` (upper triangular), ``D[i, j] = g_i^T F_{i-1}^{-1} g_j`` for ``i <= j``;
* ``B`` (lower triangular), the coefficients of ``F_{i-1}^{-1} g_i`` in the
  basis of the gradients, ``B[i, i] = 1 / lam``.

An inverse-Hessian-vector product is then ``x / lam - (q^T B) G`` where ``q``
solves a triangular system in ``D``, so only two ``m x d`` products touch the
full dimension. Replacing slot ``k`` refreshes one row/column of ``GGT`` and
the parts of ``D`` and ``B`` that depend on it.
"""

from __future__ import annotations

from dataclasses import dataclass

import numba
import numpy as np
import scipy.linalg

from .core import FisherConfig, NumericalError, as_rows, check_finite, coerce_vector
from . import fileio

WARMUP_MODES = ("passthrough", "partial")
DENOM_TOL = 1e-12


def _check_denominators(diag, scale, where):
    bad = np.flatnonzero(~np.isfinite(diag) | (scale + diag <= scale * (1 - DENOM_TOL)))
    if bad.size:
        i = int(bad[0])
        raise NumericalError(
            f"denominator m + D[{i},{i}] = {scale + diag[i]!r} fell below m = {scale} ({where})")


def coefficients_d(ggt: np.ndarray, lam: float, scale: float) -> np.ndarray:
    """Upper-triangular ``D`` from the Gram matrix by the trailing-update sweep."""
    n = ggt.shape[0]
    D = ggt / lam
    for i in range(1, n):
        row = D[i - 1, i:]
        denom = scale + D[i - 1, i - 1]
        D[i:, i:] -= row[:, None] * row / denom
        if not np.all(np.isfinite(D[i:, i:])):
            raise NumericalError(f"non-finite value in D during sweep step {i}")
    D = np.triu(D)
    _check_denominators(np.diag(D), scale, "setup")
    return D


def coefficients_b(D: np.ndarray, lam: float, scale: float, start: int = 0,
                   B: np.ndarray | None = None) -> np.ndarray:
    """Lower-triangular ``B`` rows ``start..n-1`` (rows above ``start`` are reused)."""
    n = D.shape[0]
    if B is None:
        B = np.zeros_like(D)
    denom = scale + np.diag(D)
    for i in range(start, n):
        B[i, :] = 0.0
        if i:
            coef = -D[:i, i] / denom[:i]
            B[i, :i] = coef @ B[:i, :i]
        B[i, i] = 1.0 / lam
    if not np.all(np.isfinite(B)):
        raise NumericalError("non-finite value in B")
    return B


def _refresh_d_columns_reference(D: np.ndarray, ggt: np.ndarray, lam: float, scale: float, k: int):
    """Vectorized sweep over columns ``j >= k``; kept as the reference for the kernel."""
    n = D.shape[0]
    W = ggt[:, k:] / lam
    for i in range(n):
        # row i of W is final for columns >= max(i, k)
        c0 = max(i - k, 0)
        denom = scale + (D[i, i] if i < k else W[i, i - k])
        if not np.isfinite(denom) or denom <= scale * (1 - DENOM_TOL):
            raise NumericalError(f"denominator m + D[{i},{i}] = {denom!r} fell below m = {scale} (replacement)")
        if i + 1 < n:
            left = np.concatenate([D[i, i + 1:k], W[i, max(i + 1 - k, 0):]]) if i + 1 < k \
                else W[i, i + 1 - k:]
            W[i + 1:, c0:] -= left[:, None] * W[i, c0:] / denom
    D[:, k:] = np.triu(W, k=-k)


@numba.njit(cache=True)
def _sweep_upper(D, W, k, scale, tol):
    # Same update sequence as the reference sweep, restricted to the entries
    # that survive the final triu. Returns (-1, 0) or (bad index, denominator).
    n = D.shape[0]
    for i in range(n):
        denom = scale + (D[i, i] if i < k else W[i, i - k])
        if not np.isfinite(denom) or denom <= scale * (1 - tol):
            return i, denom
        for r in range(i + 1, n):
            left = D[i, r] if r < k else W[i, r - k]
            for c in range(max(r, k), n):
                W[r, c - k] -= left * W[i, c - k] / denom
    return -1, 0.0


def _refresh_d_columns(D: np.ndarray, ggt: np.ndarray, lam: float, scale: float, k: int):
    """Recompute columns ``j >= k`` of ``D`` in place; columns ``< k`` are still valid."""
    W = np.ascontiguousarray(ggt[:, k:] / lam)
    bad, denom = _sweep_upper(D, W, k, float(scale), DENOM_TOL)
    if bad >= 0:
        raise NumericalError(f"denominator m + D[{bad},{bad}] = {denom!r} fell below m = {scale} (replacement)")
    D[:, k:] = np.triu(W, k=-k)


@dataclass
class DynamicSketch:
    """Mutable sliding-window state; see the module docstring for the fields.

    Slots are filled in order and then overwritten cyclically (FIFO). Before
    the window is full, ``warmup="passthrough"`` answers products with
    ``x / lam`` while ``warmup="partial"`` uses the occupied slots with
    ``t = filled`` in place of ``m``.
    """

    cfg: FisherConfig
    G: np.ndarray
    GGT: np.ndarray
    D: np.ndarray
    B: np.ndarray
    filled: int = 0
    next_slot: int = 0
    warmup: str = "passthrough"

    @classmethod
    def empty(cls, cfg: FisherConfig, warmup: str = "passthrough") -> "DynamicSketch":
        if warmup not in WARMUP_MODES:
            raise ValueError(f"warmup must be one of {WARMUP_MODES}, got {warmup!r}")
        m, d, dt = cfg.m, cfg.dim, cfg.np_dtype
        return cls(cfg, np.zeros((m, d), dt), np.zeros((m, m), dt),
                   np.zeros((m, m), dt), np.eye(m, dtype=dt) / cfg.lam, 0, 0, warmup)

    @property
    def m(self):
        return self.cfg.m

    @property
    def d(self):
        return self.G.shape[1]

    @property
    def full(self):
        return self.filled == self.m

    def _active(self):
        """Occupied prefix length and the denominator scale in use."""
        if self.full:
            return self.m, float(self.m)
        return self.filled, float(self.filled)

    def _rebuild(self):
        n, scale = self._active()
        if n == 0:
            return
        if not self.full and self.warmup == "passthrough":
            return
        D = coefficients_d(self.GGT[:n, :n].copy(), self.cfg.lam, scale)
        self.D[:] = 0.0
        self.D[:n, :n] = D
        self.B[:] = np.eye(self.m, dtype=self.B.dtype) / self.cfg.lam
        self.B[:n, :n] = coefficients_b(D, self.cfg.lam, scale)

    def replace(self, k: int, g_new) -> np.ndarray:
        """Overwrite slot ``k``; returns ``p = G g_new`` (after the write)."""
        if not 0 <= k < self.m:
            raise IndexError(f"slot {k} out of range [0, {self.m})")
        if k > self.filled:
            raise IndexError(f"slot {k} would leave a gap; only {self.filled} slots are filled")
        g_new = coerce_vector(g_new, self.d, self.G.dtype, "gradient")
        check_finite(g_new, "gradient")
        was_full = self.full
        self.G[k] = g_new
        p = self.G @ g_new
        self.GGT[k, :] = p
        self.GGT[:, k] = p
        if k == self.filled:
            self.filled += 1
        if self.full and was_full:
            lam, scale = self.cfg.lam, float(self.m)
            _refresh_d_columns(self.D, self.GGT, lam, scale, k)
            coefficients_b(self.D, lam, scale, start=k, B=self.B)
        else:
            self._rebuild()
        return p

    def push(self, g) -> int:
        """FIFO insert; returns the slot that was written."""
        slot = self.next_slot
        self.replace(slot, g)
        self.next_slot = (slot + 1) % self.m
        return slot

    def ihvp(self, x) -> np.ndarray:
        x = coerce_vector(x, self.d, self.G.dtype)
        return self._ihvp_from(x, self.G @ x)

    def _solve_q(self, p, n, scale):
        # forward sweep q_j = (p_j / lam - sum_{i<j} D_ij q_i) / (scale + D_jj)
        U = self.D[:n, :n] + scale * np.eye(n, dtype=self.D.dtype)
        return scipy.linalg.solve_triangular(U, p[:n] / self.cfg.lam, trans="T", lower=False,
                                             check_finite=False)

    def _ihvp_from(self, x, p):
        if self.filled == 0:
            raise ValueError("dynamic sketch is empty")
        lam = self.cfg.lam
        if not self.full and self.warmup == "passthrough":
            return x / lam
        n, scale = self._active()
        q = self._solve_q(p, n, scale)
        return x / lam - (q @ self.B[:n, :n]) @ self.G[:n]

    def update_and_ihvp(self, g) -> np.ndarray:
        """Push ``g`` into the window and return ``F^{-1} g`` for the new window.

        The product ``G g`` is computed once and serves both the Gram refresh
        and the coefficient solve, so the result is bit-identical to
        :meth:`push` followed by :meth:`ihvp`.
        """
        g = coerce_vector(g, self.d, self.G.dtype, "gradient")
        slot = self.next_slot
        p = self.replace(slot, g)
        self.next_slot = (slot + 1) % self.m
        return self._ihvp_from(g, p)

    def state(self):
        return self.filled, self.next_slot, self.m

    def to_sections(self) -> dict:
        meta = np.array([self.cfg.lam, self.m, self.filled, self.next_slot,
                         WARMUP_MODES.index(self.warmup)], dtype=np.float64)
        return {"kind:dy": np.zeros(0), "meta": meta, "G": self.G, "GGT": self.GGT,
                "D": self.D, "B": self.B}

    def save(self, path):
        fileio.save_container(path, self.to_sections())

    @classmethod
    def load(cls, path) -> "DynamicSketch":
        sec = fileio.load_container(path)
        try:
            lam, m, filled, next_slot, mode = sec["meta"].ravel()
            G = sec["G"]
        except (KeyError, ValueError) as exc:
            raise fileio.FormatError(f"not a dynamic sketch checkpoint: {exc}") from None
        cfg = FisherConfig(m=int(m), lam=float(lam), dim=G.shape[1],
                           dtype="f32" if G.dtype == np.float32 else "f64")
        return cls(cfg, G.copy(), sec["GGT"].copy(), sec["D"].copy(), sec["B"].copy(),
                   int(filled), int(next_slot), WARMUP_MODES[int(mode)])


def dynamic_setup(G, cfg: FisherConfig, warmup: str = "passthrough") -> DynamicSketch:
    """Build a sketch from up to ``m`` gradients (slot ``i`` holds row ``i``)."""
    rows = as_rows(G, cfg.np_dtype)
    n = rows.shape[0]
    if n > cfg.m:
        raise ValueError(f"{n} gradients exceed the window length m = {cfg.m}")
    if rows.shape[1] != cfg.dim:
        raise ValueError(f"gradient width {rows.shape[1]} does not match dim {cfg.dim}")
    check_finite(rows, "gradient")
    S = DynamicSketch.empty(cfg, warmup)
    S.G[:n] = rows
    S.GGT[:n, :n] = rows @ rows.T
    S.filled = n
    S.next_slot = n % cfg.m
    S._rebuild()
    return S


def replace_gradient(S: DynamicSketch, k: int, g_new) -> DynamicSketch:
    S.replace(k, g_new)
    return S


def dynamic_ihvp(S: DynamicSketch, x) -> np.ndarray:
    return S.ihvp(x)


def update_and_ihvp(S: DynamicSketch, g):
    return S, S.update_and_ihvp(g)


def window_state(S: DynamicSketch):
    return S.state()


def explicit_coefficients(S: DynamicSketch, V: np.ndarray, x) -> np.ndarray:
    """Coefficients ``c_j`` of ``F^{-1} x = x/lam - sum_j c_j g_j`` by explicit sums.

    ``V`` holds rows ``v_k = F_{k-1}^{-1} g_k`` from an independent static
    setup on the same buffer, so ``g_k^T F_{k-1}^{-1} x = v_k . x``. Each
    ``c_j = sum_{k >= j} (v_k . x) / (m + D_kk) * B_kj`` is accumulated in a
    scalar loop.
    """
    n, scale = S._active()
    x = np.asarray(x, dtype=np.float64)
    frac = [float(V[k] @ x) / (scale + S.D[k, k]) for k in range(n)]
    c = np.zeros(n)
    for j in range(n):
        total = 0.0
        for k in range(j, n):
            total += frac[k] * S.B[k, j]
        c[j] = total
    return c


def vectorized_coefficients(S: DynamicSketch, x) -> np.ndarray:
    """``q^T B`` with ``q`` from the triangular sweep (the path ``ihvp`` uses)."""
    n, scale = S._active()
    x = np.asarray(x, dtype=S.G.dtype)
    q = S._solve_q(S.G @ x, n, scale)
    return q @ S.B[:n, :n]
