"""Dense reference inverses for checking the matrix-free code at small d.

Two independent constructions are provided: a Cholesky factorization of the
explicitly formed dampened Fisher, and ``m`` successive Sherman-Morrison
updates starting from ``I / lam``. Neither shares code with the sketches.
"""

from dataclasses import dataclass

import numpy as np
import scipy.linalg

from .core import FisherConfig, as_rows

MAX_DIM = 4096


@dataclass(frozen=True)
class DenseFisher:
    inverse: np.ndarray
    lam: float
    m: int

    @property
    def d(self):
        return self.inverse.shape[0]


def _guard(rows, cfg):
    d = rows.shape[1]
    if d > MAX_DIM:
        raise ValueError(f"dense oracle refuses d={d} > {MAX_DIM}; use the matrix-free sketches")
    return d


def dense_fisher(G, cfg: FisherConfig) -> np.ndarray:
    """``lam * I + G^T G / m`` as an explicit matrix."""
    rows = as_rows(G, np.float64)
    d = _guard(rows, cfg)
    return cfg.lam * np.eye(d) + rows.T @ rows / cfg.m


def dense_inverse_direct(G, cfg: FisherConfig) -> DenseFisher:
    F = dense_fisher(G, cfg)
    try:
        factor = scipy.linalg.cho_factor(F, lower=True)
    except np.linalg.LinAlgError as exc:
        raise RuntimeError(f"Cholesky of dampened Fisher failed: {exc}") from exc
    inv = scipy.linalg.cho_solve(factor, np.eye(F.shape[0]))
    return DenseFisher(0.5 * (inv + inv.T), cfg.lam, cfg.m)


def dense_inverse_woodbury(G, cfg: FisherConfig, extended: bool = True) -> DenseFisher:
    """Sherman-Morrison recursion from ``I / lam``.

    With ``extended`` the recursion runs in ``np.longdouble`` and is rounded to
    float64 once at the end, so the reference carries less rounding error than
    the float64 code it checks. On platforms where ``longdouble`` is plain
    double this is a no-op.
    """
    rows = as_rows(G, np.float64)
    d = _guard(rows, cfg)
    wide = np.longdouble if extended else np.float64
    rows = rows.astype(wide)
    inv = np.eye(d, dtype=wide) / wide(cfg.lam)
    m = wide(cfg.m)
    for g in rows:
        u = inv @ g
        inv -= np.outer(u, u / (m + g @ u))
    return DenseFisher(inv.astype(np.float64), cfg.lam, cfg.m)


def dense_ihvp(F: DenseFisher, x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (F.d,):
        raise ValueError(f"vector of shape {x.shape} does not match dimension {F.d}")
    return F.inverse @ x
