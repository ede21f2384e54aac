"""Second-order pruning on top of inverse Fisher queries.

Weights are ranked by ``theta_i^2 / (2 [F^{-1}]_ii)``. Three update modes are
offered once a set ``Q`` is chosen:

``obd_no_update``
    zero ``theta_Q`` and leave the rest alone;
``obs_simultaneous``
    sum the single-weight OBS corrections for every ``i`` in ``Q`` and apply
    them with one inverse-Hessian-vector product;
``obs_linear_solve``
    solve ``[F^{-1}]_{QQ} c = theta_Q`` so the update is the exact minimiser
    of ``1/2 dθ^T F dθ`` subject to ``dθ_Q = -theta_Q``.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass
from typing import Callable

import numpy as np
import scipy.linalg

from .core import FisherConfig, coerce_vector, parse_indices
from .static import build_sketch

MODES = ("obd_no_update", "obs_simultaneous", "obs_linear_solve")
MODE_ALIASES = {"obd": "obd_no_update", "obs": "obs_simultaneous", "obs-solve": "obs_linear_solve"}
MAX_SOLVE = 4096
SYMMETRY_TOL = 1e-10


@dataclass
class PruneDecision:
    pruned: np.ndarray
    saliencies: np.ndarray
    delta: np.ndarray
    mode: str

    def report_rows(self, theta_before):
        theta_before = np.asarray(theta_before)
        in_q = np.zeros(theta_before.size, dtype=bool)
        in_q[self.pruned] = True
        after = theta_before + self.delta
        after[self.pruned] = 0.0
        for i in range(theta_before.size):
            yield (i, theta_before[i], self.saliencies[i], int(in_q[i]), self.delta[i], after[i])

    def to_csv(self, theta_before) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["index", "theta_before", "saliency", "in_Q", "delta", "theta_after"])
        for i, tb, rho, q, dl, ta in self.report_rows(theta_before):
            # adding 0.0 folds -0.0 into 0.0
            writer.writerow([i, repr(float(tb) + 0.0), repr(float(rho) + 0.0), q,
                             repr(float(dl) + 0.0), repr(float(ta) + 0.0)])
        return buf.getvalue()


@dataclass(frozen=True)
class SparsitySchedule:
    """Polynomial sparsity ramp ``s_t = s_f + (s_0 - s_f) (1 - t/n)^p``."""

    initial: float
    target: float
    steps: int
    exponent: float = 3.0

    def __post_init__(self):
        if not (0 <= self.initial <= self.target < 1):
            raise ValueError("sparsities must satisfy 0 <= initial <= target < 1")
        if self.steps < 1:
            raise ValueError("schedule needs at least one step")

    def at(self, step: int) -> float:
        frac = min(max(step, 0), self.steps) / self.steps
        return self.target + (self.initial - self.target) * (1 - frac) ** self.exponent

    def targets(self):
        return [self.at(t) for t in range(1, self.steps + 1)]


def saliency(theta, diag_inv) -> np.ndarray:
    theta = np.asarray(theta, dtype=np.float64)
    diag_inv = np.asarray(diag_inv, dtype=np.float64)
    if theta.shape != diag_inv.shape:
        raise ValueError("theta and inverse diagonal must have the same shape")
    if np.any(~(diag_inv > 0)):
        i = int(np.flatnonzero(~(diag_inv > 0))[0])
        raise ValueError(f"inverse diagonal must be positive; entry {i} is {diag_inv[i]!r}")
    return theta ** 2 / (2.0 * diag_inv)


def select_prune(theta, sketch, count: int, frozen=()) -> np.ndarray:
    """Indices of the ``count`` lowest-saliency unfrozen weights, ties by index."""
    rho = saliency(theta, sketch.diag())
    return _select(rho, count, frozen)


def _select(rho, count, frozen):
    d = rho.size
    frozen = parse_indices(list(frozen), d)
    available = d - np.unique(frozen).size
    if count < 0 or count > available:
        raise ValueError(f"cannot prune {count} weights; only {available} are not frozen")
    mask = np.ones(d, dtype=bool)
    mask[frozen] = False
    candidates = np.flatnonzero(mask)
    order = np.argsort(rho[candidates], kind="stable")
    return np.sort(candidates[order[:count]])


def obs_update_simultaneous(theta, sketch, Q) -> np.ndarray:
    theta = coerce_vector(theta, sketch.d, what="theta")
    Q = parse_indices(Q, sketch.d)
    if Q.size == 0:
        raise ValueError("pruned set is empty")
    diag = sketch.diag()[Q]
    if np.any(~(diag > 0)):
        raise ValueError("inverse diagonal must be positive on the pruned set")
    w = np.zeros(sketch.d)
    w[Q] = theta[Q] / diag
    delta = -sketch.ihvp(w)
    delta[Q] = -theta[Q]
    return delta


def obs_update_linear_solve(theta, sketch, Q, fixed=()) -> np.ndarray:
    """Exact correlated OBS update.

    ``fixed`` lists coordinates that are already zero and must stay zero; they
    join the constraint set with target value 0.
    """
    theta = coerce_vector(theta, sketch.d, what="theta")
    Q = parse_indices(Q, sketch.d)
    S = np.union1d(Q, parse_indices(list(fixed), sketch.d))
    if Q.size == 0:
        raise ValueError("pruned set is empty")
    if S.size > MAX_SOLVE:
        raise ValueError(f"linear-solve update limited to {MAX_SOLVE} constrained weights, got {S.size}")
    sub = sketch.submatrix(S)
    asym = np.abs(sub - sub.T).max()
    if asym > SYMMETRY_TOL * max(1.0, np.abs(sub).max()):
        raise ValueError(f"inverse submatrix is not symmetric (max deviation {asym:.3g})")
    target = theta[S].copy()
    target[~np.isin(S, Q)] = 0.0
    try:
        c = scipy.linalg.cho_solve(scipy.linalg.cho_factor(0.5 * (sub + sub.T)), target)
    except np.linalg.LinAlgError as exc:
        raise ValueError(f"inverse submatrix on the pruned set is singular: {exc}") from None
    w = np.zeros(sketch.d)
    w[S] = c
    delta = -sketch.ihvp(w)
    delta[S] = -theta[S]
    return delta


def obd_update(theta, Q) -> np.ndarray:
    theta = np.asarray(theta, dtype=np.float64)
    delta = np.zeros_like(theta)
    Q = parse_indices(Q, theta.size)
    delta[Q] = -theta[Q]
    return delta


def apply_update(theta, sketch, Q, mode, fixed=()) -> np.ndarray:
    mode = MODE_ALIASES.get(mode, mode)
    if mode == "obd_no_update":
        return obd_update(theta, Q)
    if mode == "obs_simultaneous":
        return obs_update_simultaneous(theta, sketch, Q)
    if mode == "obs_linear_solve":
        return obs_update_linear_solve(theta, sketch, Q, fixed)
    raise ValueError(f"unknown mode {mode!r}; expected one of {MODES}")


def quadratic_increase(G, lam: float, m: int, delta) -> float:
    """``1/2 delta^T (lam I + G^T G / m) delta`` without forming the matrix."""
    G = np.asarray(G, dtype=np.float64)
    delta = np.asarray(delta, dtype=np.float64)
    Gd = G @ delta
    return 0.5 * (lam * delta @ delta + Gd @ Gd / m)


def prune_step(theta, provider: Callable, cfg: FisherConfig, target_count: int,
               mode: str = "obs_simultaneous", recompute: int = 1, frozen=()):
    """Prune ``target_count`` more weights in ``recompute`` equal sub-steps.

    ``provider(theta)`` returns the gradient rows at ``theta``; the sketch is
    rebuilt from them before every sub-step. Already-pruned coordinates stay
    at zero.

    Returns the new weights and a :class:`PruneDecision` covering all
    sub-steps (saliencies are those of the first sub-step).
    """
    mode = MODE_ALIASES.get(mode, mode)
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}; expected one of {MODES}")
    if recompute < 1:
        raise ValueError("recompute must be at least 1")
    theta = np.array(theta, dtype=np.float64)
    start = theta.copy()
    frozen = set(int(i) for i in parse_indices(list(frozen), theta.size))
    pruned = []
    first_rho = None
    sizes = [target_count // recompute + (1 if s < target_count % recompute else 0)
             for s in range(recompute)]
    for size in sizes:
        if size == 0:
            continue
        try:
            G = provider(theta)
        except Exception as exc:
            raise RuntimeError(f"gradient provider failed: {exc}") from exc
        sketch = build_sketch(G, cfg)
        rho = saliency(theta, sketch.diag())
        if first_rho is None:
            first_rho = rho
        Q = _select(rho, size, sorted(frozen))
        delta = apply_update(theta, sketch, Q, mode, fixed=sorted(frozen))
        theta = theta + delta
        theta[Q] = 0.0
        if frozen:
            theta[sorted(frozen)] = 0.0
        frozen.update(int(i) for i in Q)
        pruned.extend(int(i) for i in Q)
    if first_rho is None:
        first_rho = np.zeros_like(theta)
    decision = PruneDecision(np.array(sorted(pruned), dtype=np.int64), first_rho,
                             theta - start, mode)
    return theta, decision


def sparsity_count(d: int, sparsity: float) -> int:
    if not (0 <= sparsity < 1) or math.isnan(sparsity):
        raise ValueError(f"sparsity must lie in [0, 1), got {sparsity}")
    return int(round(sparsity * d))
