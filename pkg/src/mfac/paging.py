"""Static setup when ``V`` does not fit in fast memory.

The gradients are split into ``k`` contiguous pages that live in a slow
store. A small fast tier holds at most two pages plus one accumulation
buffer; the buffer keeps a compensation row next to each partial sum, so it
occupies two page-heights. Page ``i`` is finished by streaming its gradients against every
earlier ``V`` page (accumulating the partial corrections in the buffer) and
then completing the intra-page recursion with the buffer resident. This
needs ``O(k^2)`` page transfers.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .core import ConfigError, FisherConfig, as_rows, check_finite
from .static import StaticSketch, check_denominators, fold_corrections


@dataclass
class FastMemory:
    """Residency accounting for the fast tier, in rows of length ``d``."""

    capacity: int
    resident: dict = field(default_factory=dict)
    transfers: int = 0
    peak: int = 0

    def used(self):
        return sum(a.shape[0] for a in self.resident.values())

    def load(self, name, arr):
        rows = arr.shape[0] if arr.ndim == 2 else 1
        if self.used() + rows > self.capacity:
            raise MemoryError(
                f"fast tier over budget loading {name!r}: "
                f"{self.used()} + {rows} rows > {self.capacity}")
        self.resident[name] = np.array(arr, copy=True, ndmin=2)
        self.transfers += 1
        self.peak = max(self.peak, self.used())
        return self.resident[name]

    def evict(self, name):
        return self.resident.pop(name)


@dataclass
class PagedGradients:
    """Gradient rows held in a slow store and split into ``k`` pages."""

    store: np.ndarray
    k: int

    def __post_init__(self):
        m = self.store.shape[0]
        if self.k < 1 or self.k > m:
            raise ConfigError(f"page count {self.k} must lie in [1, {m}]")
        self.bounds = [(int(c[0]), int(c[-1]) + 1)
                       for c in np.array_split(np.arange(m), self.k)]

    @property
    def page_rows(self):
        return max(b - a for a, b in self.bounds)


def paged_static_setup(G, cfg: FisherConfig, k: int, budget_rows: int | None = None,
                       ) -> tuple[StaticSketch, FastMemory]:
    """Page-swapping variant of :func:`mfac.static.static_setup`.

    Parameters
    ----------
    k : int
        Number of pages the ``m`` gradients are split into.
    budget_rows : int, optional
        Fast-tier capacity in rows; defaults to two pages plus a buffer
        (``4 * page_rows``).

    Returns the sketch and the memory ledger (transfer count, peak usage).
    """
    rows = as_rows(G, cfg.np_dtype)
    pages = PagedGradients(rows.copy(), k)
    P = pages.page_rows
    if budget_rows is None:
        budget_rows = 4 * P
    if budget_rows < P:
        raise ConfigError(f"fast-memory budget of {budget_rows} rows is smaller than one page ({P} rows)")
    if budget_rows < 4 * P:
        raise ConfigError(f"fast-memory budget of {budget_rows} rows cannot hold two pages plus a buffer ({4 * P} rows)")

    store = pages.store
    m = store.shape[0]
    lam = cfg.lam
    q = np.empty(m, dtype=store.dtype)
    fast = FastMemory(budget_rows)

    for i, (a, b) in enumerate(pages.bounds):
        n = b - a
        # first n rows: partial sums, last n rows: their compensations
        buf = fast.load("buffer", np.zeros((2 * n, store.shape[1]), dtype=store.dtype))
        for p in range(i):
            pa, pb = pages.bounds[p]
            Vp = fast.load("V", store[pa:pb])
            qp = q[pa:pb]
            for j in range(n):
                g = fast.load("g", store[a + j])[0]
                fold_corrections(buf[j], buf[n + j], Vp, qp, g)
                fast.evict("g")
            fast.evict("V")
        page = fast.load("page", store[a:b])
        _finish_page(page, buf, q, a, lam, cfg.m)
        store[a:b] = fast.evict("page")
        fast.evict("buffer")
    check_finite(store, "V entry")
    return StaticSketch(store, q, cfg), fast


def _finish_page(page, buf, q, offset, lam, m):
    """Complete ``v`` rows of one page in place; ``buf`` holds earlier-page terms."""
    n = page.shape[0]
    for j in range(n):
        g = page[j].copy()
        corr = fold_corrections(buf[j], buf[n + j], page[:j], q[offset:offset + j], g)
        v = g / lam - corr
        page[j] = v
        q[offset + j] = m + v @ g
        check_denominators(q[offset + j], m, offset=offset + j)
