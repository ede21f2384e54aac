"""Wall-time measurements over size grids and log-log slope fits."""

from __future__ import annotations

import csv
import io
import time
from dataclasses import dataclass, field

import numpy as np

from .core import FisherConfig, synthetic_gradients
from .dynamic import dynamic_setup
from .static import static_setup

# each timed sample loops the call until this much time has passed
MIN_SAMPLE_SECONDS = 2e-3


def time_call(fn, repeats: int = 5, warmup: int = 2) -> list[float]:
    """Per-call seconds for ``repeats`` samples after ``warmup`` untimed calls."""
    for _ in range(warmup):
        fn()
    loops = 1
    while True:
        t0 = time.perf_counter()
        for _ in range(loops):
            fn()
        elapsed = time.perf_counter() - t0
        if elapsed >= MIN_SAMPLE_SECONDS or loops >= 1 << 16:
            break
        loops *= 2
    samples = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        for _ in range(loops):
            fn()
        samples.append((time.perf_counter() - t0) / loops)
    return samples


def loglog_slope(sizes, times) -> float | None:
    sizes = np.asarray(sizes, dtype=np.float64)
    if np.unique(sizes).size < 2:
        return None
    slope, _ = np.polyfit(np.log(sizes), np.log(np.asarray(times, dtype=np.float64)), 1)
    return float(slope)


@dataclass
class BenchResult:
    op: str
    axis: str
    samples: list = field(default_factory=list)  # (d, m, seconds)

    def medians(self):
        keys = sorted({(d, m) for d, m, _ in self.samples})
        return [(d, m, float(np.median([s for dd, mm, s in self.samples if (dd, mm) == (d, m)])))
                for d, m in keys]

    def slope(self):
        med = self.medians()
        xs = [d if self.axis == "d" else m for d, m, _ in med]
        return loglog_slope(xs, [t for _, _, t in med])


def bench_static_ihvp(ds, m, lam=1e-5, seed=0, repeats=5, warmup=2):
    res = BenchResult("static_ihvp", "d")
    rng = np.random.default_rng(seed)
    for d in ds:
        S = static_setup(synthetic_gradients(m, d, seed), FisherConfig(m=m, lam=lam, dim=d))
        x = rng.standard_normal(d)
        res.samples += [(d, m, s) for s in time_call(lambda: S.ihvp(x), repeats, warmup)]
    return res


def bench_static_setup(ds, m, lam=1e-5, seed=0, repeats=5, warmup=2):
    res = BenchResult("static_setup", "d")
    for d in ds:
        G = synthetic_gradients(m, d, seed)
        cfg = FisherConfig(m=m, lam=lam, dim=d)
        res.samples += [(d, m, s) for s in time_call(lambda: static_setup(G, cfg), repeats, warmup)]
    return res


def bench_dynamic_ihvp(ds, m, lam=1e-5, seed=0, repeats=5, warmup=2):
    res = BenchResult("dynamic_ihvp", "d")
    rng = np.random.default_rng(seed)
    for d in ds:
        S = dynamic_setup(synthetic_gradients(m, d, seed), FisherConfig(m=m, lam=lam, dim=d))
        x = rng.standard_normal(d)
        res.samples += [(d, m, s) for s in time_call(lambda: S.ihvp(x), repeats, warmup)]
    return res


def bench_update_and_ihvp(ds, m, lam=1e-5, seed=0, repeats=5, warmup=2):
    res = BenchResult("update_and_ihvp", "d")
    for d in ds:
        S = dynamic_setup(synthetic_gradients(m, d, seed), FisherConfig(m=m, lam=lam, dim=d))
        stream = synthetic_gradients(8, d, seed + 1)
        counter = iter(range(1 << 30))
        res.samples += [(d, m, s) for s in time_call(
            lambda: S.update_and_ihvp(stream[next(counter) % 8]), repeats, warmup)]
    return res


def bench_dynamic_replace(ms, d, lam=1e-5, seed=0, repeats=5, warmup=2, slot=0):
    """Replacement of ``slot`` (0 is the worst case: every column is refreshed)."""
    res = BenchResult("dynamic_replace", "m")
    for m in ms:
        S = dynamic_setup(synthetic_gradients(m, d, seed), FisherConfig(m=m, lam=lam, dim=d))
        stream = synthetic_gradients(8, d, seed + 1)
        counter = iter(range(1 << 30))
        res.samples += [(d, m, s) for s in time_call(
            lambda: S.replace(slot, stream[next(counter) % 8]), repeats, warmup)]
    return res


def bench_dynamic_setup(ms, d, lam=1e-5, seed=0, repeats=5, warmup=2):
    res = BenchResult("dynamic_setup", "m")
    for m in ms:
        G = synthetic_gradients(m, d, seed)
        cfg = FisherConfig(m=m, lam=lam, dim=d)
        res.samples += [(d, m, s) for s in time_call(lambda: dynamic_setup(G, cfg), repeats, warmup)]
    return res


def results_csv(results) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["kind", "op", "d", "m", "rep", "seconds"])
    for res in results:
        counts = {}
        for d, m, s in res.samples:
            rep = counts.get((d, m), 0)
            counts[(d, m)] = rep + 1
            writer.writerow(["sample", res.op, d, m, rep, repr(s)])
        for d, m, t in res.medians():
            writer.writerow(["median", res.op, d, m, "", repr(t)])
        slope = res.slope()
        if slope is not None:
            writer.writerow([f"slope_{res.axis}", res.op, "", "", "", repr(slope)])
    return buf.getvalue()
