import csv
import io

import numpy as np
import pytest

from mfac import bench


class TestSlope:
    def test_exact_power_law(self):
        x = np.array([8, 16, 32, 64])
        assert bench.loglog_slope(x, 3.0 * x ** 1.5) == pytest.approx(1.5)

    def test_single_point(self):
        assert bench.loglog_slope([4, 4], [1.0, 2.0]) is None


class TestHarness:
    def test_time_call_counts(self):
        calls = []
        samples = bench.time_call(lambda: calls.append(1), repeats=3, warmup=2)
        assert len(samples) == 3
        assert all(s > 0 for s in samples)
        assert len(calls) >= 5

    def test_results_csv(self):
        res = bench.bench_static_ihvp([64, 128], 4, repeats=2, warmup=1)
        rows = list(csv.DictReader(io.StringIO(bench.results_csv([res]))))
        kinds = [r["kind"] for r in rows]
        assert kinds.count("sample") == 4
        assert kinds.count("median") == 2
        assert kinds[-1] == "slope_d"

    def test_single_point_grid_omits_slope(self):
        res = bench.bench_dynamic_replace([4], 32, repeats=2, warmup=1)
        assert res.slope() is None
        assert "slope" not in bench.results_csv([res])

    @pytest.mark.parametrize("fn", [bench.bench_static_setup, bench.bench_dynamic_ihvp,
                                    bench.bench_update_and_ihvp])
    def test_d_benches_run(self, fn):
        res = fn([32, 64], 4, repeats=1, warmup=0)
        assert len(res.medians()) == 2

    def test_dynamic_setup_bench(self):
        res = bench.bench_dynamic_setup([2, 4], 16, repeats=1, warmup=0)
        assert res.axis == "m" and len(res.medians()) == 2


@pytest.mark.slow
class TestScaling:
    def test_update_and_ihvp_linear_in_d(self):
        res = bench.bench_update_and_ihvp([2 ** e for e in range(21, 24)], 8, repeats=5, warmup=2)
        assert abs(res.slope() - 1.0) <= 0.2
