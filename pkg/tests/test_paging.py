import numpy as np
import pytest

from mfac import ConfigError, FisherConfig, paged_static_setup, static_setup, synthetic_gradients
from mfac.paging import FastMemory, PagedGradients


class TestPagedSetup:
    def test_single_page_bit_identical(self):
        G = synthetic_gradients(12, 30, 0)
        cfg = FisherConfig(m=12, lam=1e-3, dim=30)
        P, _ = paged_static_setup(G, cfg, 1)
        S = static_setup(G, cfg)
        np.testing.assert_array_equal(P.V, S.V)
        np.testing.assert_array_equal(P.q, S.q)

    @pytest.mark.parametrize("k", [2, 3, 5, 12])
    def test_matches_in_memory(self, k):
        G = synthetic_gradients(12, 30, 1)
        cfg = FisherConfig(m=12, lam=1e-2, dim=30)
        P, _ = paged_static_setup(G, cfg, k)
        S = static_setup(G, cfg)
        np.testing.assert_allclose(P.V, S.V, rtol=1e-12, atol=1e-12 * np.abs(S.V).max())
        np.testing.assert_allclose(P.q, S.q, rtol=1e-12)

    @pytest.mark.parametrize("seed", range(4))
    @pytest.mark.parametrize("k", [2, 3, 7])
    def test_bit_identical_odd_width(self, seed, k):
        G = synthetic_gradients(21, 255, seed)
        cfg = FisherConfig(m=21, lam=1e-5, dim=255)
        P, _ = paged_static_setup(G, cfg, k)
        S = static_setup(G, cfg)
        np.testing.assert_array_equal(P.V, S.V)
        np.testing.assert_array_equal(P.q, S.q)

    def test_budget_respected(self):
        G = synthetic_gradients(16, 10, 0)
        cfg = FisherConfig(m=16, lam=1e-2, dim=10)
        _, mem = paged_static_setup(G, cfg, 4)
        assert mem.peak <= 4 * 4

    def test_transfers_quadratic(self):
        G = synthetic_gradients(32, 8, 0)
        cfg = FisherConfig(m=32, lam=1e-2, dim=8)
        for k in (2, 4, 8):
            P = 32 // k
            # page-sized loads: a buffer, every earlier page, the page itself;
            # plus one streamed row per (row, earlier page) pair
            expect = k * (k + 3) // 2 + P * k * (k - 1) // 2
            assert paged_static_setup(G, cfg, k)[1].transfers == expect

    def test_budget_too_small(self):
        G = synthetic_gradients(8, 4, 0)
        cfg = FisherConfig(m=8, lam=1e-2, dim=4)
        with pytest.raises(ConfigError, match="smaller than one page"):
            paged_static_setup(G, cfg, 2, budget_rows=3)
        with pytest.raises(ConfigError):
            paged_static_setup(G, cfg, 2, budget_rows=12)

    def test_bad_page_count(self):
        with pytest.raises(ConfigError):
            PagedGradients(np.zeros((3, 2)), 4)


class TestFastMemory:
    def test_over_budget(self):
        mem = FastMemory(4)
        mem.load("a", np.zeros((3, 2)))
        with pytest.raises(MemoryError, match="over budget"):
            mem.load("b", np.zeros((2, 2)))
        mem.evict("a")
        mem.load("b", np.zeros((2, 2)))
        assert mem.transfers == 2 and mem.peak == 3
