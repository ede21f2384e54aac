import numpy as np
import pytest
from scipy.optimize import minimize

from mfac import (DynamicSketch, FisherConfig, OptimizerState, cosine_similarity_probe,
                  dynamic_setup, optimizer_step, run_training, synthetic_gradients)
from mfac.oracle import dense_fisher, dense_inverse_woodbury
from mfac.toys import LogisticToy, QuadraticToy, gradient_descent

from conftest import LOGISTIC_OPTIMUM


def rel(a, b):
    return np.linalg.norm(a - b) / np.linalg.norm(b)


def filled_state(G, cfg, theta, stride=1, lr=1.0):
    state = OptimizerState.create(theta, cfg, lr=lr, stride=stride)
    state.sketch = dynamic_setup(G, cfg)
    return state


class TestStep:
    def test_zero_gradient(self, rng):
        cfg = FisherConfig(m=3, lam=1e-2, dim=5)
        theta = rng.standard_normal(5)
        state = filled_state(synthetic_gradients(3, 5, 0), cfg, theta)
        optimizer_step(state, np.zeros(5))
        np.testing.assert_array_equal(state.theta, theta)
        np.testing.assert_array_equal(state.sketch.G[0], 0.0)
        assert state.step == 1

    def test_window_of_copies(self):
        cfg = FisherConfig(m=4, lam=1e-2, dim=6)
        g = synthetic_gradients(1, 6, 2)[0]
        state = filled_state(np.tile(g, (4, 1)), cfg, np.zeros(6))
        direction = optimizer_step(state, g)
        W = dense_inverse_woodbury(np.tile(g, (4, 1)), cfg).inverse
        assert rel(direction, W @ g) <= 1e-10

    def test_step_is_replace_then_ihvp(self, rng):
        cfg = FisherConfig(m=5, lam=1e-3, dim=12)
        G = synthetic_gradients(5, 12, 1)
        theta = rng.standard_normal(12)
        state = filled_state(G, cfg, theta, lr=0.3)
        ref = dynamic_setup(G, cfg)
        g = rng.standard_normal(12)
        optimizer_step(state, g)
        ref.replace(0, g)
        np.testing.assert_allclose(state.theta, theta - 0.3 * ref.ihvp(g), rtol=0, atol=1e-12)

    def test_newton_step_fixed_window(self, rng):
        # stride=2 leaves the window alone on odd steps, so the step is a pure
        # F^{-1} (F theta) solve against a window that matches the loss
        toy = QuadraticToy.random(20, 6, lam=1e-2, seed=4)
        toy.theta_star = np.zeros(20)
        cfg = FisherConfig(m=6, lam=1e-2, dim=20)
        theta = rng.standard_normal(20)
        state = filled_state(toy.A, cfg, theta, stride=2)
        state.step = 1
        optimizer_step(state, toy.grad(theta))
        assert np.linalg.norm(state.theta) <= 1e-8 * np.linalg.norm(theta)

    def test_newton_step_self_consistent(self):
        # window of m copies of g with theta chosen so that F theta = g
        lam = 0.1
        g = synthetic_gradients(1, 8, 5)[0] * 3
        s = g @ g / (lam + g @ g)
        theta = g * (1 - s) / lam
        cfg = FisherConfig(m=4, lam=lam, dim=8)
        F = dense_fisher(np.tile(g, (4, 1)), cfg)
        np.testing.assert_allclose(F @ theta, g, rtol=1e-12)
        state = filled_state(np.tile(g, (4, 1)), cfg, theta)
        optimizer_step(state, g)
        assert np.linalg.norm(state.theta) <= 1e-8 * np.linalg.norm(theta)

    @pytest.mark.parametrize("s", [0.1, 3.0, 50.0])
    def test_scale_covariance(self, s):
        m, d, lam = 6, 15, 1e-2
        G = synthetic_gradients(m, d, 7)
        g = synthetic_gradients(1, d, 8)[0]
        cfg = FisherConfig(m=m, lam=lam, dim=d)
        state = filled_state(s * G[:m], cfg, np.zeros(d))
        state.sketch.next_slot = 0
        direction = optimizer_step(state, s * g)
        window = s * G.copy()
        window[0] = s * g
        ref = np.linalg.solve(lam * np.eye(d) + window.T @ window / m, s * g)
        assert rel(direction, ref) <= 1e-9

    def test_non_finite_gradient(self):
        state = OptimizerState.create(np.zeros(2), FisherConfig(m=2, dim=2))
        with pytest.raises(ValueError, match="step 0"):
            optimizer_step(state, np.array([np.nan, 0.0]))

    def test_non_finite_parameters(self):
        state = OptimizerState.create(np.zeros(2), FisherConfig(m=2, lam=1e-10, dim=2), lr=1e300)
        with pytest.raises(FloatingPointError, match="step 0"), np.errstate(over="ignore"):
            optimizer_step(state, np.array([1e10, 0.0]))

    def test_lr_schedule(self):
        cfg = FisherConfig(m=2, lam=1.0, dim=1)
        state = OptimizerState.create(np.zeros(1), cfg, lr=lambda t: 1.0 / (t + 1))
        optimizer_step(state, [1.0])
        optimizer_step(state, [1.0])
        # step 0 is passthrough (1/lam); step 1 sees F = 1 + 1 = 2 and eta = 1/2
        np.testing.assert_allclose(state.theta, [-1.0 - 0.25])
        bad = OptimizerState.create(np.zeros(1), cfg, lr=0.0)
        with pytest.raises(ValueError):
            optimizer_step(bad, [1.0])

    def test_stride_skips_updates(self):
        cfg = FisherConfig(m=3, lam=1.0, dim=2)
        state = OptimizerState.create(np.zeros(2), cfg, stride=2)
        for _ in range(4):
            optimizer_step(state, np.ones(2))
        assert state.sketch.filled == 2

    def test_shape_checks(self):
        with pytest.raises(ValueError):
            OptimizerState.create(np.zeros(3), FisherConfig(m=2, dim=2))
        state = OptimizerState.create(np.zeros(2), FisherConfig(m=2, dim=2))
        with pytest.raises(ValueError):
            optimizer_step(state, np.ones(3))

    def test_warmup_passthrough_is_scaled_gd(self):
        cfg = FisherConfig(m=5, lam=0.5, dim=3)
        state = OptimizerState.create(np.zeros(3), cfg, lr=0.1)
        assert state.warming_up
        direction = optimizer_step(state, np.array([1.0, 2.0, 3.0]))
        np.testing.assert_array_equal(direction, [2.0, 4.0, 6.0])


class TestTraining:
    def test_zero_steps(self):
        state = OptimizerState.create(np.zeros(2), FisherConfig(m=2, dim=2))
        assert run_training(QuadraticToy.random(2, 2), state, 0).rows == []

    def test_deterministic(self):
        def run():
            toy = LogisticToy.synthetic(d=10, n=60, batch=16, seed=3)
            state = OptimizerState.create(np.zeros(10), FisherConfig(m=5, lam=1e-2, dim=10), lr=1e-2)
            return run_training(toy, state, 40).to_csv(timing=False)
        assert run() == run()

    def test_quadratic_monotone_after_warmup(self):
        toy = QuadraticToy.random(12, 30, lam=1e-1, seed=1)
        cfg = FisherConfig(m=4, lam=1e-1, dim=12)
        # eta below 2 / (largest eigenvalue of F_window^{-1} H) keeps every step a descent step
        state = OptimizerState.create(np.zeros(12), cfg, lr=1e-3)
        losses = run_training(toy, state, 200).losses()
        assert np.all(np.diff(losses[cfg.m:]) <= 1e-12)

    def test_logistic_reaches_optimum(self):
        toy = LogisticToy.synthetic()
        state = OptimizerState.create(np.zeros(toy.d), FisherConfig(m=20, lam=1e-2, dim=toy.d), lr=1e-2)
        run_training(toy, state, 2000)
        assert abs(toy.loss(state.theta) - LOGISTIC_OPTIMUM) <= 1e-3

    def test_provider_failure(self):
        def provider(theta, step):
            raise KeyError("batch")
        state = OptimizerState.create(np.zeros(2), FisherConfig(m=2, dim=2))
        with pytest.raises(RuntimeError, match="step 0"):
            run_training(provider, state, 3)

    def test_hook_and_trace(self):
        toy = QuadraticToy.random(4, 4, seed=0)
        state = OptimizerState.create(np.zeros(4), FisherConfig(m=2, lam=1e-2, dim=4), lr=1e-3)
        trace = run_training(toy, state, 6, hook=lambda s, g: {"norm": float(g @ g)}, hook_every=2)
        assert [p["step"] for p in trace.probes] == [0, 2, 4]
        header = trace.to_csv().splitlines()[0]
        assert header == "step,loss,grad_norm,step_time_ns"
        assert trace.probes_jsonl().count("\n") == 3

    def test_weight_decay_added(self):
        cfg = FisherConfig(m=2, lam=1.0, dim=1)
        state = OptimizerState.create(np.array([2.0]), cfg, lr=1.0)
        run_training(lambda th, t: (0.0, np.zeros(1)), state, 1, weight_decay=0.5)
        np.testing.assert_allclose(state.theta, [1.0])


class TestProbe:
    def test_identical_sets(self):
        G = synthetic_gradients(6, 10, 0)
        cfg = FisherConfig(m=6, lam=1e-2, dim=10)
        g = synthetic_gradients(1, 10, 1)[0]
        c_dyn, c_ss = cosine_similarity_probe(dynamic_setup(G, cfg), (G, G), g)
        assert c_dyn == pytest.approx(1.0, abs=1e-9)
        assert c_ss == pytest.approx(1.0, abs=1e-12)

    def test_zero_sets(self):
        cfg = FisherConfig(m=3, lam=1e-2, dim=4)
        Z = np.zeros((3, 4))
        c_dyn, c_ss = cosine_similarity_probe(dynamic_setup(Z, cfg), (Z, Z), np.ones(4))
        assert c_dyn == pytest.approx(1.0) and c_ss == pytest.approx(1.0)

    def test_zero_direction(self):
        cfg = FisherConfig(m=2, lam=1e-2, dim=3)
        Z = np.zeros((2, 3))
        with pytest.raises(ValueError):
            cosine_similarity_probe(dynamic_setup(Z, cfg), (Z, Z), np.zeros(3))

    def test_accepts_state(self):
        cfg = FisherConfig(m=2, lam=1e-2, dim=3)
        state = filled_state(synthetic_gradients(2, 3, 0), cfg, np.zeros(3))
        G = synthetic_gradients(2, 3, 0)
        assert cosine_similarity_probe(state, (G, G), np.ones(3))[0] == pytest.approx(1.0)


class TestToys:
    def test_logistic_gradient_finite_difference(self, rng):
        toy = LogisticToy.synthetic(d=8, n=40, seed=1)
        theta = rng.standard_normal(8) * 0.3
        h = 1e-6
        fd = np.array([(toy.loss(theta + h * e) - toy.loss(theta - h * e)) / (2 * h) for e in np.eye(8)])
        np.testing.assert_allclose(toy.grad(theta), fd, rtol=1e-6, atol=1e-9)

    def test_logistic_sample_grads_average(self, rng):
        toy = LogisticToy.synthetic(d=5, n=30, seed=2)
        theta = rng.standard_normal(5)
        np.testing.assert_allclose(toy.sample_grads(theta).mean(axis=0), toy.grad(theta), rtol=1e-12)

    def test_logistic_separable(self):
        toy = LogisticToy.synthetic()
        assert toy.X.shape == (500, 50)
        assert set(np.unique(toy.y)) == {0.0, 1.0}

    def test_logistic_optimum_fixture(self):
        # independent check of the frozen oracle value with a quasi-Newton solver
        toy = LogisticToy.synthetic()
        res = minimize(toy.loss, np.zeros(toy.d), jac=toy.grad, method="L-BFGS-B",
                       options={"gtol": 1e-12, "ftol": 1e-16, "maxiter": 5000})
        assert res.fun == pytest.approx(LOGISTIC_OPTIMUM, abs=1e-12)

    def test_quadratic_toy(self, rng):
        toy = QuadraticToy.random(6, 4, lam=0.2, seed=0)
        v = rng.standard_normal(6)
        np.testing.assert_allclose(toy.hvp(v), toy.hessian() @ v, rtol=1e-13)
        assert toy.loss(toy.theta_star) == 0.0
        F = dense_fisher(toy.A, FisherConfig(m=4, lam=0.2, dim=6))
        np.testing.assert_allclose(toy.hessian(), F, rtol=1e-14)

    def test_gradient_descent_tolerance_stops(self):
        toy = QuadraticToy.random(3, 3, lam=1.0, seed=0)
        theta, loss = gradient_descent(toy, toy.theta_star, lr=0.1, steps=100, tol=1e-12)
        assert loss == 0.0
