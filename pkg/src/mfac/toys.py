"""Small deterministic problems that stand in for a model at desk scale.

Each toy exposes ``loss(theta)``, ``grad(theta)``, ``sample_grads(theta)``
(per-sample gradient rows for building a Fisher sketch) and can be called as
an optimizer provider ``toy(theta, step) -> (loss, grad)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import expit, log_expit


@dataclass
class QuadraticToy:
    """``L(θ) = 1/2 (θ - θ*)^T H (θ - θ*)`` with ``H = lam I + A^T A / n``.

    The rows of ``A`` play the role of per-sample gradients, so a sketch built
    from them with the same ``lam`` and ``m = n`` reproduces ``H`` exactly.
    """

    A: np.ndarray
    theta_star: np.ndarray
    lam: float

    @classmethod
    def random(cls, d: int, n: int, lam: float = 1e-2, seed: int = 0) -> "QuadraticToy":
        rng = np.random.default_rng(seed)
        A = rng.standard_normal((n, d)) / math.sqrt(d) * 3.0
        theta_star = rng.standard_normal(d)
        return cls(A, theta_star, lam)

    @property
    def d(self):
        return self.A.shape[1]

    @property
    def n(self):
        return self.A.shape[0]

    def hvp(self, v):
        return self.lam * v + self.A.T @ (self.A @ v) / self.n

    def hessian(self):
        return self.lam * np.eye(self.d) + self.A.T @ self.A / self.n

    def loss(self, theta):
        r = np.asarray(theta) - self.theta_star
        return 0.5 * float(r @ self.hvp(r))

    def grad(self, theta):
        return self.hvp(np.asarray(theta) - self.theta_star)

    def sample_grads(self, theta=None):
        return self.A

    def __call__(self, theta, step=0):
        return self.loss(theta), self.grad(theta)


@dataclass
class LogisticToy:
    """L2-regularised logistic regression on linearly separable synthetic data."""

    X: np.ndarray
    y: np.ndarray
    reg: float = 1e-2
    batch: int | None = None
    seed: int = 0

    @classmethod
    def synthetic(cls, d: int = 50, n: int = 500, margin: float = 0.1, reg: float = 1e-2,
                  seed: int = 0, batch: int | None = None) -> "LogisticToy":
        rng = np.random.default_rng(seed)
        w = rng.standard_normal(d)
        w /= np.linalg.norm(w)
        X = rng.standard_normal((n, d))
        s = X @ w
        # push every point at least `margin` away from the separating plane
        X += np.outer(np.sign(s) * np.maximum(margin - np.abs(s), 0.0), w)
        y = (X @ w > 0).astype(np.float64)
        return cls(X, y, reg, batch, seed)

    @property
    def d(self):
        return self.X.shape[1]

    def _signed(self):
        return 2.0 * self.y - 1.0

    def loss(self, theta):
        z = self._signed() * (self.X @ theta)
        return float(-np.mean(log_expit(z)) + 0.5 * self.reg * theta @ theta)

    def grad(self, theta, rows=None):
        X = self.X if rows is None else self.X[rows]
        y = self.y if rows is None else self.y[rows]
        r = expit(X @ theta) - y
        return X.T @ r / X.shape[0] + self.reg * theta

    def sample_grads(self, theta):
        r = expit(self.X @ theta) - self.y
        return self.X * r[:, None] + self.reg * theta[None, :]

    def __call__(self, theta, step=0):
        if self.batch is None:
            return self.loss(theta), self.grad(theta)
        rng = np.random.default_rng((self.seed, step))
        rows = rng.choice(self.X.shape[0], size=self.batch, replace=False)
        return self.loss(theta), self.grad(theta, rows)


def gradient_descent(toy, theta0, lr: float, steps: int, tol: float = 0.0):
    """Plain full-batch gradient descent; returns the final iterate and loss."""
    theta = np.array(theta0, dtype=np.float64)
    for _ in range(steps):
        g = toy.grad(theta)
        if tol and np.linalg.norm(g) < tol:
            break
        theta -= lr * g
    return theta, toy.loss(theta)
