"""Preconditioned gradient descent over a sliding window of past gradients.

Each step pushes the new gradient into the window (evicting the oldest) and
moves along ``F^{-1} g`` for the updated window. There is no momentum.
"""

from __future__ import annotations

import csv
import io
import json
import time
from dataclasses import dataclass, field
from typing import Callable, Union

import numpy as np

from .core import FisherConfig
from .dynamic import DynamicSketch
from .static import static_setup

Schedule = Union[float, Callable[[int], float]]


@dataclass
class OptimizerState:
    theta: np.ndarray
    sketch: DynamicSketch
    lr: Schedule = 1e-3
    step: int = 0
    stride: int = 1

    @classmethod
    def create(cls, theta0, cfg: FisherConfig, lr: Schedule = 1e-3,
               warmup: str = "passthrough", stride: int = 1) -> "OptimizerState":
        theta = np.array(theta0, dtype=cfg.np_dtype)
        if theta.shape != (cfg.dim,):
            raise ValueError(f"theta has shape {theta.shape}, expected ({cfg.dim},)")
        if stride < 1:
            raise ValueError("stride must be at least 1")
        return cls(theta, DynamicSketch.empty(cfg, warmup), lr, 0, stride)

    def lr_at(self, step: int) -> float:
        eta = self.lr(step) if callable(self.lr) else float(self.lr)
        if not eta > 0:
            raise ValueError(f"learning rate must be positive, got {eta!r} at step {step}")
        return eta

    @property
    def warming_up(self) -> bool:
        return not self.sketch.full


def optimizer_step(state: OptimizerState, grad) -> np.ndarray:
    """Advance ``state`` in place by one step; returns the direction used."""
    grad = np.asarray(grad, dtype=state.theta.dtype)
    if grad.shape != state.theta.shape:
        raise ValueError(f"gradient has shape {grad.shape}, expected {state.theta.shape}")
    if not np.all(np.isfinite(grad)):
        raise ValueError(f"non-finite gradient at step {state.step}")
    if state.step % state.stride == 0:
        direction = state.sketch.update_and_ihvp(grad)
    else:
        direction = state.sketch.ihvp(grad)
    theta = state.theta - state.lr_at(state.step) * direction
    if not np.all(np.isfinite(theta)):
        raise FloatingPointError(f"parameters became non-finite at step {state.step}")
    state.theta = theta
    state.step += 1
    return direction


@dataclass
class Trace:
    rows: list = field(default_factory=list)
    probes: list = field(default_factory=list)

    def losses(self):
        return np.array([r["loss"] for r in self.rows])

    def to_csv(self, timing: bool = True) -> str:
        cols = ["step", "loss", "grad_norm"] + (["step_time_ns"] if timing else [])
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(cols)
        for r in self.rows:
            writer.writerow([r["step"], repr(r["loss"]), repr(r["grad_norm"])]
                            + ([r["step_time_ns"]] if timing else []))
        return buf.getvalue()

    def probes_jsonl(self) -> str:
        return "".join(json.dumps(p, sort_keys=True) + "\n" for p in self.probes)


def run_training(provider: Callable, state: OptimizerState, steps: int,
                 weight_decay: float = 0.0, hook: Callable | None = None,
                 hook_every: int = 0) -> Trace:
    """Drive :func:`optimizer_step` with ``provider(theta, step) -> (loss, grad)``.

    ``hook(state, grad)`` is invoked every ``hook_every`` steps and its return
    value (a dict) is stored in ``trace.probes``.
    """
    trace = Trace()
    for _ in range(steps):
        t0 = time.perf_counter_ns()
        try:
            loss, grad = provider(state.theta, state.step)
        except Exception as exc:
            raise RuntimeError(f"provider failed at step {state.step}: {exc}") from exc
        grad = np.asarray(grad, dtype=np.float64)
        if weight_decay:
            grad = grad + weight_decay * state.theta
        if hook is not None and hook_every and state.step % hook_every == 0:
            probe = hook(state, grad)
            if probe is not None:
                trace.probes.append({"step": state.step, **probe})
        optimizer_step(state, grad)
        trace.rows.append({"step": state.step - 1, "loss": float(loss),
                           "grad_norm": float(np.linalg.norm(grad)),
                           "step_time_ns": time.perf_counter_ns() - t0})
    return trace


def _cosine(a, b) -> float:
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        raise ValueError("cosine of a zero-norm direction is undefined")
    return float(a @ b / (na * nb))


def cosine_similarity_probe(state, fresh_sets, grad) -> tuple[float, float]:
    """Compare the window's direction against directions from fresh gradient samples.

    Returns ``(cos(dynamic, static1), cos(static2, static1))`` where each
    static direction comes from a sketch built on one of the two fresh sets.
    """
    sketch = state.sketch if isinstance(state, OptimizerState) else state
    set1, set2 = fresh_sets
    cfg = sketch.cfg
    dyn = sketch.ihvp(grad)
    s1 = static_setup(set1, cfg.replace(m=np.asarray(getattr(set1, "rows", set1)).shape[0])).ihvp(grad)
    s2 = static_setup(set2, cfg.replace(m=np.asarray(getattr(set2, "rows", set2)).shape[0])).ihvp(grad)
    return _cosine(dyn, s1), _cosine(s2, s1)
