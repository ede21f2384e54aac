"""Command-line front end.

Exit codes: 0 success, 1 validation failure, 2 I/O error.
"""

from __future__ import annotations

import argparse
import contextlib
import csv
import json
import os
import sys

import numpy as np

from .core import (ConfigError, FisherConfig, FormatError, NumericalError,
                   batch_average_gradients, synthetic_gradients)
from . import bench, fileio, oracle
from .dynamic import dynamic_setup
from .paging import paged_static_setup
from .pruning import MODE_ALIASES, prune_step, saliency, sparsity_count
from .static import StaticSketch, build_sketch, static_setup
from .toys import LogisticToy, gradient_descent
from .optimizer import OptimizerState, run_training

EXIT_OK, EXIT_INVALID, EXIT_IO = 0, 1, 2
VERIFY_TOL = 1e-9


class ValidationFailure(Exception):
    pass


def _add_common(p):
    p.add_argument("--d", type=int, help="parameter dimension")
    p.add_argument("--m", type=int, help="number of gradients / window length")
    p.add_argument("--lambda", dest="lam", type=float, default=1e-5, help="dampening (default 1e-5)")
    p.add_argument("--blocksize", default="full", help="block width or 'full'")
    p.add_argument("--dtype", choices=["f32", "f64"], default="f64")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", help="output path (stdout when omitted)")


def build_parser():
    parser = argparse.ArgumentParser(prog="mfac", description="Matrix-free inverse Fisher tools")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("verify", help="cross-check sketches against dense oracles")
    _add_common(p)
    p.add_argument("--grads", help="gradient file (mfacbin or csv); generated when omitted")
    p.add_argument("--sketch", help="static sketch file to validate")

    p = sub.add_parser("prune", help="select and prune weights")
    _add_common(p)
    p.add_argument("--weights", required=True)
    p.add_argument("--grads", required=True)
    p.add_argument("--sparsity", type=float, required=True)
    p.add_argument("--mode", choices=sorted(MODE_ALIASES), default="obs")
    p.add_argument("--recompute", type=int, default=1)
    p.add_argument("--batch", type=int, default=1, help="average consecutive gradients")
    p.add_argument("--weights-out", help="where to write the pruned weights")

    p = sub.add_parser("optimize", help="train the bundled logistic toy")
    _add_common(p)
    p.add_argument("--steps", type=int, default=2000)
    p.add_argument("--lr", type=float, default=1e-2)
    p.add_argument("--trace", help="per-step trace CSV (includes wall times)")
    p.set_defaults(m=20, lam=1e-2)

    p = sub.add_parser("bench", help="time operations over a size grid")
    _add_common(p)
    p.add_argument("--d-exp", default="12:16", help="log2(d) range LO:HI for d sweeps")
    p.add_argument("--m-list", default="", help="comma-separated m values for the replacement sweep")
    p.add_argument("--repeats", type=int, default=5)
    p.add_argument("--warmup", type=int, default=2)
    p.add_argument("--ops", default="static_ihvp,dynamic_ihvp,dynamic_replace")
    p.set_defaults(m=64, d=1024)

    p = sub.add_parser("gen", help="write a synthetic gradient fixture")
    _add_common(p)
    p.add_argument("--rank", type=int, help="low-rank correlated gradients")
    p.add_argument("--weights-out", help="also write a weight vector")
    return parser


def _config(args, m, d) -> FisherConfig:
    bs = args.blocksize
    bs = bs if bs == "full" else int(bs)
    return FisherConfig(m=m, lam=args.lam, dim=d, block_size=bs, dtype=args.dtype)


@contextlib.contextmanager
def _output(path):
    if path is None:
        yield sys.stdout
    else:
        with open(path, "w", newline="") as fh:
            yield fh


def _rel(a, b):
    denom = np.abs(b).max()
    return float(np.abs(a - b).max() / denom) if denom else float(np.abs(a - b).max())


def _rel2(a, b):
    nb = np.linalg.norm(b)
    return float(np.linalg.norm(a - b) / nb) if nb else float(np.linalg.norm(a - b))


def cmd_verify(args) -> int:
    sketch = None
    if args.sketch:
        try:
            sketch = StaticSketch.load(args.sketch)
        except NumericalError as exc:
            raise ValidationFailure(f"q-positivity: {exc}") from None
        except FormatError:
            raise
        except ValueError as exc:
            raise ValidationFailure(f"sketch-integrity: {exc}") from None
    if args.grads:
        G = fileio.load_gradients(args.grads, dtype="f64").rows
    elif sketch is not None:
        G = None
    else:
        if args.d is None or args.m is None:
            raise ConfigError("verify needs --grads or both --d and --m")
        G = synthetic_gradients(args.m, args.d, args.seed)
    d = G.shape[1] if G is not None else sketch.d
    if d > oracle.MAX_DIM:
        raise ValidationFailure(
            f"oracle-guard: d={d} exceeds the dense oracle limit {oracle.MAX_DIM}; "
            "verify on a smaller instance or a coordinate block")
    checks = []
    if G is not None:
        m = G.shape[0]
        cfg = FisherConfig(m=m, lam=args.lam, dim=d)
        W = oracle.dense_inverse_woodbury(G, cfg)
        C = oracle.dense_inverse_direct(G, cfg)
        rng = np.random.default_rng(args.seed)
        X = rng.standard_normal((4, d))
        S = static_setup(G, cfg)
        Dy = dynamic_setup(G, cfg)
        checks.append(("oracle_direct_vs_woodbury", _rel(C.inverse, W.inverse)))
        checks.append(("static_ihvp_vs_oracle", max(_rel2(S.ihvp(x), W.inverse @ x) for x in X)))
        checks.append(("static_diag_vs_oracle", _rel(S.diag(), np.diag(W.inverse))))
        checks.append(("static_elements_vs_oracle", _rel(S.submatrix(np.arange(d)), W.inverse)))
        checks.append(("dynamic_ihvp_vs_oracle", max(_rel2(Dy.ihvp(x), W.inverse @ x) for x in X)))
        checks.append(("dynamic_vs_static", max(_rel2(Dy.ihvp(x), S.ihvp(x)) for x in X)))
        for _ in range(m):
            Dy.push(synthetic_gradients(1, d, int(rng.integers(1 << 31)))[0])
        fresh = dynamic_setup(Dy.G.copy(), cfg)
        checks.append(("replacement_drift", max(_rel2(Dy.ihvp(x), fresh.ihvp(x)) for x in X)))
        if m >= 2:
            P, _ = paged_static_setup(G, cfg, min(4, m))
            checks.append(("paged_vs_in_memory", _rel(P.V, S.V)))
        if sketch is not None:
            if sketch.d != d:
                raise ValidationFailure(f"sketch-shape: sketch has d={sketch.d}, gradients d={d}")
            W2 = oracle.dense_inverse_woodbury(G, sketch.cfg)
            checks.append(("sketch_ihvp_vs_oracle", max(_rel2(sketch.ihvp(x), W2.inverse @ x) for x in X)))
    with _output(args.out) as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["check", "max_rel_error", "tolerance", "status"])
        for name, err in checks:
            writer.writerow([name, repr(err), VERIFY_TOL, "ok" if err <= VERIFY_TOL else "FAIL"])
    failed = [name for name, err in checks if not err <= VERIFY_TOL]
    if failed:
        raise ValidationFailure("tolerance exceeded: " + ", ".join(failed))
    return EXIT_OK


def _load_weights(path) -> np.ndarray:
    rows = fileio.load_gradients(path, dtype="f64").rows
    if rows.shape[0] != 1:
        raise FormatError(f"weights file must hold one row, got {rows.shape[0]}")
    return rows[0].copy()


def cmd_prune(args) -> int:
    theta = _load_weights(args.weights)
    G = fileio.load_gradients(args.grads, dtype=args.dtype)
    if args.batch > 1:
        G = batch_average_gradients(G, args.batch)
    if G.d != theta.size:
        raise ConfigError(f"weights have {theta.size} entries but gradients have width {G.d}")
    count = sparsity_count(theta.size, args.sparsity)
    cfg = _config(args, G.m, G.d)
    # fixed-curvature provider: every recomputation sees the supplied gradients
    new_theta, decision = prune_step(theta, lambda _: G.rows, cfg, count,
                                     MODE_ALIASES[args.mode], args.recompute)
    if count == 0:
        decision.saliencies = saliency(theta, build_sketch(G, cfg).diag())
    with _output(args.out) as fh:
        fh.write(decision.to_csv(theta))
    weights_out = args.weights_out
    if weights_out is None and args.out:
        weights_out = os.path.splitext(args.out)[0] + ".weights.csv"
    if weights_out:
        fileio.save_gradients(weights_out, new_theta[None, :])
    return EXIT_OK


def cmd_optimize(args) -> int:
    toy = LogisticToy.synthetic(d=args.d or 50, seed=args.seed)
    d = toy.d
    cfg = FisherConfig(m=args.m, lam=args.lam, dim=d, dtype=args.dtype)
    state = OptimizerState.create(np.zeros(d), cfg, lr=args.lr)
    trace = run_training(toy, state, args.steps)
    final = toy.loss(state.theta)
    _, oracle_loss = gradient_descent(toy, np.zeros(d), lr=1.0, steps=20000, tol=1e-13)
    warmup_only = args.steps < cfg.m
    if args.trace:
        with open(args.trace, "w", newline="") as fh:
            fh.write(trace.to_csv(timing=True))
    with _output(args.out) as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["key", "value"])
        writer.writerow(["steps", args.steps])
        writer.writerow(["m", cfg.m])
        writer.writerow(["lambda", repr(cfg.lam)])
        writer.writerow(["lr", repr(args.lr)])
        writer.writerow(["final_loss", repr(final)])
        writer.writerow(["gd_oracle_loss", repr(oracle_loss)])
        writer.writerow(["gap", repr(final - oracle_loss)])
        writer.writerow(["warmup_only", int(warmup_only)])
    if warmup_only:
        print(f"warning: window m={cfg.m} never filled in {args.steps} steps (warmup-only run)",
              file=sys.stderr)
    return EXIT_OK


def _parse_range(text):
    lo, _, hi = text.partition(":")
    lo = int(lo)
    hi = int(hi) if hi else lo
    return [2 ** k for k in range(lo, hi + 1)]


def cmd_bench(args) -> int:
    ops = [o.strip() for o in args.ops.split(",") if o.strip()]
    ds = _parse_range(args.d_exp)
    ms = [int(v) for v in args.m_list.split(",") if v.strip()] or [args.m]
    kw = dict(lam=args.lam, seed=args.seed, repeats=args.repeats, warmup=args.warmup)
    runners = {
        "static_ihvp": lambda: bench.bench_static_ihvp(ds, args.m, **kw),
        "static_setup": lambda: bench.bench_static_setup(ds, args.m, **kw),
        "dynamic_ihvp": lambda: bench.bench_dynamic_ihvp(ds, args.m, **kw),
        "update_and_ihvp": lambda: bench.bench_update_and_ihvp(ds, args.m, **kw),
        "dynamic_replace": lambda: bench.bench_dynamic_replace(ms, args.d, **kw),
        "dynamic_setup": lambda: bench.bench_dynamic_setup(ms, args.d, **kw),
    }
    unknown = [o for o in ops if o not in runners]
    if unknown:
        raise ConfigError(f"unknown benchmark ops: {unknown}")
    results = [runners[o]() for o in ops]
    with _output(args.out) as fh:
        fh.write(bench.results_csv(results))
    for res in results:
        slope = res.slope()
        if slope is not None:
            print(f"{res.op}: log-log slope in {res.axis} = {slope:.3f}", file=sys.stderr)
    return EXIT_OK


def cmd_gen(args) -> int:
    if args.d is None or args.m is None or args.out is None:
        raise ConfigError("gen needs --d, --m and --out")
    dt = np.float32 if args.dtype == "f32" else np.float64
    G = synthetic_gradients(args.m, args.d, args.seed, rank=args.rank, dtype=dt)
    fileio.save_gradients(args.out, G)
    meta = {"d": args.d, "m": args.m, "seed": args.seed, "rank": args.rank,
            "dtype": args.dtype, "generator": "standard normal / sqrt(d)"}
    if args.weights_out:
        theta = np.random.default_rng((args.seed, 1)).standard_normal(args.d).astype(dt)
        fileio.save_gradients(args.weights_out, theta[None, :])
        meta["weights"] = os.path.basename(args.weights_out)
    with open(args.out + ".json", "w") as fh:
        json.dump(meta, fh, sort_keys=True)
        fh.write("\n")
    return EXIT_OK


COMMANDS = {"verify": cmd_verify, "prune": cmd_prune, "optimize": cmd_optimize,
            "bench": cmd_bench, "gen": cmd_gen}


def _thread_limit():
    value = os.environ.get("MFAC_THREADS")
    if not value:
        return contextlib.nullcontext()
    from threadpoolctl import threadpool_limits
    return threadpool_limits(limits=max(1, int(value)))


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        with _thread_limit():
            return COMMANDS[args.command](args)
    except ValidationFailure as exc:
        print(f"validation failed: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except (FileNotFoundError, PermissionError, IsADirectoryError, FormatError) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (ConfigError, NumericalError, ValueError, IndexError) as exc:
        print(f"invalid input: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
