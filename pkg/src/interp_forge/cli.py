"""Command-line front end.

Exit codes: 0 success, 1 verification or run failure, 2 input/usage error.
"""

from __future__ import annotations

import os

# cap BLAS threads before numpy loads; the library itself is single-threaded
_threads = os.environ.get("INTERP_FORGE_THREADS")
if _threads:
    for _var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ.setdefault(_var, _threads)

import argparse
import csv
import json
import math
import sys

import numpy as np

from . import io
from .construction import ConstructionError, build_hardmax, build_softmax
from .core import hausdorff_distance
from .dynamics import classify, simulate
from .geometry import GeometryError
from .training import TrainingConfig, TrainingDivergence, make_synthetic, train

EXIT_OK, EXIT_FAIL, EXIT_INPUT = 0, 1, 2


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_INPUT)


def _positive_int(s):
    v = int(s)
    if v < 1:
        raise argparse.ArgumentTypeError("must be a positive integer")
    return v


def _dim(s):
    v = int(s)
    if v < 2:
        raise argparse.ArgumentTypeError("tokens need d >= 2")
    return v


def _positive_float(s):
    v = float(s)
    if not v > 0 or math.isnan(v):
        raise argparse.ArgumentTypeError("must be positive")
    return v


def _m_policy(s):
    if s == "uniform":
        return s
    try:
        return _positive_int(s)
    except (ValueError, argparse.ArgumentTypeError):
        raise argparse.ArgumentTypeError("expected 'uniform' or a positive integer") from None


def _eps_list(s):
    return [_positive_float(t) for t in s.split(",") if t]


def _diag(kind: str, message: str) -> None:
    print(json.dumps({"error": kind, "message": message}), file=sys.stderr)


# --------------------------------------------------------------------------
# commands


def cmd_gen_dataset(args) -> int:
    rng = np.random.default_rng(args.seed)
    D = io.random_dataset(rng, args.d, args.N, args.n_max, args.m_policy)
    text = io.dumps(io.dataset_to_json(D))
    if args.out:
        io.write_text(args.out, text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


def cmd_validate(args) -> int:
    io.dataset_from_json(io.load_json(args.in_path))
    print("ok")
    return EXIT_OK


def cmd_construct(args) -> int:
    D = io.dataset_from_json(io.load_json(args.in_path))
    try:
        if args.mode == "hardmax":
            T, rep = build_hardmax(D)
            report = rep.to_json()
        else:
            T, rep, plan = build_softmax(D)
            report = rep.to_json()
            report["plan"] = plan.to_json()
    except (ConstructionError, GeometryError) as exc:
        _diag(type(exc).__name__, str(exc))
        return EXIT_FAIL
    io.write_text(args.out, io.dumps(io.transformer_to_json(T)))
    if args.report:
        io.write_text(args.report, io.dumps(report))
    print(f"L={rep.L} (bound {rep.bound_L}) P={rep.P} max distance={max(rep.extras['final_distances']):.3g}")
    return EXIT_OK


def cmd_verify(args) -> int:
    T = io.transformer_from_json(io.load_json(args.model))
    D = io.dataset_from_json(io.load_json(args.in_path), validate=False)
    if T.d != D.d:
        raise io.InputError(f"model has d={T.d} but dataset has d={D.d}")
    ok = True
    for j, (X, Y) in enumerate(D.pairs()):
        dist = hausdorff_distance(T(X), Y)
        passed = dist <= args.tol
        ok &= passed
        print(f"sequence {j}: distance {dist:.6g} {'pass' if passed else 'FAIL'}")
    return EXIT_OK if ok else EXIT_FAIL


def cmd_simulate(args) -> int:
    cfg = io.dynamics_config_from_json(io.load_json(args.config))
    X0 = io.state_from_json(io.load_json(args.x0))
    if cfg.mode == "rank_one" and X0.shape[1] != cfg.A.v.size:
        raise io.InputError("state dimension does not match the attention direction")
    traj = simulate(X0, cfg, max_steps=args.steps)
    traj.write_csv(args.out)
    cls = classify(X0, cfg)
    print(f"classification: {cls.label}")
    print(f"steps: {traj.steps_taken} converged: {traj.converged}")
    if cls.prediction is not None:
        dev = float(np.max(np.abs(traj.final - cls.prediction)))
        print(f"max deviation from prediction: {dev:.6g}")
    return EXIT_OK


def cmd_train_demo(args) -> int:
    theta, D, kap = make_synthetic(args.seed, args.N, args.n, args.d)
    eps_list = args.epsilon_sweep or [args.epsilon]
    rows = []
    try:
        for eps in eps_list:
            run = train(TrainingConfig(eps, steps=args.steps, seed=args.seed), D, theta)
            rows.append(run)
            print(f"epsilon={eps:g} threshold={run.threshold:.6g} crossed_at={run.crossed_at} label={run.label}")
    except TrainingDivergence as exc:
        _diag("TrainingDivergence", str(exc))
        return EXIT_FAIL
    with open(args.out, "w", newline="") as fh:
        if args.epsilon_sweep:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["epsilon", "min_F_eps", "threshold", "crossed_at"])
            for run in rows:
                w.writerow(["%.17g" % run.epsilon, "%.17g" % run.min_loss, "%.17g" % run.threshold,
                            "" if run.crossed_at is None else run.crossed_at])
        else:
            rows[0].write_csv(fh)
    return EXIT_OK


def cmd_plot_data(args) -> int:
    """Flatten the intermediate states of a construction report to CSV."""
    rep = io.load_json(args.report)
    states = rep.get("intermediate_states") if isinstance(rep, dict) else None
    if not isinstance(states, dict):
        raise io.InputError("$: missing field 'intermediate_states'")
    with open(args.out, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        d = None
        for step, seqs in states.items():
            for j, X in enumerate(seqs):
                for i, x in enumerate(X):
                    if d is None:
                        d = len(x)
                        w.writerow(["stage", "sequence", "token_index"] + [f"coord_{k}" for k in range(d)])
                    w.writerow([step, j, i] + ["%.17g" % c for c in x])
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="interp-forge", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen-dataset", help="seeded random dataset satisfying the assumptions")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--d", type=_dim, default=2)
    g.add_argument("--N", type=_positive_int, default=3)
    g.add_argument("--n-max", type=_positive_int, default=6)
    g.add_argument("--m-policy", type=_m_policy, default="uniform")
    g.add_argument("--out")
    g.set_defaults(func=cmd_gen_dataset)

    v = sub.add_parser("validate", help="check a dataset file")
    v.add_argument("--in", dest="in_path", required=True)
    v.set_defaults(func=cmd_validate)

    c = sub.add_parser("construct", help="build an interpolating transformer")
    c.add_argument("--mode", choices=["hardmax", "softmax"], default="hardmax")
    c.add_argument("--in", dest="in_path", required=True)
    c.add_argument("--out", required=True)
    c.add_argument("--report")
    c.set_defaults(func=cmd_construct)

    vr = sub.add_parser("verify", help="evaluate a model on a dataset")
    vr.add_argument("--model", required=True)
    vr.add_argument("--in", dest="in_path", required=True)
    vr.add_argument("--tol", type=float, default=1e-9)
    vr.set_defaults(func=cmd_verify)

    s = sub.add_parser("simulate", help="run the hardmax clustering dynamics")
    s.add_argument("--config", required=True)
    s.add_argument("--x0", required=True)
    s.add_argument("--steps", type=_positive_int)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_simulate)

    t = sub.add_parser("train-demo", help="regularised training against the interpolation bound")
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--N", type=_positive_int, default=3)
    t.add_argument("--n", type=_positive_int, default=8)
    t.add_argument("--d", type=_dim, default=4)
    t.add_argument("--epsilon", type=_positive_float, default=1e-3)
    t.add_argument("--steps", type=_positive_int, default=5000)
    t.add_argument("--epsilon-sweep", type=_eps_list)
    t.add_argument("--out", required=True)
    t.set_defaults(func=cmd_train_demo)

    pd = sub.add_parser("plot-data", help="export report states as CSV")
    pd.add_argument("--report", required=True)
    pd.add_argument("--out", required=True)
    pd.set_defaults(func=cmd_plot_data)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except io.InputError as exc:
        _diag("InputError", str(exc))
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
