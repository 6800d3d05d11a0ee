"""Command-line front end: ``otafl run|verify|rate|bound``.

Exit codes: 0 success, 1 usage or config error, 2 divergence, 3 failed check.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import sys
import tempfile
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from .checks import SUITES, run_suite
from .config import ConfigError, Experiment, load_bound_inputs, load_experiment, to_dict
from .core_model import DivergenceError
from .data import DataError, partition_equal
from .estimators import constants_for, second_moment_bound
from .schedules import theorem2_iterations, theorem4_iterations
from .trainer import RateFailure, build_task, horizon_rate, horizon_sweep, traces_to_csv, train

EXIT_OK, EXIT_USAGE, EXIT_DIVERGED, EXIT_FAILED = 0, 1, 2, 3

log = logging.getLogger("otafl")


def write_atomic(path: Path, text: str, overwrite: bool) -> None:
    """Write via a temporary file in the same directory, then rename."""
    path.parent.mkdir(parents=True, exist_ok=True)
    if path.exists() and not overwrite:
        raise FileExistsError(f"{path} exists; pass --overwrite to replace it")
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        Path(tmp).unlink(missing_ok=True)
        raise


def manifest(exp: Experiment, command: str, extra: dict | None = None) -> str:
    body = {"command": command, "version": __version__, "seed": exp.run.seed, "config": to_dict(exp)}
    body.update(extra or {})
    return json.dumps(body, indent=2, sort_keys=True, default=list) + "\n"


def run_constants(config, traces) -> dict | None:
    """Analysis constants at theta_0 for the manifest (A with safety factor 2).

    Delta_hat is exact for the zero-target quadratic task and otherwise
    F(theta_0) minus the smallest training loss seen in the trace.
    """
    task = build_task(config.task, config.task_seed, config.loss.kind)
    shards = partition_equal(task.train, config.n_devices, config.task_seed).shards
    theta0 = np.full(task.train.dim, float(config.theta0))
    F0 = sum(config.loss.mean_loss(theta0, s.X, s.y) for s in shards)
    if config.loss.kind == "quadratic" and config.task.target == "zero":
        delta = F0
    else:
        seen = [t.train_loss for t in traces if t.train_loss is not None]
        delta = F0 - min(seen) if seen and min(seen) < F0 else F0
    c = constants_for(config.loss, shards, theta0, config.channel, config.perturbation, delta_hat=delta, safety=2.0)
    return {k: getattr(c, k) for k in ("L", "b", "L_xi", "A", "b1", "b2", "n_devices", "sigma1", "sigma2",
                                       "sigma3", "delta_hat", "c1", "c3")}


def _resolve(args) -> Experiment:
    exp = load_experiment(args.config)
    if args.seed is not None:
        exp = replace(exp, run=replace(exp.run, seed=args.seed))
    return exp


def cmd_run(args) -> int:
    exp = _resolve(args)
    out = Path(args.out or ".")
    trace_path = out / "trace.csv"
    if trace_path.exists() and not args.overwrite:
        raise FileExistsError(f"{trace_path} exists; pass --overwrite to replace it")
    try:
        result = train(exp.run)
        traces = result.traces
        status = EXIT_OK
    except DivergenceError as err:
        traces = getattr(err, "trace", [])
        log.error("diverged at round %s: %s", getattr(err, "round", "?"), err)
        status = EXIT_DIVERGED
    write_atomic(trace_path, traces_to_csv(traces), args.overwrite)
    extra = {"rounds_completed": len(traces), "diverged": status == EXIT_DIVERGED,
             "theory_constants": run_constants(exp.run, traces)}
    write_atomic(out / "manifest.json", manifest(exp, "run", extra), args.overwrite)
    print(f"wrote {trace_path} ({len(traces)} rounds)")
    return status


def cmd_verify(args) -> int:
    exp = _resolve(args)
    opts = exp.verify if args.trials is None else replace(exp.verify, trials=args.trials)
    checks = run_suite(args.suite, exp.run, opts, seed=exp.run.seed)
    for c in checks:
        print(c.line())
    ok = all(c.passed for c in checks)
    if args.out:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["suite", "check", "measured", "reference", "passed"])
        for c in checks:
            w.writerow([c.suite, c.name, repr(c.measured), repr(c.reference), int(c.passed)])
        out = Path(args.out)
        write_atomic(out / f"verify-{args.suite}.csv", buf.getvalue(), args.overwrite)
        write_atomic(out / f"verify-{args.suite}.json", manifest(exp, "verify", {"suite": args.suite}),
                     args.overwrite)
    print(f"{'PASS' if ok else 'FAIL'} {args.suite}")
    return EXIT_OK if ok else EXIT_FAILED


def cmd_rate(args) -> int:
    exp = _resolve(args)
    R = args.replicates
    if R < 10:
        raise ValueError("the rate measurement needs at least 10 replicates")
    opts = exp.rate
    try:
        sweep = horizon_sweep(exp.run, opts.horizons, R, seed0=exp.run.seed, jobs=args.jobs,
                              max_divergence=opts.max_divergence)
    except RateFailure as err:
        print(f"FAIL rate: {err}")
        return EXIT_FAILED
    est = horizon_rate(sweep)
    ok = opts.lower <= est.slope <= opts.upper
    for K, v in sweep:
        print(f"K={K:<6d} mean running-min ||grad F||^2 = {v:.6g}")
    print(f"{'PASS' if ok else 'FAIL'} rate: slope {est.slope:.4f} +/- {est.se:.4f} "
          f"(window [{opts.lower}, {opts.upper}])")
    if args.out:
        out = Path(args.out)
        text = "K,mean_running_min_grad_norm_sq\n" + "".join(f"{K},{v!r}\n" for K, v in sweep)
        write_atomic(out / "rate.csv", text, args.overwrite)
        write_atomic(out / "rate.json", manifest(exp, "rate", {"replicates": R, "slope": est.slope,
                                                             "se": est.se, "passed": ok}), args.overwrite)
    return EXIT_OK if ok else EXIT_FAILED


def bound_table(eps: float, beta: float, inputs) -> dict[str, int]:
    """Required rounds K for the four theorem variants."""
    c = inputs.constants
    C = second_moment_bound("ezofl", c, inputs.sigma_h, inputs.gamma)
    C2 = second_moment_bound("efofl", c, inputs.sigma_h, inputs.gamma)
    Cp = second_moment_bound("ezofl-async", c, inputs.sigma_h, inputs.gamma, inputs.late)
    C2p = second_moment_bound("efofl-async", c, inputs.sigma_h, inputs.gamma, inputs.late)
    return {
        "ezofl": theorem2_iterations(eps, beta, c, C, inputs.eta0, inputs.gamma0),
        "ezofl-async": theorem2_iterations(eps, beta, c, Cp, inputs.eta0, inputs.gamma0),
        "efofl": theorem4_iterations(eps, beta, c, C2, inputs.eta0),
        "efofl-async": theorem4_iterations(eps, beta, c, C2p, inputs.eta0),
    }


def cmd_bound(args) -> int:
    if args.config is None:
        raise ConfigError("bound needs --config pointing at a constants file")
    table = bound_table(args.eps, args.beta, load_bound_inputs(args.config))
    print(f"{'variant':<12} K")
    for name, K in table.items():
        print(f"{name:<12} {K}")
    if args.out:
        text = "variant,K\n" + "".join(f"{n},{K}\n" for n, K in table.items())
        write_atomic(Path(args.out) / "bound.csv", text, args.overwrite)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="otafl", description="Scalar over-the-air federated learning simulator.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="INI config file")
    common.add_argument("--seed", type=int, help="master seed override")
    common.add_argument("--out", help="output directory (run defaults to the current one)")
    common.add_argument("--jobs", type=int, default=1, help="parallel replicate workers")
    common.add_argument("--overwrite", action="store_true", help="replace existing output files")
    common.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", parents=[common], help="train once and write a trace")
    run.set_defaults(func=cmd_run)
    verify = sub.add_parser("verify", parents=[common], help="Monte-Carlo checks of the estimator lemmas")
    verify.add_argument("suite", choices=SUITES)
    verify.add_argument("--trials", type=int, help="Monte-Carlo trials per check")
    verify.set_defaults(func=cmd_verify)
    rate = sub.add_parser("rate", parents=[common], help="measure the convergence-rate slope")
    rate.add_argument("--replicates", type=int, default=20)
    rate.set_defaults(func=cmd_rate)
    bound = sub.add_parser("bound", parents=[common], help="required rounds from the theorem formulas")
    bound.add_argument("--eps", type=float, required=True)
    bound.add_argument("--beta", type=float, required=True)
    bound.set_defaults(func=cmd_bound)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    if args.seed is not None and args.seed < 0:
        print("error: --seed must be non-negative", file=sys.stderr)
        return EXIT_USAGE
    if args.jobs < 1:
        print("error: --jobs must be at least 1", file=sys.stderr)
        return EXIT_USAGE
    try:
        return args.func(args)
    except (ConfigError, DataError, FileExistsError, FileNotFoundError, ValueError) as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
