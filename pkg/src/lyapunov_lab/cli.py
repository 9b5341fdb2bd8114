"""``lyapunov-lab`` command line front end.

Exit codes: 0 success, 1 config error, 2 I/O error, 3 every cell failed.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys

from .ensembles import NormBoundError, RngStream
from .estimators import gap_conjecture_report, sigma_equivalence_test, theta_log_moment
from .experiments import (
    RESIDUAL_FIELDS,
    ConfigError,
    MissingPairError,
    base_spec,
    emit_results,
    parse_config,
    residual_table,
    run_sweep,
)

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_ALL_FAILED = 0, 1, 2, 3

SINGLE_ESTIMATOR = {
    "estimate-direct": "direct",
    "estimate-exact": "exact",
    "estimate-approx": "approx",
    "asymptotic": "asymptotic",
}
COMMANDS = (*SINGLE_ESTIMATOR, "sigma-check", "theta-check", "conjecture", "sweep")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="lyapunov-lab",
                                description="Lyapunov spectra of orthogonal-plus-Gaussian cocycles.")
    p.add_argument("command", choices=COMMANDS)
    p.add_argument("--config", metavar="FILE", help="JSON config; flags override its values")
    p.add_argument("--d", type=int, nargs="+", dest="dims", metavar="N")
    p.add_argument("--epsilon", type=float, nargs="+", dest="epsilons", metavar="X")
    p.add_argument("--estimators", nargs="+", help="sweep only")
    p.add_argument("--samples", type=int, dest="n_samples", metavar="N")
    p.add_argument("--steps", type=int, dest="n_steps", metavar="N")
    p.add_argument("--reorth", type=int, dest="reorth_period", metavar="N")
    p.add_argument("--seed", type=int, dest="master_seed", metavar="N")
    p.add_argument("--workers", type=int, metavar="N")
    p.add_argument("--output", dest="output_path", metavar="PATH")
    p.add_argument("--format", dest="output_format", choices=("csv", "json"))
    p.add_argument("--base", help="identity | haar | rotation:ANGLE | diag:A,B,...")
    p.add_argument("--antithetic", action="store_const", const=True, default=None,
                   help="draw Monte Carlo samples as (N, -N) pairs")
    p.add_argument("--timing", action="store_const", const=True, default=None, dest="record_timing",
                   help="record wall times (output is then no longer byte-reproducible)")
    p.add_argument("--residuals", metavar="PATH", help="sweep: also write the residual table here")
    p.add_argument("--n", type=int, default=8, help="sigma-check: product length")
    p.add_argument("--m", type=int, default=10_000, help="sigma-check: samples per side")
    p.add_argument("--chain", choices=("svd", "raw-diagonal"), default="svd", help="sigma-check chain")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def _load_config(args):
    text = ""
    if args.config:
        with open(args.config, encoding="utf-8") as fh:
            text = fh.read()
    overrides = {k: getattr(args, k) for k in (
        "dims", "epsilons", "n_samples", "n_steps", "reorth_period", "master_seed", "workers",
        "output_path", "output_format", "base", "antithetic", "record_timing")}
    if args.command in SINGLE_ESTIMATOR:
        overrides["estimators"] = [SINGLE_ESTIMATOR[args.command]]
    else:
        overrides["estimators"] = args.estimators
    defaults = {"master_seed": 0, "n_samples": 100_000}
    if args.command in ("sigma-check", "theta-check", "conjecture"):
        defaults["estimators"] = ["exact"]
    base = {**defaults, **(json.loads(text) if text.strip() else {})}
    return parse_config(json.dumps(base), overrides)


def _write(rows, cfg, columns=None):
    kwargs = {} if columns is None else {"columns": columns}
    text = emit_results(rows, cfg.output_format, cfg.output_path, **kwargs)
    if cfg.output_path is None:
        sys.stdout.write(text)


def _sweep(args, cfg):
    rows = run_sweep(cfg)
    _write(rows, cfg)
    if args.residuals:
        try:
            table = residual_table(rows)
        except MissingPairError as exc:
            print(f"residuals: {exc}", file=sys.stderr)
            return EXIT_CONFIG
        if table:
            emit_results(table, "csv", args.residuals, columns=RESIDUAL_FIELDS)
    failed = [r for r in rows if r.failed]
    for r in failed:
        if r.k == 1:
            print(f"cell d={r.d} eps={r.epsilon} {r.estimator}: {r.error}", file=sys.stderr)
    return EXIT_ALL_FAILED if len(failed) == len(rows) else EXIT_OK


def _sigma_check(args, cfg):
    rows = []
    for d in cfg.dims:
        for eps in cfg.epsilons:
            rep = sigma_equivalence_test(d, eps, args.n, args.m, RngStream(cfg.master_seed, d),
                                         chain=args.chain)
            for which, res in (("top", rep.top), ("bottom", rep.bottom)):
                rows.append({"d": d, "epsilon": eps, "n": rep.n, "m_samples": rep.m_samples,
                             "chain": rep.chain, "singular_value": which,
                             "ks_statistic": res.statistic, "pvalue": res.pvalue})
    _write(rows, cfg, tuple(rows[0]))
    return EXIT_OK


def _theta_check(args, cfg):
    rows = []
    for d in cfg.dims:
        for eps in cfg.epsilons:
            rep = theta_log_moment(d, eps, cfg.n_samples, RngStream(cfg.master_seed, d))
            rows.append({"d": d, "epsilon": eps, "n_samples": rep.n_samples, "mean": rep.mean,
                         "std_err": rep.std_err, "bound": rep.bound, "satisfied": rep.satisfied})
    _write(rows, cfg, tuple(rows[0]))
    return EXIT_OK if all(r["satisfied"] for r in rows) else EXIT_ALL_FAILED


def _conjecture(args, cfg):
    rows = []
    for d in cfg.dims:
        try:
            spec = base_spec(cfg.base, d, cfg.epsilons[0])
        except ValueError as exc:
            raise ConfigError("base", str(exc)) from None
        report = gap_conjecture_report(spec, cfg.epsilons, cfg.n_steps, cfg.n_samples,
                                       RngStream(cfg.master_seed, d), reorth_period=cfg.reorth_period)
        rows.extend({"d": d, **r} for r in report.rows())
    if not rows:
        print("no gaps to compare (d = 1)", file=sys.stderr)
        return EXIT_OK
    _write(rows, cfg, tuple(rows[0]))
    return EXIT_OK


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.ERROR,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = _load_config(args)
        if args.command == "sigma-check":
            return _sigma_check(args, cfg)
        if args.command == "theta-check":
            return _theta_check(args, cfg)
        if args.command == "conjecture":
            return _conjecture(args, cfg)
        return _sweep(args, cfg)
    except (ConfigError, NormBoundError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except ValueError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
