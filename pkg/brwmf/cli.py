"""
Command line entry point.

    brwmf run <config> [--seed N] [--depth N] [--out DIR] [--parallelism N]
    brwmf check <config>
    brwmf oracles [--points N]

Exit status: 0 when every enabled check passed, 1 when a check failed or the
run was truncated, 2 on configuration errors.
"""

import argparse
import logging
import os
import sys

import jinja2
import numpy as np

import brwmf
from brwmf import config as brwmf_config
from brwmf import experiment, model
from brwmf.errors import BrwmfError, ConfigurationError

log = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_CHECKS_FAILED = 1
EXIT_CONFIG = 2

TEMPLATES = os.path.join(os.path.dirname(__file__), "templates")

ORACLE_MODELS = [
    ("BinaryRademacher", "N = 2, X = +-1",
     lambda: model.ModelSpec.binary_rademacher(1)),
    ("FixedFanDiscrete", "N = 3, X in {-1, 0, 2} w.p. 1/4, 1/2, 1/4",
     lambda: model.ModelSpec.fixed_fan_discrete(3, [-1.0, 0.0, 2.0], [0.25, 0.5, 0.25])),
    ("ShiftedPoissonGaussian", "N = 1 + Poisson(1), X ~ Normal(0, 1)",
     lambda: model.ModelSpec.shifted_poisson_gaussian(1.0, [0.0], 1.0)),
]


def oracle_tables(points=9, lower=-1.0, upper=1.0):
    tables = []
    for name, description, build in ORACLE_MODELS:
        spec = build()
        rows = []
        for q in np.linspace(lower, upper, points):
            p_tilde = model.log_mgf(spec, q)
            grad = float(model.grad_log_mgf(spec, q)[0])
            rows.append(dict(q=q, p_tilde=p_tilde, grad=grad, conjugate=p_tilde - q * grad))
        tables.append(dict(name=name, description=description,
                           log_mean=np.log(model.mean_offspring(spec)), rows=rows))
    return tables


def render_oracles(points=9):
    env = jinja2.Environment(loader=jinja2.FileSystemLoader(TEMPLATES), keep_trailing_newline=True)
    return env.get_template("oracles.j2").render(tables=oracle_tables(points))


def _cmd_run(args):
    config = brwmf_config.parse_config(args.config, seed=args.seed, depth=args.depth, out=args.out,
                                       parallelism=args.parallelism)
    manifest = experiment.run_experiment(config)
    summary = manifest.summary()
    print("%s: %d/%d checks passed%s -> %s" % (
        config.kind, summary['passed'], summary['total'],
        "" if manifest.complete else " (incomplete run)", config.output))
    for check in manifest.checks:
        if not check.passed:
            print("  FAILED %s: %s" % (check.name, check.detail))
    return EXIT_OK if manifest.passed else EXIT_CHECKS_FAILED


def _cmd_check(args):
    config = brwmf_config.parse_config(args.config)
    print("%s: valid %s config, hash %s, checks: %s" % (
        args.config, config.kind, config.config_hash(), ", ".join(config.checks) or "none"))
    return EXIT_OK


def _cmd_oracles(args):
    sys.stdout.write(render_oracles(args.points))
    return EXIT_OK


def build_parser():
    parser = argparse.ArgumentParser(prog="brwmf", description="Branching random walk multifractal toolkit")
    parser.add_argument("--version", action="version", version="%(prog)s " + brwmf.__version__)
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command")
    sub.required = True

    run = sub.add_parser("run", help="run an experiment config")
    run.add_argument("config")
    run.add_argument("--seed", type=int)
    run.add_argument("--depth", type=int)
    run.add_argument("--out")
    run.add_argument("--parallelism", type=int)
    run.set_defaults(func=_cmd_run)

    check = sub.add_parser("check", help="validate a config without running it")
    check.add_argument("config")
    check.set_defaults(func=_cmd_check)

    oracles = sub.add_parser("oracles", help="print closed-form tables for the built-in models")
    oracles.add_argument("--points", type=int, default=9)
    oracles.set_defaults(func=_cmd_oracles)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    level = logging.DEBUG if args.verbose > 1 else logging.INFO if args.verbose else logging.WARNING
    logging.basicConfig(level=level, format="%(asctime)s %(name)s %(levelname)s %(message)s")
    try:
        return args.func(args)
    except ConfigurationError as e:
        print("configuration error: %s" % e, file=sys.stderr)
        return EXIT_CONFIG
    except BrwmfError as e:
        log.error("%s", e)
        return EXIT_CHECKS_FAILED
