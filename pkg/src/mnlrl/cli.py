"""Command-line entry point.

Exit codes: 0 success, 1 a check/validation failed, 2 usage error.
Precedence for experiment settings: flags > config file > defaults.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from . import __version__

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _seeds(text: str) -> list:
    try:
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad seed list {text!r}")


def _kv(text: str):
    if "=" not in text:
        raise argparse.ArgumentTypeError(f"expected key=value, got {text!r}")
    k, v = text.split("=", 1)
    try:
        return k, json.loads(v)
    except json.JSONDecodeError:
        return k, v


def _common(p, experiment: bool = True):
    p.add_argument("--config", metavar="PATH", help="JSON config file")
    p.add_argument("--out", metavar="DIR", help="output directory")
    p.add_argument("--seed", metavar="N[,N...]", type=_seeds, help="seed or comma-separated seeds")
    if experiment:
        p.add_argument("--agents", metavar="LIST", help="comma-separated agents (baseline,ll,ol,optimal,uniform)")
        p.add_argument("--K", type=int, metavar="N", help="number of episodes")
        p.add_argument("--delta", type=float, metavar="F", help="confidence level delta")
        p.add_argument("--radius-scale", type=float, metavar="F", help="multiplier on every confidence radius")
        p.add_argument("--preset", choices=("theory", "practical"), help="hyper-parameter preset")
        p.add_argument("--workers", type=int, metavar="N", help="parallel worker processes")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="mnlrl", description="Optimistic RL for MNL mixture MDPs.")
    parser.add_argument("--version", action="version", version=f"mnlrl {__version__}")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("gen", help="write an instance file from a generator")
    _common(p, experiment=False)
    p.add_argument("--generator", choices=("random", "hard", "chain"), default=None)
    p.add_argument("--param", action="append", type=_kv, default=[], metavar="KEY=VALUE",
                   help="generator parameter (JSON value), repeatable")

    p = sub.add_parser("run", help="run an experiment config")
    _common(p)

    p = sub.add_parser("coverage", help="empirical coverage of the LL and OL confidence sets")
    _common(p)
    p.add_argument("--n-runs", type=int, default=None, metavar="N")

    p = sub.add_parser("bench", help="per-episode cost counters of LL vs OL")
    _common(p)

    p = sub.add_parser("validate", help="run the invariant/property suite on an instance")
    _common(p, experiment=False)
    p.add_argument("--instance", metavar="PATH", help="instance file (default: a fresh random instance)")

    p = sub.add_parser("report", help="regret scaling summary over result directories")
    p.add_argument("dirs", nargs="+", metavar="DIR")
    return parser


def _load_config(args) -> dict:
    doc = {}
    if getattr(args, "config", None):
        try:
            doc = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"cannot read config {args.config}: {exc}")
    return doc


def _experiment_config(args):
    from .harness import ExperimentConfig

    doc = _load_config(args)
    overrides = {"out_dir": args.out, "seeds": args.seed, "K": args.K, "delta": args.delta,
                 "radius_scale": args.radius_scale, "preset": args.preset, "workers": args.workers,
                 "agents": args.agents.split(",") if args.agents else None}
    doc.update({k: v for k, v in overrides.items() if v is not None})
    try:
        return ExperimentConfig.from_dict(doc)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid config: {exc}")


def _instance(cfg):
    from .envs import make_instance

    try:
        return make_instance(cfg.instance)
    except (ValueError, OSError) as exc:
        raise UsageError(f"invalid instance: {exc}")


def cmd_gen(args) -> int:
    from .core import save_instance
    from .envs import make_instance

    doc = _load_config(args)
    spec = doc.get("instance", doc) if doc else {"generator": "random", "params": {}}
    spec = dict(spec)
    if args.generator:
        spec = {"generator": args.generator, "params": {}}
    params = dict(spec.get("params", {}))
    params.update(dict(args.param))
    if args.seed:
        params["seed"] = args.seed[0]
    if spec.get("generator", "random") == "random":
        defaults = {"d": 3, "H": 2, "states_per_stage": 4, "A": 3, "U": 3, "B": 1.0, "seed": 0}
        params = {**defaults, **params}
    spec["params"] = params
    try:
        mdp = make_instance(spec)
    except ValueError as exc:
        raise UsageError(str(exc))
    if not args.out:
        raise UsageError("gen needs --out PATH")
    save_instance(mdp, args.out)
    print(f"wrote {args.out}")
    return EXIT_OK


def cmd_run(args) -> int:
    from .harness import run_experiment, scaling_report

    cfg = _experiment_config(args)
    result = run_experiment(cfg, _instance(cfg))
    for agent, row in scaling_report(result.records()).items():
        print(f"{agent}: Reg(K={row['K']}) = {row['final_regret']:.4f}  alpha = {row['alpha']:.3f}")
    for agent, seed, err in result.errors:
        print(f"run failed: {agent} seed {seed}: {err}", file=sys.stderr)
    if cfg.out_dir:
        print(f"results in {cfg.out_dir}")
    return EXIT_FAIL if result.errors else EXIT_OK


def cmd_coverage(args) -> int:
    from .harness import coverage_experiment

    doc = _load_config(args)
    cfg = _experiment_config(args)
    if "instance" not in doc:
        cfg.instance = {"generator": "random", "params": {"d": 3, "H": 2, "states_per_stage": 4,
                                                          "A": 3, "U": 3, "B": 1.0, "seed": 0}}
    n_runs = args.n_runs or doc.get("n_runs", 200)
    K = cfg.K if (args.K or "K" in doc) else 500
    delta = cfg.delta if (args.delta or "delta" in doc) else 0.1
    agents = [a for a in (args.agents.split(",") if args.agents else ["ll", "ol"])]
    first = cfg.seeds[0] if args.seed else 0
    report = coverage_experiment(_instance(cfg), n_runs, K, delta, agents,
                                 cfg.radius_scale, cfg.preset, first_seed=first)
    for line in report.lines():
        print(line)
    ok = report.passes()
    print("coverage", "PASS" if ok else "FAIL")
    return EXIT_OK if ok else EXIT_FAIL


def cmd_bench(args) -> int:
    from .harness import bench

    doc = _load_config(args)
    cfg = _experiment_config(args)
    if "instance" not in doc:
        cfg.instance = {"generator": "random", "params": {"d": 3, "H": 2, "states_per_stage": 4,
                                                          "A": 3, "U": 3, "B": 1.0, "seed": 0}}
    K = cfg.K if (args.K or "K" in doc) else 2000
    report = bench(_instance(cfg), K, seed=cfg.seeds[0], delta=cfg.delta, preset=cfg.preset)
    for line in report.lines():
        print(line)
    ok = report.passes()
    print("bench", "PASS" if ok else "FAIL", "(OL constant, LL growing)")
    return EXIT_OK if ok else EXIT_FAIL


def cmd_validate(args) -> int:
    from .checks import run_checks
    from .core import load_instance
    from .envs import random_instance

    seed = args.seed[0] if args.seed else 0
    if args.instance:
        try:
            mdp = load_instance(args.instance)
        except (OSError, ValueError, KeyError) as exc:
            print(f"cannot load instance: {exc}", file=sys.stderr)
            return EXIT_FAIL
    else:
        mdp = random_instance(d=3, H=2, states_per_stage=4, A=3, U=3, B=1.0, seed=seed)
    results = run_checks(mdp, seed)
    for name, err in results.items():
        print(f"{'PASS' if not err else 'FAIL'} {name}{': ' + err if err else ''}")
    return EXIT_OK if not any(results.values()) else EXIT_FAIL


def cmd_report(args) -> int:
    from .harness import load_results, scaling_report

    records = []
    for d in args.dirs:
        try:
            records += load_results(d)
        except (OSError, ValueError) as exc:
            raise UsageError(f"cannot read results in {d}: {exc}")
    if not records:
        raise UsageError("no result CSVs found")
    rep = scaling_report(records)
    print(json.dumps(rep, indent=2, sort_keys=True))
    return EXIT_OK


COMMANDS = {"gen": cmd_gen, "run": cmd_run, "coverage": cmd_coverage, "bench": cmd_bench,
            "validate": cmd_validate, "report": cmd_report}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if not args.command:
            parser.print_help(sys.stderr)
            return EXIT_USAGE
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(str(exc), file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help / --version
        return int(exc.code or 0)


if __name__ == "__main__":
    sys.exit(main())
