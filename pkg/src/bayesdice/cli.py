"""Command-line entry point: ``bayesdice {gen-data,train,coverage,select,report}``."""
from __future__ import annotations

import argparse
import json
import logging
import sys

from .data import load_dataset, sample_dataset, save_dataset
from .estimator import BayesDiceConfig, save_posterior, train_posterior
from .experiments import (ExperimentConfig, make_env, make_family_policy, make_features,
                          report_summary, run_coverage, run_selection)

log = logging.getLogger("bayesdice")


def _load_config(args) -> ExperimentConfig:
    cfg = ExperimentConfig.load(args.config)
    if args.seed is not None:
        cfg.seed = args.seed
    if getattr(args, "workers", None):
        cfg.workers = args.workers
    cfg.validate()
    return cfg


def cmd_gen_data(args) -> None:
    cfg = _load_config(args)
    mdp = make_env(cfg.env)
    behavior = make_family_policy(mdp, cfg.behavior)
    n = args.n if args.n is not None else cfg.sizes[0]
    if n % cfg.horizon:
        raise ValueError(f"n={n} is not a multiple of horizon {cfg.horizon}")
    ds = sample_dataset(mdp, behavior, n // cfg.horizon, cfg.horizon, cfg.seed,
                        behavior_spec=cfg.behavior)
    save_dataset(ds, args.out)
    log.info("wrote %d tuples to %s", ds.n, args.out)


def cmd_train(args) -> None:
    cfg = _load_config(args)
    ds = load_dataset(args.data)
    mdp = make_env(cfg.env)
    if (mdp.num_states, mdp.num_actions) != (ds.num_states, ds.num_actions):
        raise ValueError("dataset does not match the configured environment")
    if not 0 <= args.target < len(cfg.targets):
        raise ValueError(f"--target must lie in [0, {len(cfg.targets)})")
    target = make_family_policy(mdp, cfg.targets[args.target])
    bcfg = BayesDiceConfig(**{**cfg.bayesdice, "seed": cfg.seed})
    post = train_posterior(ds, target, make_features(cfg.features, mdp), bcfg,
                           log_every=args.log_every)
    save_posterior(post, args.out)
    log.info("wrote posterior to %s", args.out)


def cmd_coverage(args) -> None:
    cfg = _load_config(args)
    if cfg.experiment != "coverage":
        raise ValueError(f"config experiment is {cfg.experiment!r}, expected 'coverage'")
    out = args.out or cfg.output
    if not out:
        raise ValueError("no output path: pass --out or set 'output' in the config")
    run_coverage(cfg, out)
    report_summary(out)


def cmd_select(args) -> None:
    cfg = _load_config(args)
    if cfg.experiment != "selection":
        raise ValueError(f"config experiment is {cfg.experiment!r}, expected 'selection'")
    out = args.out or cfg.output
    if not out:
        raise ValueError("no output path: pass --out or set 'output' in the config")
    run_selection(cfg, out)
    report_summary(out)


def cmd_report(args) -> None:
    report_summary(args.results)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="bayesdice", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, out_required=False):
        p.add_argument("--config", required=True, help="experiment config (JSON)")
        p.add_argument("--seed", type=int, default=None, help="override the config seed")
        p.add_argument("--out", required=out_required, default=None)

    p = sub.add_parser("gen-data", help="sample a behavior dataset to JSON lines")
    common(p, out_required=True)
    p.add_argument("--n", type=int, default=None, help="tuples (default: first config size)")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="fit a BayesDICE posterior for one target")
    common(p, out_required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--target", type=int, default=0, help="index into the config targets")
    p.add_argument("--log-every", type=int, default=0)
    p.set_defaults(func=cmd_train)

    for name, func, text in (("coverage", cmd_coverage, "interval coverage study"),
                             ("select", cmd_select, "policy selection study")):
        p = sub.add_parser(name, help=text)
        common(p)
        p.add_argument("--workers", type=int, default=None)
        p.set_defaults(func=func)

    p = sub.add_parser("report", help="aggregate a results CSV")
    p.add_argument("results")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        args.func(args)
    except (ValueError, OSError, FloatingPointError, KeyError, TypeError) as e:
        print(f"bayesdice {args.command}: error: {e}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
