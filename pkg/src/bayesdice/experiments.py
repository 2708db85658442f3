"""Config-driven coverage and selection studies with CSV output.

Every trial draws its randomness from ``seed ^ trial`` only, so trials can run
in any order (or in parallel) and the written CSV stays byte-identical.
"""
from __future__ import annotations

import csv
import json
import math
import statistics
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Optional

import numpy as np

from . import baselines
from .data import sample_dataset
from .estimator import (BayesDiceConfig, ValueSampleMatrix, interval_from_samples,
                        sample_policy_values, train_posterior)
from .features import one_hot, random_fourier
from .mdp import (PolicyFamilySpec, TabularMDP, TabularPolicy, build_env,
                  exact_policy_value, greedy_policy, make_policy, uniform_policy)
from .selection import (RankingScoreSpec, bandit_conjugate_oracle, offline_select,
                        point_estimate_ranking, score_ranking)

COVERAGE_METHODS = ("bayesdice", "wis_t", "wis_bernstein", "wis_bootstrap")
SELECTION_METHODS = ("bayesdice", "mean_rank", "lower_bound_rank", "upper_bound_rank", "oracle")
ALL_METHODS = ("bayesdice", "wis_t", "wis_bernstein", "wis_bootstrap", "mean_rank",
               "lower_bound_rank", "upper_bound_rank", "oracle")
POINT_STATISTICS = {"mean_rank": "mean", "lower_bound_rank": "mean_minus_std",
                    "upper_bound_rank": "mean_plus_std"}

COVERAGE_COLUMNS = ["method", "target", "n", "confidence", "coverage", "median_log_width", "trials"]
COVERAGE_TRIAL_COLUMNS = ["method", "target", "n", "confidence", "trial", "lo", "hi", "truth", "covered"]
SELECTION_COLUMNS = ["method", "score_kind", "k", "n", "trial", "value"]


class ConfigError(ValueError):
    """Raised with every validation problem found in an experiment config."""

    def __init__(self, problems):
        self.problems = list(problems)
        super().__init__("invalid experiment config:\n" + "\n".join(f"  - {p}" for p in self.problems))


@dataclass
class ExperimentConfig:
    experiment: str
    env: dict
    behavior: dict
    targets: list
    sizes: list
    methods: list
    trials: int = 200
    seed: int = 0
    horizon: int = 1
    confidence_levels: list = field(default_factory=lambda: [0.6, 0.8, 0.9, 0.95])
    scores: list = field(default_factory=lambda: ["regret@1"])
    bayesdice: dict = field(default_factory=dict)
    features: dict = field(default_factory=lambda: {"kind": "one_hot"})
    num_draws: int = 1000
    bootstrap_resamples: int = 2000
    selection_mode: str = "auto"
    oracle_prior: tuple = (1.0, 1.0)
    output: Optional[str] = None
    workers: int = 1

    def __post_init__(self):
        if isinstance(self.oracle_prior, list):
            self.oracle_prior = tuple(self.oracle_prior)

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        if not isinstance(d, dict):
            raise ConfigError(["config must be a JSON object"])
        names = {f.name for f in fields(cls)}
        required = ("experiment", "env", "behavior", "targets", "sizes", "methods")
        problems = [f"unknown key {k!r}" for k in d if k not in names]
        problems += [f"missing required key {k!r}" for k in required if k not in d]
        if problems:
            raise ConfigError(problems)
        cfg = cls(**d)
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        with open(path) as f:
            try:
                d = json.load(f)
            except json.JSONDecodeError as e:
                raise ConfigError([f"{path}: not valid JSON: {e}"]) from None
        return cls.from_dict(d)

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    def score_specs(self) -> list[RankingScoreSpec]:
        return [RankingScoreSpec.parse(s) for s in self.scores]

    def bayesdice_config(self) -> BayesDiceConfig:
        return BayesDiceConfig(**self.bayesdice)

    def validate(self) -> None:
        p = []
        if self.experiment not in ("coverage", "selection"):
            p.append(f"experiment must be 'coverage' or 'selection', got {self.experiment!r}")
        mdp = None
        try:
            mdp = make_env(self.env)
        except (ValueError, TypeError) as e:
            p.append(f"env: {e}")
        if not isinstance(self.targets, list) or not self.targets:
            p.append("targets must be a nonempty list")
        elif self.experiment == "selection" and len(self.targets) < 2:
            p.append("selection needs at least two targets")
        if mdp is not None:
            specs = [("behavior", self.behavior)]
            if isinstance(self.targets, list):
                specs += [(f"targets[{i}]", t) for i, t in enumerate(self.targets)]
            for name, spec in specs:
                try:
                    make_family_policy(mdp, spec)
                except (ValueError, TypeError, KeyError) as e:
                    p.append(f"{name}: {e}")
        if not isinstance(self.methods, list) or not self.methods:
            p.append("methods must be a nonempty list")
        else:
            allowed = COVERAGE_METHODS if self.experiment == "coverage" else SELECTION_METHODS
            for m in self.methods:
                if m not in ALL_METHODS:
                    p.append(f"unknown method {m!r}")
                elif self.experiment in ("coverage", "selection") and m not in allowed:
                    p.append(f"method {m!r} is not available for {self.experiment}")
            if len(set(self.methods)) != len(self.methods):
                p.append("methods contain duplicates")
            if "oracle" in self.methods and (not isinstance(self.env, dict) or self.env.get("id") != "bandit"):
                p.append("the oracle method needs the bandit environment")
        if not isinstance(self.trials, int) or self.trials < 1:
            p.append(f"trials must be a positive integer, got {self.trials!r}")
        if not isinstance(self.seed, int) or self.seed < 0:
            p.append(f"seed must be a nonnegative integer, got {self.seed!r}")
        if not isinstance(self.horizon, int) or self.horizon < 1:
            p.append(f"horizon must be a positive integer, got {self.horizon!r}")
        if not isinstance(self.sizes, list) or not self.sizes:
            p.append("sizes must be a nonempty list")
        else:
            for n in self.sizes:
                if not isinstance(n, int) or n < 1:
                    p.append(f"dataset size {n!r} is not a positive integer")
                elif isinstance(self.horizon, int) and self.horizon >= 1 and n % self.horizon:
                    p.append(f"dataset size {n} is not a multiple of horizon {self.horizon}")
                elif (self.experiment == "coverage" and isinstance(self.horizon, int)
                      and isinstance(self.methods, list)
                      and any(str(m).startswith("wis") for m in self.methods)
                      and n // max(self.horizon, 1) < 2):
                    p.append(f"dataset size {n} gives fewer than two trajectories for WIS")
        if self.experiment == "coverage":
            if not isinstance(self.confidence_levels, list) or not self.confidence_levels:
                p.append("confidence_levels must be a nonempty list")
            else:
                for c in self.confidence_levels:
                    if not isinstance(c, (int, float)) or not 0.0 < c < 1.0:
                        p.append(f"confidence level {c!r} must lie in (0, 1)")
        if self.experiment == "selection":
            if not isinstance(self.scores, list) or not self.scores:
                p.append("scores must be a nonempty list")
            else:
                for s in self.scores:
                    try:
                        spec = RankingScoreSpec.parse(s)
                        if isinstance(self.targets, list):
                            spec.check(len(self.targets))
                    except (ValueError, TypeError) as e:
                        p.append(f"score {s!r}: {e}")
            if self.selection_mode not in ("auto", "exhaustive", "set_enumeration", "greedy"):
                p.append(f"unknown selection_mode {self.selection_mode!r}")
        try:
            BayesDiceConfig(**self.bayesdice)
        except (ValueError, TypeError) as e:
            p.append(f"bayesdice: {e}")
        if not isinstance(self.features, dict) or self.features.get("kind") not in ("one_hot", "random_fourier"):
            p.append("features.kind must be 'one_hot' or 'random_fourier'")
        if not isinstance(self.num_draws, int) or self.num_draws < 2:
            p.append("num_draws must be an integer >= 2")
        if not isinstance(self.bootstrap_resamples, int) or self.bootstrap_resamples < 1:
            p.append("bootstrap_resamples must be a positive integer")
        if (not isinstance(self.oracle_prior, (list, tuple)) or len(self.oracle_prior) != 2
                or min(self.oracle_prior) <= 0):
            p.append("oracle_prior must be two positive numbers")
        if not isinstance(self.workers, int) or self.workers < 1:
            p.append("workers must be a positive integer")
        if p:
            raise ConfigError(p)


# ---------------------------------------------------------------------------
# building blocks


def make_env(spec: dict) -> TabularMDP:
    if not isinstance(spec, dict) or "id" not in spec:
        raise ValueError("env spec must be an object with an 'id'")
    kwargs = {k: v for k, v in spec.items() if k != "id"}
    return build_env(spec["id"], **kwargs)


def make_family_policy(mdp: TabularMDP, spec: dict) -> TabularPolicy:
    """Policy from ``{"family": "bandit_alpha", "alpha": a}`` or
    ``{"family": "epsilon_greedy", "epsilon": e, "base": "greedy" | "uniform"}``."""
    if not isinstance(spec, dict):
        raise ValueError("policy spec must be an object")
    family = spec.get("family")
    if family == "bandit_alpha":
        return make_policy(mdp, PolicyFamilySpec(family, float(spec["alpha"])))
    if family == "epsilon_greedy":
        base_name = spec.get("base", "greedy")
        if base_name == "greedy":
            base = greedy_policy(mdp)
        elif base_name == "uniform":
            base = uniform_policy(mdp)
        else:
            raise ValueError(f"unknown base policy {base_name!r}")
        return make_policy(mdp, PolicyFamilySpec(family, float(spec["epsilon"]), base))
    raise ValueError(f"unknown policy family {family!r}")


def make_features(spec: dict, mdp: TabularMDP):
    if spec.get("kind", "one_hot") == "one_hot":
        return one_hot(mdp.num_states, mdp.num_actions)
    return random_fourier(mdp.num_states, mdp.num_actions, int(spec["dim"]),
                          float(spec.get("bandwidth", 1.0)), int(spec.get("seed", 0)))


def trial_seed(seed: int, trial: int) -> int:
    return seed ^ trial


def _child_seed(base: int, *keys: int) -> int:
    return int(np.random.SeedSequence([base, *keys]).generate_state(1)[0])


@dataclass(frozen=True)
class _Setup:
    cfg: ExperimentConfig
    mdp: TabularMDP
    behavior: TabularPolicy
    targets: tuple
    truths: tuple


def _setup(cfg: ExperimentConfig) -> _Setup:
    mdp = make_env(cfg.env)
    behavior = make_family_policy(mdp, cfg.behavior)
    targets = tuple(make_family_policy(mdp, t) for t in cfg.targets)
    truths = tuple(exact_policy_value(mdp, t) for t in targets)
    return _Setup(cfg, mdp, behavior, targets, truths)


def _dataset(setup: _Setup, n: int, base: int, n_idx: int):
    h = setup.cfg.horizon
    return sample_dataset(setup.mdp, setup.behavior, n // h, h, _child_seed(base, n_idx, 0),
                          behavior_spec=setup.cfg.behavior)


def _bayesdice_samples(setup: _Setup, ds, base: int, n_idx: int) -> np.ndarray:
    """Posterior value draws, one row per target."""
    cfg = setup.cfg
    fm = make_features(cfg.features, setup.mdp)
    rows = []
    for j, target in enumerate(setup.targets):
        bcfg = BayesDiceConfig(**{**cfg.bayesdice, "seed": _child_seed(base, n_idx, 1, j)})
        post = train_posterior(ds, target, fm, bcfg)
        rows.append(sample_policy_values(post, ds, cfg.num_draws, _child_seed(base, n_idx, 2, j)))
    return np.vstack(rows)


# ---------------------------------------------------------------------------
# coverage


def _coverage_trial(setup: _Setup, trial: int) -> list[dict]:
    cfg = setup.cfg
    base = trial_seed(cfg.seed, trial)
    out = []
    for n_idx, n in enumerate(cfg.sizes):
        ds = _dataset(setup, n, base, n_idx)
        bd = _bayesdice_samples(setup, ds, base, n_idx) if "bayesdice" in cfg.methods else None
        for j, target in enumerate(setup.targets):
            est = None
            if any(m.startswith("wis") for m in cfg.methods):
                est = baselines.wis_per_trajectory(ds, setup.behavior, target, setup.mdp.gamma)
            for method in cfg.methods:
                for c in cfg.confidence_levels:
                    if method == "bayesdice":
                        lo, hi = interval_from_samples(bd[j], c)
                    elif method == "wis_t":
                        lo, hi = baselines.t_interval(est, c)
                    elif method == "wis_bernstein":
                        lo, hi = baselines.bernstein_interval(est, c)
                    else:
                        lo, hi = baselines.bootstrap_bc_interval(
                            est, c, cfg.bootstrap_resamples, _child_seed(base, n_idx, 3, j))
                    truth = setup.truths[j]
                    out.append({"method": method, "target": j, "n": n, "confidence": c,
                                "trial": trial, "lo": lo, "hi": hi, "truth": truth,
                                "covered": int(lo <= truth <= hi)})
    return out


def _map_trials(fn, setup: _Setup, workers: int) -> list:
    trials = range(setup.cfg.trials)
    if workers <= 1:
        return [fn(setup, t) for t in trials]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, [setup] * len(trials), trials))


def _log_width(lo: float, hi: float) -> float:
    return math.log(hi - lo) if hi > lo else -math.inf


def summarize_coverage(trial_rows: list[dict]) -> list[dict]:
    groups: dict = {}
    for r in trial_rows:
        groups.setdefault((r["method"], r["target"], r["n"], r["confidence"]), []).append(r)
    out = []
    for (method, target, n, c), rows in groups.items():
        out.append({
            "method": method, "target": target, "n": n, "confidence": c,
            "coverage": sum(r["covered"] for r in rows) / len(rows),
            "median_log_width": statistics.median(_log_width(r["lo"], r["hi"]) for r in rows),
            "trials": len(rows),
        })
    out.sort(key=lambda r: (r["method"], r["n"], r["target"], r["confidence"]))
    return out


def _write_csv(path, columns, rows) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=columns, lineterminator="\n", extrasaction="ignore")
        w.writeheader()
        w.writerows(rows)


def trials_path(path) -> Path:
    path = Path(path)
    return path.with_name(path.stem + ".trials" + path.suffix)


def run_coverage(cfg: ExperimentConfig, out=None) -> list[dict]:
    """Coverage and median log-width per (method, target, n, confidence).

    Writes the summary to ``out`` (or ``cfg.output``) and per-trial intervals
    next to it with a ``.trials`` suffix.
    """
    if cfg.experiment != "coverage":
        raise ConfigError([f"run_coverage needs experiment 'coverage', got {cfg.experiment!r}"])
    cfg.validate()
    setup = _setup(cfg)
    rows = [r for chunk in _map_trials(_coverage_trial, setup, cfg.workers) for r in chunk]
    rows.sort(key=lambda r: (r["method"], r["n"], r["trial"], r["target"], r["confidence"]))
    summary = summarize_coverage(rows)
    out = out or cfg.output
    if out:
        _write_csv(out, COVERAGE_COLUMNS, summary)
        _write_csv(trials_path(out), COVERAGE_TRIAL_COLUMNS, rows)
    return summary


# ---------------------------------------------------------------------------
# selection


def _mode(cfg: ExperimentConfig, spec: RankingScoreSpec, num_policies: int) -> str:
    if cfg.selection_mode != "auto":
        return cfg.selection_mode
    if spec.set_based:
        return "set_enumeration"
    return "exhaustive" if num_policies <= 8 else "greedy"


def _selection_trial(setup: _Setup, trial: int) -> list[dict]:
    cfg = setup.cfg
    base = trial_seed(cfg.seed, trial)
    specs = cfg.score_specs()
    num = len(setup.targets)
    out = []
    for n_idx, n in enumerate(cfg.sizes):
        ds = _dataset(setup, n, base, n_idx)
        rankings = {}
        needs_posterior = any(m in POINT_STATISTICS or m == "bayesdice" for m in cfg.methods)
        vs = ValueSampleMatrix(_bayesdice_samples(setup, ds, base, n_idx)) if needs_posterior else None
        for method in cfg.methods:
            if method in POINT_STATISTICS:
                rankings[method] = point_estimate_ranking(vs, POINT_STATISTICS[method])
                continue
            if method == "oracle":
                samples = bandit_conjugate_oracle(ds, setup.targets, *cfg.oracle_prior,
                                                  num_draws=cfg.num_draws,
                                                  seed=_child_seed(base, n_idx, 4))
            else:
                samples = vs
            # one ranking per selection score, each evaluated under every score
            for sel in specs:
                ranking, _ = offline_select(samples, sel, _mode(cfg, sel, num))
                rankings[f"{method}[{sel.label}]"] = ranking
        for name, ranking in rankings.items():
            for spec in specs:
                out.append({"method": name, "score_kind": spec.kind, "k": spec.k, "n": n,
                            "trial": trial,
                            "value": score_ranking(ranking.order, setup.truths, spec)})
    return out


def run_selection(cfg: ExperimentConfig, out=None) -> list[dict]:
    """Groundtruth score of each method's ranking, one row per trial.

    ``bayesdice[S]`` and ``oracle[S]`` are offline selection with score ``S``
    on BayesDICE or conjugate posterior draws; ``*_rank`` methods sort the
    BayesDICE draws by a point statistic.
    """
    if cfg.experiment != "selection":
        raise ConfigError([f"run_selection needs experiment 'selection', got {cfg.experiment!r}"])
    cfg.validate()
    setup = _setup(cfg)
    rows = [r for chunk in _map_trials(_selection_trial, setup, cfg.workers) for r in chunk]
    rows.sort(key=lambda r: (r["method"], r["n"], r["trial"], r["score_kind"], r["k"]))
    out = out or cfg.output
    if out:
        _write_csv(out, SELECTION_COLUMNS, rows)
    return rows


# ---------------------------------------------------------------------------
# reporting


class SchemaError(ValueError):
    pass


def _num(text: str, path, lineno: int) -> float:
    try:
        return float(text)
    except ValueError:
        raise SchemaError(f"{path}:{lineno}: {text!r} is not a number") from None


def _stderr(values: list[float]) -> float:
    return statistics.stdev(values) / math.sqrt(len(values)) if len(values) > 1 else 0.0


def report_summary(path, stream=None) -> list[dict]:
    """Aggregate a results CSV written by this module and print a table.

    Selection rows give mean and standard error per (method, score, n);
    per-trial coverage rows are re-aggregated; summary coverage rows are
    averaged over targets.
    """
    stream = sys.stdout if stream is None else stream
    with open(path, newline="") as f:
        reader = csv.reader(f)
        header = next(reader, None)
        if header is None:
            raise SchemaError(f"{path}: empty file (no header)")
        body = list(enumerate(reader, start=2))
    for lineno, row in body:
        if len(row) != len(header):
            raise SchemaError(f"{path}:{lineno}: expected {len(header)} fields, got {len(row)}")
    records = [(lineno, dict(zip(header, row))) for lineno, row in body]

    if header == SELECTION_COLUMNS:
        columns = ["method", "score_kind", "k", "n", "mean", "stderr", "trials"]
        groups: dict = {}
        for lineno, r in records:
            key = (r["method"], r["score_kind"], int(r["k"]), int(r["n"]))
            groups.setdefault(key, []).append(_num(r["value"], path, lineno))
        table = [dict(zip(columns, (*key, math.fsum(v) / len(v), _stderr(v), len(v))))
                 for key, v in sorted(groups.items())]
    elif header in (COVERAGE_TRIAL_COLUMNS, COVERAGE_COLUMNS):
        columns = ["method", "n", "confidence", "coverage", "median_log_width", "trials"]
        groups = {}
        for lineno, r in records:
            key = (r["method"], int(r["n"]), _num(r["confidence"], path, lineno))
            groups.setdefault(key, []).append((lineno, r))
        table = []
        for key, rows in sorted(groups.items()):
            if header == COVERAGE_TRIAL_COLUMNS:
                cov = [_num(r["covered"], path, i) for i, r in rows]
                widths = [_log_width(_num(r["lo"], path, i), _num(r["hi"], path, i)) for i, r in rows]
                stats = (math.fsum(cov) / len(cov), statistics.median(widths), len(rows))
            else:
                cov = [_num(r["coverage"], path, i) for i, r in rows]
                widths = [_num(r["median_log_width"], path, i) for i, r in rows]
                stats = (math.fsum(cov) / len(cov), math.fsum(widths) / len(widths),
                         int(_num(rows[0][1]["trials"], path, rows[0][0])))
            table.append(dict(zip(columns, (*key, *stats))))
    else:
        raise SchemaError(f"{path}: unrecognized columns {header}")

    cells = [columns] + [[_fmt(r[c]) for c in columns] for r in table]
    widths = [max(len(row[i]) for row in cells) for i in range(len(columns))]
    for row in cells:
        stream.write("  ".join(v.ljust(w) for v, w in zip(row, widths)).rstrip() + "\n")
    return table


def _fmt(x) -> str:
    return f"{x:.6g}" if isinstance(x, float) else str(x)
