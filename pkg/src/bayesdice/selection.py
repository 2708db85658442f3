"""Ranking scores, posterior-simulation policy selection and point-estimate rankings.

Policies are identified by their 0-based row index in a value-sample matrix;
a ranking lists indices best first.
"""
from __future__ import annotations

import itertools
import math
import re
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .data import TupleDataset
from .estimator import ValueSampleMatrix
from .mdp import TabularPolicy

PRECISION = "precision_at_k"
ACCURACY = "accuracy_at_k"
CORRELATION = "correlation_at_k"
REGRET = "regret_at_k"
SCORE_KINDS = (PRECISION, ACCURACY, CORRELATION, REGRET)
_SHORT = {"precision": PRECISION, "accuracy": ACCURACY, "correlation": CORRELATION,
          "regret": REGRET}

MAX_EXHAUSTIVE = 8


@dataclass(frozen=True)
class Ranking:
    order: tuple

    def __post_init__(self):
        order = tuple(int(i) for i in self.order)
        if sorted(order) != list(range(len(order))):
            raise ValueError(f"ranking {order} is not a permutation of 0..{len(order) - 1}")
        object.__setattr__(self, "order", order)

    def __len__(self) -> int:
        return len(self.order)

    def __iter__(self):
        return iter(self.order)

    def to_list(self) -> list[int]:
        return list(self.order)


@dataclass(frozen=True)
class RankingScoreSpec:
    kind: str
    k: int

    def __post_init__(self):
        kind = _SHORT.get(self.kind, self.kind)
        if kind not in SCORE_KINDS:
            raise ValueError(f"unknown ranking score {self.kind!r}")
        if self.k < 1:
            raise ValueError(f"k must be >= 1, got {self.k}")
        if kind == CORRELATION and self.k < 2:
            raise ValueError("correlation@k needs k >= 2 (Pearson is undefined for one point)")
        object.__setattr__(self, "kind", kind)

    @property
    def maximize(self) -> bool:
        return self.kind != REGRET

    @property
    def orientation(self) -> str:
        return "maximize" if self.maximize else "minimize"

    @property
    def set_based(self) -> bool:
        """Whether the score ignores order inside the top k and inside the rest."""
        return self.kind in (PRECISION, REGRET)

    @property
    def label(self) -> str:
        return f"{self.kind.split('_')[0]}@{self.k}"

    def check(self, num_policies: int) -> None:
        if self.k > num_policies:
            raise ValueError(f"k={self.k} exceeds the number of policies {num_policies}")

    @classmethod
    def parse(cls, text: str) -> "RankingScoreSpec":
        """Parse ``"regret@1"`` or ``"precision_at_k@2"``."""
        m = re.fullmatch(r"\s*([a-z_]+)\s*@\s*(\d+)\s*", text)
        if not m:
            raise ValueError(f"cannot parse ranking score {text!r}; expected e.g. 'regret@1'")
        return cls(m.group(1), int(m.group(2)))


class _Draws:
    """Per-draw groundtruth orders and ranks shared by every candidate ranking."""

    def __init__(self, values: np.ndarray):
        v = np.atleast_2d(np.asarray(values, dtype=float))
        if not np.isfinite(v).all():
            raise ValueError("policy values must be finite")
        self.values = v
        # stable sort: ties go to the lower index
        self.order = np.argsort(-v, axis=1, kind="stable")
        self.rank = np.empty_like(self.order)
        rows = np.arange(v.shape[0])[:, None]
        self.rank[rows, self.order] = np.arange(v.shape[1])
        self.best = v.max(axis=1)

    def score(self, prefix: Sequence[int], spec: RankingScoreSpec) -> np.ndarray:
        """Per-draw score of any ranking starting with ``prefix`` (length k)."""
        k = spec.k
        prefix = list(prefix)
        if spec.kind == PRECISION:
            hits = np.zeros(self.values.shape[0])
            for i in prefix:
                hits += self.rank[:, i] < k
            return hits / k
        if spec.kind == ACCURACY:
            hits = np.zeros(self.values.shape[0])
            for j, i in enumerate(prefix):
                hits += self.order[:, j] == i
            return hits / k
        if spec.kind == REGRET:
            return self.best - self.values[:, prefix].max(axis=1)
        # Pearson correlation of positions 1..k with the true ranks placed there
        ranks = [self.rank[:, i] + 1.0 for i in prefix]
        x_mean = (k + 1) / 2.0
        y_mean = sum(ranks) / k
        sxx = sum((j + 1 - x_mean) ** 2 for j in range(k))
        sxy = sum((j + 1 - x_mean) * (y - y_mean) for j, y in enumerate(ranks))
        syy = sum((y - y_mean) ** 2 for y in ranks)
        return sxy / np.sqrt(sxx * syy)


def _mean(per_draw: np.ndarray) -> float:
    # correctly rounded, so equal per-draw scores give bit-equal averages
    return math.fsum(per_draw.tolist()) / per_draw.size


def score_ranking(order, truth_means, spec: RankingScoreSpec) -> float:
    """Groundtruth score of a ranking under the given per-policy means."""
    truth = np.asarray(truth_means, dtype=float).reshape(-1)
    order = Ranking(tuple(order))
    if len(order) != truth.size:
        raise ValueError(f"ranking has {len(order)} entries for {truth.size} policies")
    spec.check(truth.size)
    return float(_Draws(truth[None, :]).score(order.order[: spec.k], spec)[0])


def _complete(prefix: Sequence[int], n: int) -> Ranking:
    rest = sorted(set(range(n)) - set(prefix))
    return Ranking(tuple(prefix) + tuple(rest))


def offline_select(value_samples: ValueSampleMatrix, spec: RankingScoreSpec,
                   mode: str = "exhaustive") -> tuple[Ranking, float]:
    """Ranking with the best Monte Carlo average score over posterior draws.

    Every draw scores every candidate (common random numbers). Ties go to
    the lexicographically smallest ranking.

    ``exhaustive`` searches all rankings (N <= 8). Every score depends on a
    ranking only through its first k entries, so rankings sharing that prefix
    are scored once. ``set_enumeration`` searches top-k subsets and is valid
    for precision and regret only. ``greedy`` fills positions one at a time
    and has no optimality guarantee.
    """
    samples = value_samples.samples if isinstance(value_samples, ValueSampleMatrix) \
        else np.atleast_2d(np.asarray(value_samples, dtype=float))
    if samples.size == 0:
        raise ValueError("empty value-sample matrix")
    n = samples.shape[0]
    spec.check(n)
    draws = _Draws(samples.T)
    if mode == "exhaustive":
        if n > MAX_EXHAUSTIVE:
            raise ValueError(f"exhaustive selection supports at most {MAX_EXHAUSTIVE} policies, got {n}")
        candidates = itertools.permutations(range(n), spec.k)
    elif mode == "set_enumeration":
        if not spec.set_based:
            raise ValueError(f"set_enumeration is not valid for {spec.kind}")
        candidates = itertools.combinations(range(n), spec.k)
    elif mode == "greedy":
        return _greedy_select(draws, spec, samples)
    else:
        raise ValueError(f"unknown selection mode {mode!r}")

    best_prefix, best = None, None
    for prefix in candidates:
        value = _mean(draws.score(prefix, spec))
        if best is None or (value > best if spec.maximize else value < best):
            best_prefix, best = prefix, value
    return _complete(best_prefix, n), best


def _greedy_select(draws: _Draws, spec: RankingScoreSpec, samples: np.ndarray):
    n = samples.shape[0]
    fallback = list(np.argsort(-samples.mean(axis=1), kind="stable"))
    prefix: list[int] = []
    for _ in range(spec.k):
        best_i, best = None, None
        for i in range(n):
            if i in prefix:
                continue
            trial = prefix + [i]
            trial += [j for j in fallback if j not in trial][: spec.k - len(trial)]
            value = _mean(draws.score(trial, spec))
            if best is None or (value > best if spec.maximize else value < best):
                best_i, best = i, value
        prefix.append(best_i)
    return _complete(prefix, n), _mean(draws.score(prefix, spec))


def expected_score(value_samples: ValueSampleMatrix, ranking: Ranking,
                   spec: RankingScoreSpec) -> float:
    """Monte Carlo average score of a fixed ranking over the posterior draws."""
    samples = value_samples.samples
    spec.check(samples.shape[0])
    return _mean(_Draws(samples.T).score(Ranking(ranking.order).order[: spec.k], spec))


def _statistic(samples: np.ndarray, statistic) -> np.ndarray:
    if isinstance(statistic, tuple):
        name, q = statistic
        if name != "quantile":
            raise ValueError(f"unknown statistic {statistic!r}")
        return np.quantile(samples, float(q), axis=1)
    m = re.fullmatch(r"quantile\(([0-9.eE+-]+)\)", str(statistic))
    if m:
        return np.quantile(samples, float(m.group(1)), axis=1)
    mean = samples.mean(axis=1)
    if statistic == "mean":
        return mean
    std = samples.std(axis=1)
    if statistic == "mean_plus_std":
        return mean + std
    if statistic == "mean_minus_std":
        return mean - std
    raise ValueError(f"unknown statistic {statistic!r}")


def point_estimate_ranking(value_samples: ValueSampleMatrix, statistic="mean") -> Ranking:
    """Sort policies by a per-policy summary statistic, best first; ties by index."""
    samples = value_samples.samples
    stat = _statistic(samples, statistic)
    return Ranking(tuple(np.argsort(-stat, kind="stable")))


def rank_by_scores(scores) -> Ranking:
    """Descending sort of utilities, ties to the lower index."""
    return Ranking(tuple(np.argsort(-np.asarray(scores, dtype=float), kind="stable")))


def bandit_conjugate_oracle(ds: TupleDataset, targets: Sequence[TabularPolicy],
                            prior_a: float = 1.0, prior_b: float = 1.0,
                            num_draws: int = 10_000, seed: int = 0) -> ValueSampleMatrix:
    """Exact Beta-Bernoulli posterior over two-armed bandit policy values.

    Arm means share one posterior draw across policies, so the rows are
    jointly (not independently) distributed.
    """
    if ds.num_states != 1 or ds.num_actions != 2 or ds.meta.get("env") not in (None, "bandit"):
        raise ValueError("the conjugate oracle needs data from the two-armed bandit")
    if prior_a <= 0 or prior_b <= 0:
        raise ValueError("Beta prior parameters must be positive")
    r = ds.rewards
    if ((r != 0) & (r != 1)).any():
        raise ValueError("the conjugate oracle needs 0/1 rewards")
    pulls = np.bincount(ds.actions, minlength=2)
    wins = np.bincount(ds.actions, weights=r, minlength=2)
    rng = np.random.default_rng(seed)
    arms = rng.beta(prior_a + wins, prior_b + pulls - wins, size=(num_draws, 2))
    probs = np.vstack([t.probs[0] for t in targets])
    return ValueSampleMatrix(probs @ arms.T, tuple(t.name for t in targets))
