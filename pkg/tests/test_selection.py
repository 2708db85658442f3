import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from bayesdice.data import sample_dataset
from bayesdice.estimator import ValueSampleMatrix
from bayesdice.mdp import PolicyFamilySpec, build_bandit, make_policy
from bayesdice.selection import (Ranking, RankingScoreSpec, bandit_conjugate_oracle, expected_score,
                                 offline_select, point_estimate_ranking, rank_by_scores, score_ranking)

KINDS = ("precision", "accuracy", "correlation", "regret")


def reference_score(order, truth, kind, k):
    """Direct per-definition scoring; truth ties broken by the lower index."""
    n = len(truth)
    true_order = sorted(range(n), key=lambda i: (-truth[i], i))
    true_rank = {p: r + 1 for r, p in enumerate(true_order)}
    top = list(order[:k])
    if kind == "precision":
        return len(set(top) & set(true_order[:k])) / k
    if kind == "accuracy":
        return sum(top[j] == true_order[j] for j in range(k)) / k
    if kind == "regret":
        return max(truth) - max(truth[i] for i in top)
    x = np.arange(1, k + 1, dtype=float)
    y = np.array([true_rank[i] for i in top], dtype=float)
    return float(np.corrcoef(x, y)[0, 1])


def test_scores_match_reference_on_random_cases():
    rng = np.random.default_rng(0)
    for _ in range(1000):
        truth = rng.random(4)
        if rng.random() < 0.2:
            truth = np.round(truth, 1)  # exercise ties
        order = rng.permutation(4)
        kind = KINDS[rng.integers(4)]
        k = int(rng.integers(2 if kind == "correlation" else 1, 5))
        got = score_ranking(order, truth, RankingScoreSpec(kind, k))
        assert got == pytest.approx(reference_score(list(order), list(truth), kind, k), abs=1e-12)


def test_spec_parsing_and_validation():
    s = RankingScoreSpec.parse("regret@1")
    assert s.kind == "regret_at_k" and s.k == 1 and not s.maximize and s.label == "regret@1"
    assert RankingScoreSpec.parse("precision_at_k@2").maximize
    for bad in ("regret", "regret@0", "bogus@1", "correlation@1"):
        with pytest.raises(ValueError):
            RankingScoreSpec.parse(bad)
    with pytest.raises(ValueError):
        score_ranking([0, 1], [0.1, 0.2], RankingScoreSpec("precision", 3))
    with pytest.raises(ValueError):
        Ranking((0, 0, 1))


def _brute_force(samples, spec):
    """Best average over all full rankings, ties to the lexicographically smallest."""
    best, best_order = None, None
    truthless = samples.T
    for perm in itertools.permutations(range(samples.shape[0])):
        v = np.mean([score_ranking(perm, row, spec) for row in truthless])
        if best is None or (v > best + 1e-12 if spec.maximize else v < best - 1e-12):
            best, best_order = v, perm
    return best, best_order


@pytest.mark.parametrize("kind,k", [("precision", 1), ("precision", 2), ("accuracy", 2),
                                    ("correlation", 3), ("regret", 1), ("regret", 2)])
def test_offline_select_is_optimal(kind, k):
    rng = np.random.default_rng(hash((kind, k)) % 2**32)
    spec = RankingScoreSpec(kind, k)
    for _ in range(5):
        samples = rng.normal(size=(4, 30)) * 0.2 + rng.random((4, 1))
        vs = ValueSampleMatrix(samples)
        ranking, value = offline_select(vs, spec)
        best, best_order = _brute_force(samples, spec)
        assert value == pytest.approx(best, abs=1e-12)
        assert ranking.order == best_order
        # every enumerated full ranking scores no better on the same draws
        for perm in itertools.permutations(range(4)):
            other = expected_score(vs, Ranking(perm), spec)
            assert (other <= value) if spec.maximize else (other >= value)


@pytest.mark.parametrize("kind,k", [("precision", 2), ("regret", 1), ("regret", 3)])
def test_set_enumeration_agrees_with_exhaustive(kind, k):
    spec = RankingScoreSpec(kind, k)
    samples = np.random.default_rng(7).normal(size=(6, 50))
    a, va = offline_select(ValueSampleMatrix(samples), spec, "exhaustive")
    b, vb = offline_select(ValueSampleMatrix(samples), spec, "set_enumeration")
    assert va == vb
    assert set(a.order[:k]) == set(b.order[:k])
    with pytest.raises(ValueError):
        offline_select(ValueSampleMatrix(samples), RankingScoreSpec("accuracy", 2), "set_enumeration")


def test_greedy_mode_and_size_limit():
    samples = np.random.default_rng(8).normal(size=(10, 40))
    ranking, value = offline_select(ValueSampleMatrix(samples), RankingScoreSpec("regret", 1), "greedy")
    # a single position is searched exhaustively, so k = 1 is exact
    assert ranking.order[0] == int(np.argmax(samples.mean(axis=1)))
    assert value == expected_score(ValueSampleMatrix(samples), ranking, RankingScoreSpec("regret", 1))
    with pytest.raises(ValueError, match="at most"):
        offline_select(ValueSampleMatrix(samples), RankingScoreSpec("regret", 1), "exhaustive")


def test_regret_at_one_prefers_highest_mean():
    # E[max_j v_j - v_i] = E[max] - mean_i, so the best top-1 is the highest mean
    samples = np.random.default_rng(9).normal(size=(5, 200))
    ranking, _ = offline_select(ValueSampleMatrix(samples), RankingScoreSpec("regret", 1))
    assert ranking.order[0] == int(np.argmax(samples.mean(axis=1)))


@settings(max_examples=60, deadline=None)
@given(arrays(np.float64, (4, 6), elements=st.floats(0, 1)),
       st.sampled_from([("precision", 1), ("precision", 2), ("accuracy", 1), ("accuracy", 3),
                        ("correlation", 2), ("correlation", 4), ("regret", 1), ("regret", 2)]))
def test_offline_select_never_beaten_property(samples, kind_k):
    spec = RankingScoreSpec(*kind_k)
    vs = ValueSampleMatrix(samples)
    ranking, value = offline_select(vs, spec)
    assert expected_score(vs, ranking, spec) == value
    for perm in itertools.permutations(range(4)):
        other = expected_score(vs, Ranking(perm), spec)
        assert (other <= value) if spec.maximize else (other >= value)


@settings(max_examples=60, deadline=None)
@given(arrays(np.float64, 5, elements=st.floats(-1, 1)))
def test_true_order_scores_perfectly(truth):
    order = rank_by_scores(truth).order
    for kind in KINDS:
        for k in range(2 if kind == "correlation" else 1, 6):
            expected = 0.0 if kind == "regret" else 1.0
            assert score_ranking(order, truth, RankingScoreSpec(kind, k)) == pytest.approx(expected)


def test_point_estimate_rankings():
    samples = np.array([[0.0, 1.0, 2.0, 3.0], [1.4, 1.6, 1.4, 1.6], [1.0, 1.0, 1.0, 1.0]])
    vs = ValueSampleMatrix(samples)
    assert point_estimate_ranking(vs, "mean").order == (0, 1, 2)
    assert point_estimate_ranking(vs, "mean_minus_std").order == (1, 2, 0)
    assert point_estimate_ranking(vs, "mean_plus_std").order == (0, 1, 2)
    assert point_estimate_ranking(vs, "quantile(0.1)").order == point_estimate_ranking(vs, ("quantile", 0.1)).order
    assert rank_by_scores([1.0, 2.0, 2.0]).order == (1, 2, 0)
    with pytest.raises(ValueError):
        point_estimate_ranking(vs, "median-ish")


def test_conjugate_oracle_matches_beta_posterior():
    mdp = build_bandit()
    ds = sample_dataset(mdp, make_policy(mdp, PolicyFamilySpec("bandit_alpha", 0.5)), 300, 1, seed=3)
    targets = [make_policy(mdp, PolicyFamilySpec("bandit_alpha", a)) for a in (1.0, 0.0, 0.6)]
    vs = bandit_conjugate_oracle(ds, targets, num_draws=200_000, seed=0)
    wins = [ds.rewards[ds.actions == a].sum() for a in (0, 1)]
    pulls = [(ds.actions == a).sum() for a in (0, 1)]
    means = [(1 + w) / (2 + p) for w, p in zip(wins, pulls)]
    assert vs.samples.mean(axis=1) == pytest.approx([means[0], means[1], 0.6 * means[0] + 0.4 * means[1]], abs=2e-3)
    again = bandit_conjugate_oracle(ds, targets, num_draws=200_000, seed=0)
    assert np.array_equal(vs.samples, again.samples)
    with pytest.raises(ValueError):
        bandit_conjugate_oracle(ds, targets, prior_a=0)
