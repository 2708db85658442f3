import numpy as np
import pytest

from bayesdice.mdp import (PolicyFamilySpec, SingularChainError, TabularMDP, bellman_flow_residual,
                           build_bandit, build_env, build_gridworld, exact_policy_value,
                           exact_visitation, greedy_policy, make_policy, primal_policy_value,
                           taxi_decode, taxi_encode, uniform_policy)


def _all_envs():
    yield build_bandit()
    for slip in (0.0, 1 / 3, 2 / 3):
        yield build_gridworld("frozenlake4x4", slip, gamma=0.99)
    yield build_gridworld("taxi5x5", 0.0, gamma=0.99)
    yield build_gridworld("taxi5x5", 0.2, gamma=0.95)


def _policies(mdp):
    if mdp.num_states == 1:
        return [make_policy(mdp, PolicyFamilySpec("bandit_alpha", a)) for a in (0.0, 0.3, 1.0)]
    g = greedy_policy(mdp)
    return [make_policy(mdp, PolicyFamilySpec("epsilon_greedy", e, g)) for e in (0.0, 0.1, 1.0)]


def test_bandit_value_is_mixture_of_arms():
    mdp = build_bandit(0.7, 0.3)
    for a in np.linspace(0, 1, 11):
        pi = make_policy(mdp, PolicyFamilySpec("bandit_alpha", a))
        assert exact_policy_value(mdp, pi) == pytest.approx(0.7 * a + 0.3 * (1 - a), abs=1e-12)


def test_frozenlake_no_slip_is_deterministic():
    mdp = build_gridworld("frozenlake4x4", 0.0)
    assert mdp.num_states == 16 and mdp.num_actions == 4
    assert np.all(np.isin(mdp.transition, (0.0, 1.0)))
    assert np.allclose(mdp.transition.sum(-1), 1.0)


def test_frozenlake_slip_stencil():
    mdp = build_gridworld("frozenlake4x4", 1 / 3)
    assert np.allclose(mdp.transition.sum(-1), 1.0)
    # state 6 (row 1, col 2) is interior and frozen: left, down, right, up land on 5, 10, 7, 2
    neighbours = {0: 5, 1: 10, 2: 7, 3: 2}
    for a, intended in neighbours.items():
        row = mdp.transition[6, a]
        assert np.count_nonzero(row) == 3
        assert row[intended] == pytest.approx(2 / 3)
        perp = [neighbours[b] for b in neighbours if (a - b) % 2 == 1]
        assert row[perp] == pytest.approx([1 / 6, 1 / 6])


def test_frozenlake_terminal_cells_restart_and_goal_pays():
    mdp = build_gridworld("frozenlake4x4", 0.0)
    for s in (5, 7, 11, 12, 15):
        assert np.allclose(mdp.transition[s], mdp.initial_dist)
    assert np.all(mdp.reward_mean[15] == 1.0)
    assert mdp.reward_mean.sum() == 4.0


def test_taxi_layout():
    mdp = build_gridworld("taxi5x5", 0.0)
    assert mdp.num_states == 500 and mdp.num_actions == 6
    assert np.allclose(mdp.transition.sum(-1), 1.0)
    assert mdp.reward_mean.min() >= 0.0 and mdp.reward_mean.max() <= 1.0
    for s in (0, 123, 499):
        assert taxi_encode(*taxi_decode(s)) == s


def test_build_env_by_id():
    assert build_env("bandit").num_states == 1
    assert build_env("frozenlake").num_states == 16
    with pytest.raises(ValueError):
        build_env("cartpole")
    with pytest.raises(ValueError):
        build_gridworld("frozenlake4x4", 1.5)


def test_policy_families():
    mdp = build_gridworld("frozenlake4x4", 0.0)
    g = greedy_policy(mdp)
    assert np.array_equal(make_policy(mdp, PolicyFamilySpec("epsilon_greedy", 0.0, g)).probs, g.probs)
    assert np.allclose(make_policy(mdp, PolicyFamilySpec("epsilon_greedy", 1.0, g)).probs,
                       uniform_policy(mdp).probs)
    with pytest.raises(ValueError):
        make_policy(mdp, PolicyFamilySpec("epsilon_greedy", 0.1))
    with pytest.raises(ValueError):
        PolicyFamilySpec("bandit_alpha", 1.2)
    b = build_bandit()
    assert np.allclose(make_policy(b, PolicyFamilySpec("bandit_alpha", 0.8)).probs, [[0.8, 0.2]])


def test_visitation_residual_and_primal_dual_agree():
    for mdp in _all_envs():
        for pi in _policies(mdp):
            d = exact_visitation(mdp, pi)
            assert np.abs(bellman_flow_residual(mdp, pi, d)).max() <= 1e-8
            assert abs(exact_policy_value(mdp, pi) - primal_policy_value(mdp, pi)) <= 1e-8


def test_undiscounted_reducible_chain_raises():
    t = np.zeros((2, 1, 2))
    t[0, 0, 0] = t[1, 0, 1] = 1.0  # two absorbing states
    mdp = TabularMDP(t, np.zeros((2, 1)), np.array([0.5, 0.5]), 1.0, "deterministic", "toy", {})
    from bayesdice.mdp import TabularPolicy
    with pytest.raises(SingularChainError):
        exact_visitation(mdp, TabularPolicy(np.ones((2, 1)), "only"))


def _rollout_values(mdp, pi, episodes, horizon, seed):
    """Plain Monte Carlo of the normalized discounted return."""
    rng = np.random.default_rng(seed)
    s = rng.choice(mdp.num_states, size=episodes, p=mdp.initial_dist)
    total = np.zeros(episodes)
    disc = 1.0
    for _ in range(horizon):
        u = rng.random(episodes)
        a = (u[:, None] > np.cumsum(pi.probs[s], axis=1)).sum(axis=1)
        a = np.minimum(a, mdp.num_actions - 1)
        total += disc * mdp.reward_mean[s, a]
        u = rng.random(episodes)
        s = np.minimum((u[:, None] > np.cumsum(mdp.transition[s, a], axis=1)).sum(axis=1),
                       mdp.num_states - 1)
        disc *= mdp.gamma
    return (1.0 - mdp.gamma) * total


@pytest.mark.slow
def test_frozenlake_value_matches_rollouts():
    mdp = build_gridworld("frozenlake4x4", 1 / 3, gamma=0.99)
    pi = make_policy(mdp, PolicyFamilySpec("epsilon_greedy", 0.1, greedy_policy(mdp)))
    v = _rollout_values(mdp, pi, 20_000, 2000, seed=7)  # 0.99^2000 ~ 2e-9
    se = v.std(ddof=1) / np.sqrt(v.size)
    assert abs(v.mean() - exact_policy_value(mdp, pi)) <= 3 * se
