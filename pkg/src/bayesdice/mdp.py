"""Finite MDPs, environment builders and exact dynamic-programming solvers.

The solvers here are the groundtruth oracles for everything else in the
package: visitation distributions, policy values and Q-functions are
obtained from dense linear solves, never from sampling.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

PROB_ATOL = 1e-9

DETERMINISTIC = "deterministic"
BERNOULLI = "bernoulli"


class SingularChainError(np.linalg.LinAlgError):
    """Raised when the visitation system has no unique solution."""


@dataclass(frozen=True, eq=False)
class TabularMDP:
    """Finite MDP ``<S, A, R, T, mu0, gamma>``.

    ``transition[s, a, s']`` is the next-state distribution and
    ``reward_mean[s, a]`` the expected immediate reward. With
    ``reward_kind == "bernoulli"`` realized rewards are 0/1 draws.
    """

    transition: np.ndarray
    reward_mean: np.ndarray
    initial_dist: np.ndarray
    gamma: float
    reward_kind: str = DETERMINISTIC
    name: str = "mdp"
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        t = np.array(self.transition, dtype=float)
        r = np.array(self.reward_mean, dtype=float)
        mu0 = np.array(self.initial_dist, dtype=float)
        if t.ndim != 3 or t.shape[0] != t.shape[2]:
            raise ValueError(f"transition must be [S, A, S], got shape {t.shape}")
        if r.shape != t.shape[:2]:
            raise ValueError(f"reward_mean shape {r.shape} does not match {t.shape[:2]}")
        if mu0.shape != (t.shape[0],):
            raise ValueError(f"initial_dist shape {mu0.shape} does not match S={t.shape[0]}")
        if (t < 0).any() or not np.allclose(t.sum(axis=2), 1.0, atol=PROB_ATOL, rtol=0):
            raise ValueError("every transition[s, a] row must be a probability vector")
        if (mu0 < 0).any() or abs(mu0.sum() - 1.0) > PROB_ATOL:
            raise ValueError("initial_dist must be a probability vector")
        if not 0.0 < self.gamma <= 1.0:
            raise ValueError(f"gamma must lie in (0, 1], got {self.gamma}")
        if self.reward_kind not in (DETERMINISTIC, BERNOULLI):
            raise ValueError(f"unknown reward_kind {self.reward_kind!r}")
        if self.reward_kind == BERNOULLI and ((r < 0) | (r > 1)).any():
            raise ValueError("bernoulli reward means must lie in [0, 1]")
        for arr in (t, r, mu0):
            arr.flags.writeable = False
        object.__setattr__(self, "transition", t)
        object.__setattr__(self, "reward_mean", r)
        object.__setattr__(self, "initial_dist", mu0)
        object.__setattr__(self, "gamma", float(self.gamma))

    @property
    def num_states(self) -> int:
        return self.transition.shape[0]

    @property
    def num_actions(self) -> int:
        return self.transition.shape[1]

    @property
    def env_id(self) -> str:
        return self.name


@dataclass(frozen=True, eq=False)
class TabularPolicy:
    probs: np.ndarray
    name: str = "policy"

    def __post_init__(self):
        p = np.array(self.probs, dtype=float)
        if p.ndim != 2:
            raise ValueError(f"policy probs must be [S, A], got shape {p.shape}")
        if (p < 0).any() or not np.allclose(p.sum(axis=1), 1.0, atol=PROB_ATOL, rtol=0):
            raise ValueError("every policy row must be a probability vector")
        p.flags.writeable = False
        object.__setattr__(self, "probs", p)

    @property
    def num_states(self) -> int:
        return self.probs.shape[0]

    @property
    def num_actions(self) -> int:
        return self.probs.shape[1]


@dataclass(frozen=True)
class PolicyFamilySpec:
    family: str
    alpha_or_epsilon: float
    base_policy: Optional[TabularPolicy] = None

    def __post_init__(self):
        if self.family not in ("bandit_alpha", "epsilon_greedy"):
            raise ValueError(f"unknown policy family {self.family!r}")
        if not 0.0 <= self.alpha_or_epsilon <= 1.0:
            raise ValueError(f"alpha/epsilon must lie in [0, 1], got {self.alpha_or_epsilon}")


# ---------------------------------------------------------------------------
# environment builders


def build_bandit(p_opt: float = 0.7, p_sub: float = 0.3, gamma: float = 0.9) -> TabularMDP:
    """Two-armed Bernoulli bandit as a single-state MDP; arm 0 is optimal."""
    for p in (p_opt, p_sub):
        if not 0.0 <= p <= 1.0:
            raise ValueError(f"arm means must lie in [0, 1], got {p}")
    if p_opt < p_sub:
        raise ValueError(f"arm 0 must be optimal: p_opt={p_opt} < p_sub={p_sub}")
    return TabularMDP(
        transition=np.ones((1, 2, 1)),
        reward_mean=np.array([[p_opt, p_sub]]),
        initial_dist=np.ones(1),
        gamma=gamma,
        reward_kind=BERNOULLI,
        name="bandit",
        params={"p_opt": p_opt, "p_sub": p_sub, "gamma": gamma},
    )


FROZENLAKE_4X4 = ("SFFF", "FHFH", "FFFH", "HFFG")
# gym action order: left, down, right, up
_LAKE_MOVES = ((0, -1), (1, 0), (0, 1), (-1, 0))

TAXI_MAP = (
    "+---------+",
    "|R: | : :G|",
    "| : | : : |",
    "| : : : : |",
    "| | : | : |",
    "|Y| : |B: |",
    "+---------+",
)
TAXI_LOCS = ((0, 0), (0, 4), (4, 0), (4, 3))
# gym action order: south, north, east, west, pickup, dropoff
_TAXI_MOVES = ((1, 0), (-1, 0), (0, 1), (0, -1))


def _slip_stencil(action: int, slip_prob: float, moves) -> list[tuple[int, float]]:
    """Intended move keeps 1 - slip_prob; the rest splits over the two perpendicular moves."""
    dr, dc = moves[action]
    perp = [i for i, (r, c) in enumerate(moves) if r * dr + c * dc == 0]
    out = [(action, 1.0 - slip_prob)]
    out += [(p, slip_prob / len(perp)) for p in perp]
    return [(a, p) for a, p in out if p > 0]


def _frozenlake(slip_prob: float, gamma: float) -> TabularMDP:
    desc = FROZENLAKE_4X4
    nrow, ncol = len(desc), len(desc[0])
    ns, na = nrow * ncol, 4
    mu0 = np.zeros(ns)
    mu0[0] = 1.0
    t = np.zeros((ns, na, ns))
    r = np.zeros((ns, na))
    for s in range(ns):
        row, col = divmod(s, ncol)
        cell = desc[row][col]
        if cell in "GH":
            # terminal cells restart the episode
            t[s, :, :] = mu0
            r[s, :] = 1.0 if cell == "G" else 0.0
            continue
        for a in range(na):
            for move, p in _slip_stencil(a, slip_prob, _LAKE_MOVES):
                dr, dc = _LAKE_MOVES[move]
                nr = min(max(row + dr, 0), nrow - 1)
                nc = min(max(col + dc, 0), ncol - 1)
                t[s, a, nr * ncol + nc] += p
    return TabularMDP(t, r, mu0, gamma, DETERMINISTIC, "frozenlake",
                      {"slip_prob": slip_prob, "gamma": gamma})


def taxi_encode(row: int, col: int, pass_loc: int, dest: int) -> int:
    return ((row * 5 + col) * 5 + pass_loc) * 4 + dest


def taxi_decode(s: int) -> tuple[int, int, int, int]:
    s, dest = divmod(s, 4)
    s, pass_loc = divmod(s, 5)
    row, col = divmod(s, 5)
    return row, col, pass_loc, dest


def _taxi(slip_prob: float, gamma: float) -> TabularMDP:
    ns, na = 500, 6
    mu0 = np.zeros(ns)
    for row in range(5):
        for col in range(5):
            for p in range(4):
                for d in range(4):
                    if p != d:
                        mu0[taxi_encode(row, col, p, d)] = 1.0
    mu0 /= mu0.sum()

    def move(row, col, a):
        dr, dc = _TAXI_MOVES[a]
        if dc == 1 and TAXI_MAP[1 + row][2 * col + 2] != ":":
            return row, col
        if dc == -1 and TAXI_MAP[1 + row][2 * col] != ":":
            return row, col
        return min(max(row + dr, 0), 4), min(max(col + dc, 0), 4)

    # raw rewards -1 step, +20 delivery, -10 illegal; scaled by (r + 10) / 30
    step, deliver, illegal = 9.0 / 30.0, 1.0, 0.0
    t = np.zeros((ns, na, ns))
    r = np.zeros((ns, na))
    for s in range(ns):
        row, col, p, d = taxi_decode(s)
        for a in range(4):
            r[s, a] = step
            for m, prob in _slip_stencil(a, slip_prob, _TAXI_MOVES):
                nr, nc = move(row, col, m)
                t[s, a, taxi_encode(nr, nc, p, d)] += prob
        here = (row, col)
        if p < 4 and here == TAXI_LOCS[p]:
            t[s, 4, taxi_encode(row, col, 4, d)] = 1.0
            r[s, 4] = step
        else:
            t[s, 4, s] = 1.0
            r[s, 4] = illegal
        if p == 4 and here == TAXI_LOCS[d]:
            t[s, 5, :] = mu0
            r[s, 5] = deliver
        elif p == 4 and here in TAXI_LOCS:
            t[s, 5, taxi_encode(row, col, TAXI_LOCS.index(here), d)] = 1.0
            r[s, 5] = step
        else:
            t[s, 5, s] = 1.0
            r[s, 5] = illegal
    return TabularMDP(t, r, mu0, gamma, DETERMINISTIC, "taxi",
                      {"slip_prob": slip_prob, "gamma": gamma})


def build_gridworld(kind: str, slip_prob: float = 0.0, gamma: float = 0.99) -> TabularMDP:
    """Standard FrozenLake 4x4 or Taxi 5x5 with infinite-horizon restarts.

    ``slip_prob`` is the total probability that a move goes in one of the two
    perpendicular directions instead (gym's slippery lake is ``2/3``).
    """
    if not 0.0 <= slip_prob <= 1.0:
        raise ValueError(f"slip_prob must lie in [0, 1], got {slip_prob}")
    if kind in ("frozenlake4x4", "frozenlake"):
        return _frozenlake(slip_prob, gamma)
    if kind in ("taxi5x5", "taxi"):
        return _taxi(slip_prob, gamma)
    raise ValueError(f"unknown gridworld kind {kind!r}")


def build_env(env_id: str, **kwargs) -> TabularMDP:
    """Builder lookup by string id: ``bandit``, ``frozenlake`` or ``taxi``."""
    if env_id == "bandit":
        return build_bandit(**kwargs)
    if env_id in ("frozenlake", "frozenlake4x4", "taxi", "taxi5x5"):
        return build_gridworld(env_id, **kwargs)
    raise ValueError(f"unknown environment id {env_id!r}")


# ---------------------------------------------------------------------------
# policies


def uniform_policy(mdp: TabularMDP) -> TabularPolicy:
    return TabularPolicy(np.full((mdp.num_states, mdp.num_actions), 1.0 / mdp.num_actions), "uniform")


def make_policy(mdp: TabularMDP, spec: PolicyFamilySpec) -> TabularPolicy:
    x = spec.alpha_or_epsilon
    if spec.family == "bandit_alpha":
        if mdp.num_actions != 2:
            raise ValueError("bandit_alpha policies need a two-action MDP")
        probs = np.tile([x, 1.0 - x], (mdp.num_states, 1))
        return TabularPolicy(probs, f"alpha={x:g}")
    if spec.base_policy is None:
        raise ValueError("epsilon_greedy needs a base_policy")
    base = spec.base_policy.probs
    if base.shape != (mdp.num_states, mdp.num_actions):
        raise ValueError(f"base policy shape {base.shape} does not match the MDP")
    if x == 0.0:
        return TabularPolicy(base, f"eps=0:{spec.base_policy.name}")
    probs = (1.0 - x) * base + x / mdp.num_actions
    return TabularPolicy(probs, f"eps={x:g}:{spec.base_policy.name}")


def greedy_policy(mdp: TabularMDP, tol: float = 1e-10, max_iter: int = 100_000) -> TabularPolicy:
    """Deterministic greedy policy from value iteration (ties to the lowest action)."""
    gamma = min(mdp.gamma, 0.999)
    v = np.zeros(mdp.num_states)
    for _ in range(max_iter):
        q = mdp.reward_mean + gamma * mdp.transition @ v
        v_new = q.max(axis=1)
        if np.abs(v_new - v).max() < tol:
            v = v_new
            break
        v = v_new
    q = mdp.reward_mean + gamma * mdp.transition @ v
    probs = np.zeros_like(q)
    probs[np.arange(mdp.num_states), q.argmax(axis=1)] = 1.0
    return TabularPolicy(probs, "greedy")


# ---------------------------------------------------------------------------
# exact solvers


def _check_dims(mdp: TabularMDP, policy: TabularPolicy) -> None:
    if policy.probs.shape != (mdp.num_states, mdp.num_actions):
        raise ValueError(
            f"policy shape {policy.probs.shape} does not match MDP "
            f"({mdp.num_states}, {mdp.num_actions})"
        )


def state_transition_matrix(mdp: TabularMDP, policy: TabularPolicy) -> np.ndarray:
    """``P[s, s'] = sum_a pi(a|s) T(s'|s, a)``."""
    return np.einsum("sa,sat->st", policy.probs, mdp.transition)


def bellman_flow_residual(mdp: TabularMDP, policy: TabularPolicy, d: np.ndarray) -> np.ndarray:
    """``(1-g) mu0 pi + g P_* d - d`` over (s, a) pairs."""
    inflow = np.einsum("sa,sat->t", d, mdp.transition)
    target = ((1.0 - mdp.gamma) * mdp.initial_dist + mdp.gamma * inflow)[:, None] * policy.probs
    return target - d


def exact_visitation(mdp: TabularMDP, policy: TabularPolicy, tol: float = 1e-8) -> np.ndarray:
    """Normalized discounted state-action visitation ``d^pi`` as an [S, A] array.

    For ``gamma == 1`` this is the stationary distribution of the chain; a
    chain without a unique stationary distribution raises
    :class:`SingularChainError`.
    """
    _check_dims(mdp, policy)
    p = state_transition_matrix(mdp, policy)
    ns = mdp.num_states
    if mdp.gamma < 1.0:
        a = np.eye(ns) - mdp.gamma * p.T
        b = (1.0 - mdp.gamma) * mdp.initial_dist
        nu = np.linalg.solve(a, b)
    else:
        a = np.vstack([np.eye(ns) - p.T, np.ones((1, ns))])
        if np.linalg.matrix_rank(a) < ns:
            raise SingularChainError("undiscounted chain has no unique stationary distribution")
        b = np.zeros(ns + 1)
        b[-1] = 1.0
        nu = np.linalg.lstsq(a, b, rcond=None)[0]
    d = nu[:, None] * policy.probs
    resid = np.abs(bellman_flow_residual(mdp, policy, d)).max()
    if resid > tol or abs(d.sum() - 1.0) > tol:
        raise SingularChainError(f"visitation solve is ill-conditioned: residual {resid:.3e}")
    return d


def exact_policy_value(mdp: TabularMDP, policy: TabularPolicy) -> float:
    """Normalized per-step value ``<d^pi, R>``."""
    d = exact_visitation(mdp, policy)
    return float(np.sum(d * mdp.reward_mean))


def q_values(mdp: TabularMDP, policy: TabularPolicy) -> np.ndarray:
    """Solve ``Q = R + g P^pi Q`` for ``gamma < 1``."""
    _check_dims(mdp, policy)
    if mdp.gamma >= 1.0:
        raise ValueError("Q-values are unbounded for gamma = 1")
    ns = mdp.num_states
    p = state_transition_matrix(mdp, policy)
    r_pi = np.sum(policy.probs * mdp.reward_mean, axis=1)
    v = np.linalg.solve(np.eye(ns) - mdp.gamma * p, r_pi)
    return mdp.reward_mean + mdp.gamma * mdp.transition @ v


def primal_policy_value(mdp: TabularMDP, policy: TabularPolicy) -> float:
    """``(1-g) E_{s0~mu0, a0~pi}[Q(s0, a0)]``."""
    q = q_values(mdp, policy)
    return float((1.0 - mdp.gamma) * np.sum(mdp.initial_dist[:, None] * policy.probs * q))
