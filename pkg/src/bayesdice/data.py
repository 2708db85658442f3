"""Offline datasets: sampling under a behavior policy and JSON-lines I/O.

A dataset is stored as flat per-tuple arrays in trajectory-major order, so
the trajectory view is a reshape to ``(num_trajectories, horizon)``.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, NamedTuple

import numpy as np

from .mdp import BERNOULLI, TabularMDP, TabularPolicy


class Transition(NamedTuple):
    init_state: int
    state: int
    action: int
    reward: float
    next_state: int


class TupleBatch(NamedTuple):
    """Column view of a set of tuples, e.g. a mini-batch drawn from a dataset."""

    init_states: np.ndarray
    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    next_states: np.ndarray

    def __len__(self) -> int:
        return len(self.states)


@dataclass(frozen=True, eq=False)
class TupleDataset:
    init_states: np.ndarray
    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    next_states: np.ndarray
    horizon: int
    num_states: int
    num_actions: int
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        arrays = {}
        for name in ("init_states", "states", "actions", "next_states"):
            arrays[name] = np.asarray(getattr(self, name), dtype=np.int64).reshape(-1)
        arrays["rewards"] = np.asarray(self.rewards, dtype=float).reshape(-1)
        n = arrays["states"].size
        if any(a.size != n for a in arrays.values()):
            raise ValueError("dataset columns must have equal length")
        if self.horizon < 1:
            raise ValueError(f"horizon must be >= 1, got {self.horizon}")
        if n % self.horizon:
            raise ValueError(f"{n} tuples do not split into trajectories of length {self.horizon}")
        for name in ("init_states", "states", "next_states"):
            a = arrays[name]
            if n and (a.min() < 0 or a.max() >= self.num_states):
                raise ValueError(f"{name} out of range [0, {self.num_states})")
        a = arrays["actions"]
        if n and (a.min() < 0 or a.max() >= self.num_actions):
            raise ValueError(f"actions out of range [0, {self.num_actions})")
        if not np.isfinite(arrays["rewards"]).all():
            raise ValueError("rewards must be finite")
        for name, a in arrays.items():
            a.flags.writeable = False
            object.__setattr__(self, name, a)
        object.__setattr__(self, "meta", {**self.meta, "horizon": int(self.horizon), "n": int(n)})

    def __len__(self) -> int:
        return self.states.size

    @property
    def n(self) -> int:
        return self.states.size

    @property
    def num_trajectories(self) -> int:
        return self.n // self.horizon

    @property
    def gamma(self) -> float:
        return float(self.meta["gamma"])

    def batch(self, idx=None) -> TupleBatch:
        cols = (self.init_states, self.states, self.actions, self.rewards, self.next_states)
        if idx is None:
            return TupleBatch(*cols)
        return TupleBatch(*(c[idx] for c in cols))

    def transitions(self) -> Iterator[Transition]:
        for row in zip(self.init_states.tolist(), self.states.tolist(), self.actions.tolist(),
                       self.rewards.tolist(), self.next_states.tolist()):
            yield Transition(*row)

    def trajectories(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """``(states, actions, rewards)`` each shaped ``(num_trajectories, horizon)``."""
        shape = (self.num_trajectories, self.horizon)
        return self.states.reshape(shape), self.actions.reshape(shape), self.rewards.reshape(shape)

    def equals(self, other: "TupleDataset") -> bool:
        return (
            self.horizon == other.horizon
            and self.num_states == other.num_states
            and self.num_actions == other.num_actions
            and self.meta == other.meta
            and all(
                np.array_equal(getattr(self, k), getattr(other, k))
                for k in ("init_states", "states", "actions", "rewards", "next_states")
            )
        )


def _sample_rows(rng: np.random.Generator, probs: np.ndarray) -> np.ndarray:
    """One categorical draw per row of ``probs`` by inverse CDF."""
    cdf = np.cumsum(probs, axis=1)
    u = rng.random(probs.shape[0])[:, None]
    idx = (u >= cdf[:, :-1]).sum(axis=1)
    return idx


def sample_dataset(
    mdp: TabularMDP,
    behavior: TabularPolicy,
    num_trajectories: int,
    horizon: int,
    seed: int,
    behavior_spec: object = None,
) -> TupleDataset:
    """Roll out ``num_trajectories`` episodes of length ``horizon`` from ``mu0``.

    Each tuple also carries an independent ``s0 ~ mu0`` draw. All trajectories
    advance in lockstep, so the result depends only on ``seed``.
    """
    if horizon < 1:
        raise ValueError(f"horizon must be >= 1, got {horizon}")
    if num_trajectories < 0:
        raise ValueError(f"num_trajectories must be >= 0, got {num_trajectories}")
    if behavior.probs.shape != (mdp.num_states, mdp.num_actions):
        raise ValueError("behavior policy does not match the MDP")
    rng = np.random.default_rng(seed)
    m, h = num_trajectories, horizon
    states = np.zeros((m, h), dtype=np.int64)
    actions = np.zeros((m, h), dtype=np.int64)
    rewards = np.zeros((m, h))
    next_states = np.zeros((m, h), dtype=np.int64)
    mu0 = np.broadcast_to(mdp.initial_dist, (m, mdp.num_states))
    s = _sample_rows(rng, mu0)
    for t in range(h):
        a = _sample_rows(rng, behavior.probs[s])
        mean_r = mdp.reward_mean[s, a]
        if mdp.reward_kind == BERNOULLI:
            r = (rng.random(m) < mean_r).astype(float)
        else:
            r = mean_r
        sp = _sample_rows(rng, mdp.transition[s, a])
        states[:, t], actions[:, t], rewards[:, t], next_states[:, t] = s, a, r, sp
        s = sp
    init_states = _sample_rows(rng, np.broadcast_to(mdp.initial_dist, (m * h, mdp.num_states)))
    meta = {
        "env": mdp.env_id,
        "env_params": dict(mdp.params),
        "gamma": mdp.gamma,
        "seed": int(seed),
        "horizon": int(h),
        "behavior": behavior_spec if behavior_spec is not None else behavior.name,
        "n": int(m * h),
    }
    return TupleDataset(init_states.reshape(-1), states.reshape(-1), actions.reshape(-1),
                        rewards.reshape(-1), next_states.reshape(-1), h,
                        mdp.num_states, mdp.num_actions, meta)


def save_dataset(ds: TupleDataset, path) -> None:
    header = dict(ds.meta)
    header.update(horizon=ds.horizon, num_states=ds.num_states,
                  num_actions=ds.num_actions, n=ds.n)
    with open(path, "w") as f:
        f.write(json.dumps(header, sort_keys=True) + "\n")
        for x in ds.transitions():
            row = {"s0": x.init_state, "s": x.state, "a": x.action,
                   "r": x.reward, "sp": x.next_state}
            f.write(json.dumps(row) + "\n")


class DatasetFormatError(ValueError):
    pass


def load_dataset(path) -> TupleDataset:
    path = Path(path)
    with open(path) as f:
        lines = f.read().splitlines()
    if not lines:
        raise DatasetFormatError(f"{path}:1: missing header line")
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as e:
        raise DatasetFormatError(f"{path}:1: malformed header: {e}") from None
    for key in ("env", "gamma", "seed", "horizon", "num_states", "num_actions"):
        if key not in header:
            raise DatasetFormatError(f"{path}:1: header lacks {key!r}")
    ns, na = int(header["num_states"]), int(header["num_actions"])
    cols = {k: [] for k in ("s0", "s", "a", "r", "sp")}
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        try:
            row = json.loads(line)
            vals = {k: row[k] for k in cols}
        except (json.JSONDecodeError, KeyError, TypeError) as e:
            raise DatasetFormatError(f"{path}:{lineno}: malformed row: {e}") from None
        for k in ("s0", "s", "sp"):
            if not isinstance(vals[k], int) or not 0 <= vals[k] < ns:
                raise DatasetFormatError(f"{path}:{lineno}: {k}={vals[k]!r} outside [0, {ns})")
        if not isinstance(vals["a"], int) or not 0 <= vals["a"] < na:
            raise DatasetFormatError(f"{path}:{lineno}: a={vals['a']!r} outside [0, {na})")
        if not isinstance(vals["r"], (int, float)):
            raise DatasetFormatError(f"{path}:{lineno}: reward {vals['r']!r} is not a number")
        for k, v in vals.items():
            cols[k].append(v)
    n = len(cols["s"])
    if "n" in header and int(header["n"]) != n:
        raise DatasetFormatError(f"{path}: header declares n={header['n']} but file has {n} rows")
    meta = {k: v for k, v in header.items() if k not in ("num_states", "num_actions")}
    try:
        return TupleDataset(
            np.array(cols["s0"], dtype=np.int64), np.array(cols["s"], dtype=np.int64),
            np.array(cols["a"], dtype=np.int64), np.array(cols["r"], dtype=float),
            np.array(cols["sp"], dtype=np.int64), int(header["horizon"]), ns, na, meta,
        )
    except ValueError as e:
        raise DatasetFormatError(f"{path}: {e}") from None
