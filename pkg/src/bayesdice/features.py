"""State-action feature maps for the ratio model."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy import sparse

ONE_HOT = "one_hot"
RANDOM_FOURIER = "random_fourier"


@dataclass(frozen=True, eq=False)
class FeatureMap:
    """Feature map ``phi(s, a)`` over a finite state-action space.

    ``one_hot`` is the indicator of the (s, a) pair. ``random_fourier`` uses
    random Fourier features of an RBF kernel on the indicator embedding,
    ``sqrt(2/m) cos(W x + b)`` with ``W ~ N(0, 1/bandwidth^2)``.
    """

    kind: str
    num_states: int
    num_actions: int
    dim: int
    frequencies: Optional[np.ndarray] = None
    phases: Optional[np.ndarray] = None
    bandwidth: float = 1.0

    def __post_init__(self):
        sa = self.num_states * self.num_actions
        if self.kind == ONE_HOT:
            if self.dim != sa:
                raise ValueError(f"one_hot features need dim = |S||A| = {sa}, got {self.dim}")
        elif self.kind == RANDOM_FOURIER:
            if self.frequencies is None or self.phases is None:
                raise ValueError("random_fourier features need frequencies and phases")
            if np.shape(self.frequencies) != (self.dim, sa) or np.shape(self.phases) != (self.dim,):
                raise ValueError("random_fourier parameter shapes do not match dim and |S||A|")
        else:
            raise ValueError(f"unknown feature map kind {self.kind!r}")
        if self.dim < 1:
            raise ValueError("feature dim must be positive")

    @property
    def num_pairs(self) -> int:
        return self.num_states * self.num_actions

    @property
    def is_sparse(self) -> bool:
        return self.kind == ONE_HOT

    def matrix(self):
        """Features of every (s, a) pair, row ``s * |A| + a``; sparse for one_hot."""
        if self.kind == ONE_HOT:
            return sparse.identity(self.dim, format="csr")
        return np.sqrt(2.0 / self.dim) * np.cos(self.frequencies.T + self.phases)

    def __call__(self, states, actions) -> np.ndarray:
        idx = np.asarray(states) * self.num_actions + np.asarray(actions)
        if self.kind == ONE_HOT:
            out = np.zeros(idx.shape + (self.dim,))
            np.put_along_axis(out, idx[..., None], 1.0, axis=-1)
            return out
        return np.sqrt(2.0 / self.dim) * np.cos(self.frequencies.T[idx] + self.phases)

    def to_dict(self) -> dict:
        out = {"kind": self.kind, "num_states": self.num_states,
               "num_actions": self.num_actions, "dim": self.dim}
        if self.kind == RANDOM_FOURIER:
            out.update(frequencies=self.frequencies.tolist(), phases=self.phases.tolist(),
                       bandwidth=self.bandwidth)
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "FeatureMap":
        if d["kind"] == RANDOM_FOURIER:
            return cls(d["kind"], d["num_states"], d["num_actions"], d["dim"],
                       np.array(d["frequencies"]), np.array(d["phases"]), d["bandwidth"])
        return cls(d["kind"], d["num_states"], d["num_actions"], d["dim"])


def one_hot(num_states: int, num_actions: int) -> FeatureMap:
    return FeatureMap(ONE_HOT, num_states, num_actions, num_states * num_actions)


def random_fourier(num_states: int, num_actions: int, dim: int,
                   bandwidth: float = 1.0, seed: int = 0) -> FeatureMap:
    rng = np.random.default_rng(seed)
    freqs = rng.normal(scale=1.0 / bandwidth, size=(dim, num_states * num_actions))
    phases = rng.uniform(0.0, 2.0 * np.pi, size=dim)
    return FeatureMap(RANDOM_FOURIER, num_states, num_actions, dim, freqs, phases, bandwidth)


def policy_averaged(fm: FeatureMap, policy_probs: np.ndarray):
    """``phi_bar(s) = sum_a pi(a|s) phi(s, a)`` as an [S, m] matrix."""
    ns, na = policy_probs.shape
    rows = np.repeat(np.arange(ns), na)
    cols = np.arange(ns * na)
    avg = sparse.csr_matrix((policy_probs.reshape(-1), (rows, cols)), shape=(ns, ns * na))
    out = avg @ fm.matrix()
    return out.tocsr() if sparse.issparse(out) else np.asarray(out)
