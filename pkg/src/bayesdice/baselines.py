"""Frequentist confidence intervals over per-trajectory importance-sampling estimates."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import stats

from .data import TupleDataset
from .mdp import TabularPolicy


@dataclass(frozen=True, eq=False)
class TrajectoryEstimates:
    values: np.ndarray
    value_range: tuple[float, float] = (0.0, 1.0)

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float).reshape(-1)
        lo, hi = (float(x) for x in self.value_range)
        if not np.isfinite(v).all():
            raise ValueError("trajectory estimates must be finite")
        if not lo <= hi:
            raise ValueError(f"invalid value_range {self.value_range}")
        if v.size and (v.min() < lo - 1e-12 or v.max() > hi + 1e-12):
            raise ValueError("trajectory estimate outside value_range")
        object.__setattr__(self, "values", v)
        object.__setattr__(self, "value_range", (lo, hi))

    @property
    def n(self) -> int:
        return self.values.size

    @property
    def mean(self) -> float:
        return float(self.values.mean())


def wis_per_trajectory(ds: TupleDataset, behavior: TabularPolicy, target: TabularPolicy,
                       gamma: float, reward_range: tuple[float, float] = (0.0, 1.0)
                       ) -> TrajectoryEstimates:
    """Weighted per-decision importance sampling, one normalized estimate per trajectory.

    Cumulative ratios at step t are divided by their mean over trajectories
    at step t, and each discounted sum is normalized by ``sum_t gamma^t`` so
    that an on-policy estimate is the trajectory's normalized return.
    """
    if ds.n == 0:
        raise ValueError("dataset has no trajectories")
    s, a, r = ds.trajectories()
    pi_b = behavior.probs[s, a]
    pi_e = target.probs[s, a]
    bad = (pi_b == 0) & (pi_e > 0)
    if bad.any():
        j, t = np.argwhere(bad)[0]
        raise ValueError(
            f"behavior policy has zero probability for observed action {a[j, t]} in state "
            f"{s[j, t]} (trajectory {j}, step {t}) that the target policy can take"
        )
    step_ratio = np.divide(pi_e, pi_b, out=np.zeros_like(pi_e), where=pi_b > 0)
    w = np.cumprod(step_ratio, axis=1)
    w_mean = w.mean(axis=0)
    w_bar = np.divide(w, w_mean, out=np.zeros_like(w), where=w_mean > 0)
    disc = gamma ** np.arange(ds.horizon)
    norm = disc.sum()
    values = (w_bar * r) @ disc / norm
    reach = w_bar @ disc / norm
    r_lo, r_hi = reward_range
    lo = min(0.0, r_lo * float(reach.max()))
    hi = max(0.0, r_hi * float(reach.max()))
    return TrajectoryEstimates(values, (lo, hi))


def _check(est: TrajectoryEstimates, confidence: float) -> None:
    if est.n < 2:
        raise ValueError("need at least two trajectory estimates")
    if not 0.0 < confidence < 1.0:
        raise ValueError(f"confidence must lie in (0, 1), got {confidence}")


def t_interval(est: TrajectoryEstimates, confidence: float) -> tuple[float, float]:
    """Two-sided Student-t interval for the mean."""
    _check(est, confidence)
    n = est.n
    sd = est.values.std(ddof=1)
    half = stats.t.ppf(0.5 + confidence / 2.0, df=n - 1) * sd / math.sqrt(n)
    return est.mean - half, est.mean + half


def bernstein_interval(est: TrajectoryEstimates, confidence: float) -> tuple[float, float]:
    """Empirical Bernstein interval, clipped to the estimate range."""
    _check(est, confidence)
    n = est.n
    lo_r, hi_r = est.value_range
    b = hi_r - lo_r
    log_term = math.log(2.0 / (1.0 - confidence))
    var = est.values.var(ddof=1)
    half = math.sqrt(2.0 * var * log_term / n) + 7.0 * b * log_term / (3.0 * (n - 1))
    return max(est.mean - half, lo_r), min(est.mean + half, hi_r)


def bootstrap_bc_interval(est: TrajectoryEstimates, confidence: float,
                          resamples: int = 2000, seed: int = 0) -> tuple[float, float]:
    """Bias-corrected percentile bootstrap interval for the mean."""
    _check(est, confidence)
    if resamples < 1:
        raise ValueError("resamples must be a positive integer")
    rng = np.random.default_rng(seed)
    x = est.values
    idx = rng.integers(0, x.size, size=(resamples, x.size))
    boot = x[idx].mean(axis=1)
    mean = est.mean
    # ties count half, so constant data gives z0 = 0
    below = (np.sum(boot < mean) + 0.5 * np.sum(boot == mean)) / resamples
    below = min(max(below, 0.5 / resamples), 1.0 - 0.5 / resamples)
    z0 = stats.norm.ppf(below)
    z = stats.norm.ppf(0.5 + confidence / 2.0)
    q_lo, q_hi = stats.norm.cdf([2.0 * z0 - z, 2.0 * z0 + z])
    lo, hi = np.quantile(boot, [q_lo, q_hi])
    return float(lo), float(hi)
