"""Variational posterior over stationary distribution correction ratios.

The ratio is modelled as ``zeta(s, a) = softplus(phi(s, a) . w)`` with a
mean-field Gaussian ``q(w) = N(mu, diag(sigma^2))``. The training objective is

    KL(q || p) + kappa * E_q[0.5 ||e(zeta)||^2] + kappa_n * E_q[(E_D[zeta] - 1)^2]

where ``e(zeta) = E_D[zeta(s, a) (gamma phi_bar(s') - phi(s, a))] + (1 - gamma) E_{mu0 pi}[phi]``
is the feature embedding of the Bellman-flow residual. It is also the
maximizing dual vector for the quadratic conjugate ``f*(b) = b.b / 2``, so
the inner maximization is solved exactly.
"""
from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from typing import Callable, NamedTuple, Optional

import numpy as np
from scipy import sparse
from scipy.special import expit

from .data import TupleBatch, TupleDataset
from .features import FeatureMap
from .features import policy_averaged
from .mdp import TabularPolicy

log = logging.getLogger(__name__)

# dense arithmetic is faster than scipy.sparse below this feature dimension
_DENSE_MAX_DIM = 256


def softplus(x):
    return np.logaddexp(0.0, x)


def softplus_inverse(y):
    y = np.asarray(y, dtype=float)
    return np.where(y > 30.0, y, np.log(np.expm1(np.minimum(y, 30.0))))


@dataclass(frozen=True)
class BayesDiceConfig:
    constraint_weight: float = 1e3
    norm_weight: Optional[float] = None  # defaults to constraint_weight
    prior_mu: float = float(softplus_inverse(1.0))
    prior_sigma: float = 1.0
    learning_rate: float = 1e-3
    steps: int = 50_000
    batch_size: Optional[int] = None  # None -> min(n, 2048)
    full_batch: bool = False
    mc_samples_per_step: int = 8
    seed: int = 0
    adam_beta1: float = 0.99
    adam_beta2: float = 0.999
    init_sigma: float = 0.1
    # multiply both weights by the dataset size n: the tolerance on the
    # constraint violation then shrinks like 1/n and the posterior contracts
    scale_by_n: bool = False

    def __post_init__(self):
        if self.norm_weight is None:
            object.__setattr__(self, "norm_weight", self.constraint_weight)
        problems = []
        if not self.constraint_weight > 0:
            problems.append(f"constraint_weight must be positive, got {self.constraint_weight}")
        if not self.norm_weight >= 0:
            problems.append(f"norm_weight must be nonnegative, got {self.norm_weight}")
        if not self.init_sigma > 0:
            problems.append(f"init_sigma must be positive, got {self.init_sigma}")
        if not self.prior_sigma > 0:
            problems.append(f"prior_sigma must be positive, got {self.prior_sigma}")
        if not self.learning_rate > 0:
            problems.append(f"learning_rate must be positive, got {self.learning_rate}")
        for name in ("steps", "mc_samples_per_step"):
            if getattr(self, name) < 1:
                problems.append(f"{name} must be a positive integer")
        if self.batch_size is not None and self.batch_size < 1:
            problems.append("batch_size must be a positive integer")
        if problems:
            raise ValueError("; ".join(problems))

    def to_dict(self) -> dict:
        return asdict(self)

    def effective(self, n: int) -> "BayesDiceConfig":
        """Config with both penalty weights resolved for a dataset of ``n`` tuples."""
        if not self.scale_by_n:
            return self
        return replace(self, constraint_weight=self.constraint_weight * n,
                       norm_weight=self.norm_weight * n, scale_by_n=False)


@dataclass(frozen=True, eq=False)
class RatioPosterior:
    mu: np.ndarray
    log_sigma: np.ndarray
    feature_map: FeatureMap
    link: str = "softplus"
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        mu = np.array(self.mu, dtype=float)
        ls = np.array(self.log_sigma, dtype=float)
        if mu.shape != (self.feature_map.dim,) or ls.shape != mu.shape:
            raise ValueError(f"posterior parameters must have length {self.feature_map.dim}")
        if self.link != "softplus":
            raise ValueError(f"unsupported link {self.link!r}")
        object.__setattr__(self, "mu", mu)
        object.__setattr__(self, "log_sigma", ls)

    @property
    def sigma(self) -> np.ndarray:
        return np.exp(self.log_sigma)

    def sample_weights(self, rng: np.random.Generator, num: int) -> np.ndarray:
        return self.mu + self.sigma * rng.standard_normal((num, self.mu.size))

    def ratio(self, weights: np.ndarray, states, actions) -> np.ndarray:
        """``zeta`` at the given pairs for each weight row: shape ``(num_weights, num_pairs)``."""
        feats = self.feature_map(states, actions)
        return softplus(np.atleast_2d(weights) @ feats.T)

    def mean_ratio(self, states, actions, num_draws: int = 4000, seed: int = 0) -> np.ndarray:
        """Monte Carlo posterior mean of ``zeta`` at the given pairs."""
        rng = np.random.default_rng(seed)
        return self.ratio(self.sample_weights(rng, num_draws), states, actions).mean(axis=0)

    def to_dict(self) -> dict:
        return {
            "feature_map": self.feature_map.to_dict(),
            "mu": self.mu.tolist(),
            "log_sigma": self.log_sigma.tolist(),
            "link": self.link,
            **self.meta,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RatioPosterior":
        meta = {k: v for k, v in d.items() if k not in ("feature_map", "mu", "log_sigma", "link")}
        return cls(np.array(d["mu"]), np.array(d["log_sigma"]),
                   FeatureMap.from_dict(d["feature_map"]), d.get("link", "softplus"), meta)


def save_posterior(posterior: RatioPosterior, path) -> None:
    with open(path, "w") as f:
        json.dump(posterior.to_dict(), f)


def load_posterior(path) -> RatioPosterior:
    with open(path) as f:
        return RatioPosterior.from_dict(json.load(f))


def prior_posterior(fm: FeatureMap, cfg: BayesDiceConfig) -> RatioPosterior:
    m = fm.dim
    return RatioPosterior(np.full(m, cfg.prior_mu), np.full(m, math.log(cfg.prior_sigma)), fm)


# ---------------------------------------------------------------------------
# residual embedding


def _check_batch(batch: TupleBatch, target: TabularPolicy, fm: FeatureMap) -> None:
    if len(batch) == 0:
        raise ValueError("batch is empty")
    if target.probs.shape != (fm.num_states, fm.num_actions):
        raise ValueError(
            f"target policy shape {target.probs.shape} does not match feature map "
            f"({fm.num_states}, {fm.num_actions})"
        )


def residual_embedding(zeta, batch: TupleBatch, target: TabularPolicy,
                       fm: FeatureMap, gamma: float) -> np.ndarray:
    """Per-tuple evaluation of the Bellman-flow residual embedding ``e``.

    ``zeta`` holds one ratio value per tuple of ``batch``.
    """
    _check_batch(batch, target, fm)
    zeta = np.asarray(zeta, dtype=float)
    if zeta.shape != (len(batch),):
        raise ValueError(f"need one zeta per tuple: got {zeta.shape}, batch has {len(batch)}")
    phi_bar = policy_averaged(fm, target.probs)
    if sparse.issparse(phi_bar):
        phi_bar = phi_bar.toarray()
    phi = fm(batch.states, batch.actions)
    drift = gamma * phi_bar[batch.next_states] - phi
    init = (1.0 - gamma) * phi_bar[batch.init_states].mean(axis=0)
    return (zeta[:, None] * drift).mean(axis=0) + init


class BatchStats(NamedTuple):
    """A batch grouped by distinct (s, a) pair; exact because zeta depends on (s, a) only."""

    keys: np.ndarray     # [K] pair index s * |A| + a
    weight: np.ndarray   # [K] fraction of the batch at each pair
    feats: object        # [K, m] phi of each pair
    drift: object        # [K, m] batch-mean of gamma phi_bar(s') - phi(s, a), per pair
    init: np.ndarray     # [m] (1 - gamma) E_{s0, pi}[phi]
    reward: np.ndarray   # [K] batch-mean reward mass per pair


def batch_stats(batch: TupleBatch, target: TabularPolicy, fm: FeatureMap, gamma: float,
                phi_bar=None, phi=None) -> BatchStats:
    _check_batch(batch, target, fm)
    ns, na = fm.num_states, fm.num_actions
    n = len(batch)
    sa = np.asarray(batch.states) * na + np.asarray(batch.actions)
    keys, inv = np.unique(sa, return_inverse=True)
    k = keys.size
    if phi_bar is None:
        phi_bar = policy_averaged(fm, target.probs)
    if phi is None:
        phi = fm.matrix()
    weight = np.bincount(inv, minlength=k) / n
    moves = sparse.csr_matrix((np.full(n, 1.0 / n), (inv, np.asarray(batch.next_states))),
                              shape=(k, ns))
    starts = np.bincount(np.asarray(batch.init_states), minlength=ns) / n
    feats = phi[keys]
    drift = gamma * (moves @ phi_bar) - sparse.diags(weight) @ feats
    init = (1.0 - gamma) * np.asarray(phi_bar.T @ starts).reshape(-1)
    reward = np.bincount(inv, weights=np.asarray(batch.rewards, dtype=float), minlength=k) / n
    if fm.dim <= _DENSE_MAX_DIM or not fm.is_sparse:
        feats = feats.toarray() if sparse.issparse(feats) else np.asarray(feats)
        drift = drift.toarray() if sparse.issparse(drift) else np.asarray(drift)
    else:
        feats, drift = sparse.csr_matrix(feats), sparse.csr_matrix(drift)
    return BatchStats(keys, weight, feats, drift, init, reward)


def _right(x: np.ndarray, mat) -> np.ndarray:
    """``x @ mat`` for dense ``x`` and dense or sparse ``mat``."""
    if sparse.issparse(mat):
        return np.asarray((mat.T @ x.T).T)
    return x @ mat


# ---------------------------------------------------------------------------
# objective


class LossTerms(NamedTuple):
    loss: float
    kl: float
    constraint: float      # E_q[0.5 ||e||^2]
    normalization: float   # E_q[(E_D[zeta] - 1)^2]
    grad_mu: np.ndarray
    grad_log_sigma: np.ndarray


def gaussian_kl(mu, log_sigma, prior_mu: float, prior_sigma: float) -> float:
    var_ratio = np.exp(2.0 * log_sigma) / prior_sigma**2
    return float(np.sum(0.5 * (var_ratio + (mu - prior_mu) ** 2 / prior_sigma**2 - 1.0)
                        + math.log(prior_sigma) - log_sigma))


def _objective(stats: BatchStats, mu, log_sigma, noise, cfg: BayesDiceConfig) -> LossTerms:
    num = noise.shape[0]
    sigma = np.exp(log_sigma)
    w = mu + sigma * noise
    z = _right(w, stats.feats.T)
    zeta = softplus(z)
    e = _right(zeta, stats.drift) + stats.init
    mass = zeta @ stats.weight
    constraint = 0.5 * float(np.sum(e * e)) / num
    normalization = float(np.sum((mass - 1.0) ** 2)) / num
    ps2 = cfg.prior_sigma**2
    kl = gaussian_kl(mu, log_sigma, cfg.prior_mu, cfg.prior_sigma)
    loss = kl + cfg.constraint_weight * constraint + cfg.norm_weight * normalization

    g_zeta = (cfg.constraint_weight * _right(e, stats.drift.T)
              + 2.0 * cfg.norm_weight * (mass - 1.0)[:, None] * stats.weight) / num
    g_w = _right(g_zeta * expit(z), stats.feats)
    grad_mu = g_w.sum(axis=0) + (mu - cfg.prior_mu) / ps2
    grad_log_sigma = (g_w * noise).sum(axis=0) * sigma + sigma**2 / ps2 - 1.0
    return LossTerms(loss, kl, constraint, normalization, grad_mu, grad_log_sigma)


def chance_loss(posterior: RatioPosterior, batch: TupleBatch, target: TabularPolicy,
                cfg: BayesDiceConfig, gamma: float, noise: Optional[np.ndarray] = None,
                rng: Optional[np.random.Generator] = None) -> LossTerms:
    """Monte Carlo chance-constrained objective and its reparametrized gradient.

    ``noise`` is a ``(mc_samples, m)`` standard-normal array; passing it
    freezes the Monte Carlo estimate so the loss is a smooth function of
    ``(mu, log_sigma)``.
    """
    fm = posterior.feature_map
    if noise is None:
        rng = rng if rng is not None else np.random.default_rng(cfg.seed)
        noise = rng.standard_normal((cfg.mc_samples_per_step, fm.dim))
    noise = np.atleast_2d(noise)
    if noise.shape[1] != fm.dim:
        raise ValueError(f"noise has width {noise.shape[1]}, feature dim is {fm.dim}")
    stats = batch_stats(batch, target, fm, gamma)
    terms = _objective(stats, posterior.mu, posterior.log_sigma, noise, cfg)
    if not np.isfinite(terms.loss):
        raise FloatingPointError(
            f"non-finite loss (kl={terms.kl}, constraint={terms.constraint}, "
            f"normalization={terms.normalization}); check learning_rate and prior settings"
        )
    return terms


# ---------------------------------------------------------------------------
# training


class DivergenceError(FloatingPointError):
    pass


def train_posterior(ds: TupleDataset, target: TabularPolicy, fm: FeatureMap,
                    cfg: BayesDiceConfig, gamma: Optional[float] = None,
                    callback: Optional[Callable[[int, LossTerms], None]] = None,
                    log_every: int = 0) -> RatioPosterior:
    """Fit ``q(w)`` with Adam on the chance-constrained objective.

    Mini-batches are drawn uniformly with replacement unless
    ``cfg.full_batch`` is set. Deterministic given ``cfg.seed``.
    """
    if ds.n == 0:
        raise ValueError("cannot train on an empty dataset")
    if (fm.num_states, fm.num_actions) != (ds.num_states, ds.num_actions):
        raise ValueError("feature map does not match the dataset's state/action spaces")
    gamma = ds.gamma if gamma is None else gamma
    record = cfg.to_dict()
    cfg = cfg.effective(ds.n)
    rng = np.random.default_rng(cfg.seed)
    m = fm.dim
    mu = np.full(m, cfg.prior_mu)
    log_sigma = np.full(m, math.log(cfg.init_sigma))

    phi_bar = policy_averaged(fm, target.probs)
    phi = fm.matrix()
    batch_size = min(ds.n, 2048) if cfg.batch_size is None else cfg.batch_size
    full = batch_stats(ds.batch(), target, fm, gamma, phi_bar, phi) if cfg.full_batch else None

    b1, b2, eps = cfg.adam_beta1, cfg.adam_beta2, 1e-8
    m1 = np.zeros((2, m))
    m2 = np.zeros((2, m))
    for step in range(1, cfg.steps + 1):
        if full is not None:
            stats = full
        else:
            idx = rng.integers(0, ds.n, size=batch_size)
            stats = batch_stats(ds.batch(idx), target, fm, gamma, phi_bar, phi)
        noise = rng.standard_normal((cfg.mc_samples_per_step, m))
        terms = _objective(stats, mu, log_sigma, noise, cfg)
        if not np.isfinite(terms.loss) or terms.loss > 1e6:
            raise DivergenceError(
                f"training diverged at step {step}: loss={terms.loss:.4g} "
                f"(kl={terms.kl:.4g}, constraint={terms.constraint:.4g}); "
                f"lower learning_rate or check prior/constraint weights"
            )
        g = np.stack([terms.grad_mu, terms.grad_log_sigma])
        m1 = b1 * m1 + (1.0 - b1) * g
        m2 = b2 * m2 + (1.0 - b2) * g * g
        mhat = m1 / (1.0 - b1**step)
        vhat = m2 / (1.0 - b2**step)
        upd = cfg.learning_rate * mhat / (np.sqrt(vhat) + eps)
        mu = mu - upd[0]
        log_sigma = log_sigma - upd[1]
        if callback is not None:
            callback(step, terms)
        if log_every and step % log_every == 0:
            log.info("step %d loss %.5g kl %.4g constraint %.4g norm %.4g", step,
                     terms.loss, terms.kl, terms.constraint, terms.normalization)

    meta = {
        "env": ds.meta.get("env"),
        "target": target.name,
        "gamma": gamma,
        "config": record,
    }
    return RatioPosterior(mu, log_sigma, fm, meta=meta)


# ---------------------------------------------------------------------------
# posterior value samples


@dataclass(frozen=True, eq=False)
class ValueSampleMatrix:
    """Posterior draws of policy values: row i holds draws for policy i."""

    samples: np.ndarray
    policy_ids: tuple = ()

    def __post_init__(self):
        s = np.atleast_2d(np.asarray(self.samples, dtype=float))
        if s.size == 0:
            raise ValueError("empty sample matrix")
        if not np.isfinite(s).all():
            raise ValueError("value samples must be finite")
        ids = tuple(self.policy_ids) if self.policy_ids else tuple(range(s.shape[0]))
        if len(ids) != s.shape[0]:
            raise ValueError("need one policy id per sample row")
        object.__setattr__(self, "samples", s)
        object.__setattr__(self, "policy_ids", ids)

    @property
    def num_policies(self) -> int:
        return self.samples.shape[0]

    @property
    def num_draws(self) -> int:
        return self.samples.shape[1]

    @classmethod
    def stack(cls, rows, policy_ids=()) -> "ValueSampleMatrix":
        return cls(np.vstack([np.asarray(r, dtype=float) for r in rows]), tuple(policy_ids))


def sample_policy_values(posterior: RatioPosterior, ds: TupleDataset, num_draws: int,
                         seed: int, reward_fn: Optional[Callable] = None,
                         chunk: int = 4096) -> np.ndarray:
    """Draw ``E_D[zeta * r]`` once per posterior weight sample.

    ``reward_fn`` maps realized rewards before weighting (identity by default).
    """
    if num_draws < 1:
        raise ValueError("num_draws must be >= 1")
    if ds.n == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    fm = posterior.feature_map
    na = fm.num_actions
    r = ds.rewards if reward_fn is None else np.asarray(reward_fn(ds.rewards), dtype=float)
    sa = ds.states * na + ds.actions
    keys, inv = np.unique(sa, return_inverse=True)
    mass = np.bincount(inv, weights=r, minlength=keys.size) / ds.n
    feats = fm(keys // na, keys % na)
    rng = np.random.default_rng(seed)
    out = np.empty(num_draws)
    for lo in range(0, num_draws, chunk):
        hi = min(lo + chunk, num_draws)
        w = posterior.sample_weights(rng, hi - lo)
        out[lo:hi] = softplus(w @ feats.T) @ mass
    return out


def interval_from_samples(samples, confidence: float) -> tuple[float, float]:
    """Central quantile interval with linear interpolation."""
    if not 0.0 < confidence < 1.0:
        raise ValueError(f"confidence must lie in (0, 1), got {confidence}")
    x = np.asarray(samples, dtype=float)
    if x.size < 2:
        raise ValueError("need at least two samples")
    lo, hi = np.quantile(x, [(1.0 - confidence) / 2.0, (1.0 + confidence) / 2.0])
    return float(lo), float(hi)
