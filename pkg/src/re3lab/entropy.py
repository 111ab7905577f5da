"""k-NN state entropy: estimators, the RE3 intrinsic reward, and reward plumbing.

Two entropy estimators live here. ``entropy_full`` is the particle estimator

    H = 1/N sum_i log( N * d_i^q * pi^(q/2) / (k * Gamma(q/2 + 1)) ) + log k - psi(k)

where d_i is the distance from x_i to its k-th nearest neighbour in the set
(its own zero self-distance excluded). ``entropy_simplified`` keeps only the
data-dependent part, 1/N sum_i log d_i.

The intrinsic reward treats every stored latent as a particle and scores a
latent by how far its k-th neighbour is, ``log(d_k + 1)``.
"""

from __future__ import annotations

import enum
import logging
import math
import warnings
from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

log = logging.getLogger(__name__)

EULER_GAMMA = 0.57721566490153286060651209
DISTANCE_FLOOR = 1e-12
STD_FLOOR = 1e-8


class DegenerateWarning(RuntimeWarning):
    """Emitted when a numerical guard (distance floor, std floor, cold start) kicks in."""


# ---------------------------------------------------------------------------
# Neighbour search
# ---------------------------------------------------------------------------


def digamma_int(k: int) -> float:
    """Digamma at a positive integer via the harmonic-number identity."""
    if k < 1:
        raise ValueError("digamma_int needs k >= 1")
    return -EULER_GAMMA + math.fsum(1.0 / n for n in range(1, k))


def bias_correction(k: int) -> float:
    """``log k - psi(k)``."""
    return math.log(k) - digamma_int(k)


def knn_distances(query, pool, k: int, exclude_self: bool = False) -> np.ndarray:
    """The ``k`` smallest Euclidean distances from ``query`` to ``pool``, ascending.

    Exact brute-force scan. A pool member's own zero distance is part of the
    result unless ``exclude_self`` is set, in which case one zero distance
    (the query's own entry) is dropped first.
    """
    q = np.asarray(query, dtype=np.float64).reshape(-1)
    pool = np.asarray(pool, dtype=np.float64)
    if pool.ndim == 1:
        pool = pool.reshape(-1, q.size)
    diff = pool - q
    d = np.sqrt(np.einsum("ij,ij->i", diff, diff))
    if exclude_self:
        zero = np.flatnonzero(d == 0.0)
        if zero.size:
            d = np.delete(d, zero[0])
    if d.size < k:
        raise ValueError(f"pool of {d.size} points is smaller than k={k}")
    if k < d.size:
        d = np.partition(d, k - 1)[:k]
    return np.sort(d)


def batch_knn_distances(queries, pool, k: int, self_index=None, extra: int = 8) -> np.ndarray:
    """Row-wise ``k`` smallest distances from each query to ``pool``, shape (n, k).

    ``self_index[i]`` (if given) is the slot of query ``i`` inside ``pool``;
    that entry is skipped. Candidates are picked through the Gram expansion
    ``|a|^2 + |b|^2 - 2ab`` and their distances are then recomputed from
    coordinate differences, so returned values carry no cancellation error.
    """
    q = np.asarray(queries, dtype=np.float64)
    p = np.asarray(pool, dtype=np.float64)
    n, m = q.shape[0], p.shape[0]
    avail = m - (1 if self_index is not None else 0)
    if avail < k:
        raise ValueError(f"pool of {avail} points is smaller than k={k}")
    # |q|^2 is constant along a row, so ranking by |p|^2 - 2qp is enough.
    d2 = q @ p.T
    d2 *= -2.0
    d2 += np.einsum("ij,ij->i", p, p)
    if self_index is not None:
        d2[np.arange(n), np.asarray(self_index)] = np.inf
    c = min(k + extra, avail)
    cand = np.argpartition(d2, c - 1, axis=1)[:, :c] if c < m else np.argsort(d2, axis=1)[:, :c]
    diff = p[cand] - q[:, None, :]
    d = np.sqrt(np.einsum("ncd,ncd->nc", diff, diff))
    if self_index is not None:
        d[cand == np.asarray(self_index)[:, None]] = np.inf
    d.sort(axis=1)
    return d[:, :k]


def kth_neighbor_distances(points, k: int) -> np.ndarray:
    """Distance from every point to its k-th nearest other point in the set."""
    x = _as_points(points)
    n = x.shape[0]
    if n < k + 1:
        raise ValueError(f"need at least k+1={k + 1} points, got {n}")
    d, _ = cKDTree(x).query(x, k=k + 1)
    # Column 0 is each point's own zero distance (or a duplicate's, equally 0).
    return np.asarray(d, dtype=np.float64)[:, k]


def _as_points(points) -> np.ndarray:
    x = np.asarray(points, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    if x.ndim != 2:
        raise ValueError("points must be a (N, q) array")
    return x


# ---------------------------------------------------------------------------
# Estimators
# ---------------------------------------------------------------------------


class Variant(str, enum.Enum):
    full = "full"
    simplified = "simplified"


@dataclass
class EstimatorConfig:
    k: int = 3
    variant: Variant = Variant.full


def _floored_log(d: np.ndarray) -> np.ndarray:
    low = d < DISTANCE_FLOOR
    if low.any():
        warnings.warn(
            f"{int(low.sum())} k-NN distances below {DISTANCE_FLOOR:g} were clamped",
            DegenerateWarning, stacklevel=3,
        )
        d = np.maximum(d, DISTANCE_FLOOR)
    return np.log(d)


def log_unit_ball_volume(q: int) -> float:
    """log of pi^(q/2) / Gamma(q/2 + 1)."""
    return 0.5 * q * math.log(math.pi) - math.lgamma(0.5 * q + 1.0)


def entropy_full(points, k: int = 3) -> float:
    """Particle k-NN differential entropy estimate (nats)."""
    x = _as_points(points)
    n, q = x.shape
    logd = _floored_log(kth_neighbor_distances(x, k))
    return float(
        math.log(n) - math.log(k) + log_unit_ball_volume(q) + q * logd.mean() + bias_correction(k)
    )


def entropy_simplified(points, k: int = 3) -> float:
    """Mean log k-NN distance: the data-dependent part of ``entropy_full``."""
    return float(_floored_log(kth_neighbor_distances(points, k)).mean())


def entropy_offset(n: int, k: int, q: int) -> float:
    """``entropy_full - q * entropy_simplified`` for any cloud of n points in R^q."""
    return math.log(n) - math.log(k) + log_unit_ball_volume(q) + bias_correction(k)


def estimate(points, cfg: EstimatorConfig) -> float:
    if cfg.variant == Variant.full:
        return entropy_full(points, cfg.k)
    return entropy_simplified(points, cfg.k)


# ---------------------------------------------------------------------------
# Intrinsic reward
# ---------------------------------------------------------------------------


class IntrinsicVariant(str, enum.Enum):
    log1p_single = "log1p_single"
    log1p_avg_k = "log1p_avg_k"
    raw_distance = "raw_distance"


@dataclass
class IntrinsicConfig:
    """How a latent's neighbour distances become a reward.

    ``avg_from`` picks which neighbours the averaged variant uses:
    1 means neighbours 1..k, 2 means 2..k (after dropping the self-match).
    """

    variant: IntrinsicVariant = IntrinsicVariant.log1p_avg_k
    k: int = 3
    normalize: bool = False
    exclude_self: bool = True
    avg_from: int = 1

    def __post_init__(self):
        self.variant = IntrinsicVariant(self.variant)
        if self.k < 1:
            raise ValueError("k must be >= 1")
        if self.avg_from not in (1, 2) or self.avg_from > self.k:
            raise ValueError("avg_from must be 1 or 2 and not exceed k")


def reward_from_distances(dists, cfg: IntrinsicConfig) -> np.ndarray:
    """Map ascending neighbour distances (..., k) to rewards (...)."""
    d = np.asarray(dists, dtype=np.float64)
    if cfg.variant == IntrinsicVariant.log1p_single:
        return np.log1p(d[..., cfg.k - 1])
    if cfg.variant == IntrinsicVariant.log1p_avg_k:
        return np.log1p(d[..., cfg.avg_from - 1 : cfg.k].mean(axis=-1))
    return d[..., cfg.k - 1].copy()


def intrinsic_reward(y, pool, cfg: IntrinsicConfig) -> float:
    """Reward of one latent against a pool of latents.

    If the pool cannot supply ``k`` neighbours the reward is 0 (with a
    warning); this covers the first steps of training.
    """
    pool = np.asarray(pool)
    available = len(pool) - (1 if cfg.exclude_self else 0)
    if available < cfg.k:
        warnings.warn("pool too small for k neighbours; intrinsic reward set to 0",
                      DegenerateWarning, stacklevel=2)
        return 0.0
    d = knn_distances(y, pool, cfg.k, exclude_self=cfg.exclude_self)
    return float(reward_from_distances(d, cfg))


def batch_intrinsic_rewards(latents, pool, cfg: IntrinsicConfig, self_index=None) -> np.ndarray:
    """Vectorized rewards for a batch of latents already stored in ``pool``."""
    latents = np.asarray(latents)
    m = len(pool) - (1 if (cfg.exclude_self and self_index is not None) else 0)
    if m < cfg.k:
        warnings.warn("pool too small for k neighbours; intrinsic rewards set to 0",
                      DegenerateWarning, stacklevel=2)
        return np.zeros(len(latents))
    d = batch_knn_distances(latents, pool, cfg.k, self_index if cfg.exclude_self else None)
    return reward_from_distances(d, cfg)


# ---------------------------------------------------------------------------
# Normalization, schedule, combination
# ---------------------------------------------------------------------------


class RunningStd:
    """Welford mean/variance over every value seen; population std."""

    def __init__(self, count: int = 0, mean: float = 0.0, m2: float = 0.0):
        self.count = int(count)
        self.mean = float(mean)
        self.m2 = float(m2)

    def update(self, values):
        x = np.asarray(values, dtype=np.float64).reshape(-1)
        if x.size == 0:
            return
        n_b = x.size
        mean_b = float(x.mean())
        m2_b = float(((x - mean_b) ** 2).sum())
        n = self.count + n_b
        delta = mean_b - self.mean
        self.mean += delta * n_b / n
        self.m2 += m2_b + delta * delta * self.count * n_b / n
        self.count = n

    @property
    def std(self) -> float:
        return math.sqrt(self.m2 / self.count) if self.count else 0.0

    def state_dict(self) -> dict:
        return {"count": self.count, "mean": self.mean, "m2": self.m2}

    @classmethod
    def from_state(cls, state: dict) -> "RunningStd":
        return cls(state["count"], state["mean"], state["m2"])


def normalize(r_i, rs: RunningStd, eps: float = STD_FLOOR):
    """Update ``rs`` with the raw rewards, then divide them by the running std."""
    rs.update(r_i)
    std = rs.std
    if std < eps:
        warnings.warn(f"running std {std:g} below floor; dividing by {eps:g}",
                      DegenerateWarning, stacklevel=2)
        std = eps
    return np.asarray(r_i, dtype=np.float64) / std


def beta_at(beta0: float, rho: float, t: int) -> float:
    """Closed form ``beta0 * (1 - rho)^t``."""
    if t < 0:
        raise ValueError("t must be >= 0")
    return beta0 * (1.0 - rho) ** t


@dataclass
class BetaSchedule:
    beta0: float
    rho: float = 0.0
    t: int = 0

    def __post_init__(self):
        if self.beta0 < 0 or not 0.0 <= self.rho < 1.0:
            raise ValueError("need beta0 >= 0 and 0 <= rho < 1")

    def value(self, t: int | None = None) -> float:
        return beta_at(self.beta0, self.rho, self.t if t is None else t)

    def advance(self, n: int = 1) -> float:
        self.t += n
        return self.value()

    def state_dict(self) -> dict:
        return {"beta0": self.beta0, "rho": self.rho, "t": self.t}


def combine(r_e, r_i, beta):
    """Total reward ``r_e + beta * r_i``."""
    return r_e + beta * r_i
