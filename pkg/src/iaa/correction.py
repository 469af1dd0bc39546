"""Neighbor correction of class covariances for classes with few samples.

Each class covariance is blended with a kernel-weighted pool of its nearest
classes (nearest by the squared-mean distance) and with the global covariance.
The blend strength ``alpha`` decays with the class sample count and is zero
above the threshold ``tau``.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .correlation import (
    DEFAULT_METRIC,
    DistanceMetricConfig,
    cov_distance,
    mean_distance,
    pairwise_distances,
)
from .stats import ClassStats, GlobalStats, stats_to_json


@dataclass(frozen=True)
class CorrectionConfig:
    k: int = 25
    sigma_m: float = 1.0
    sigma_cv: float = 1.0
    beta: float = 0.1
    tau: int = 40
    gamma: float = 0.1
    include_self: bool = False
    # ablation only: use this alpha for every class instead of the weight function
    fixed_alpha: float | None = None
    metric: DistanceMetricConfig = field(default_factory=DistanceMetricConfig)

    def __post_init__(self):
        for name in ("sigma_m", "sigma_cv"):
            v = getattr(self, name)
            if isinstance(v, str):
                v = float(v)
                object.__setattr__(self, name, v)
            if not v > 0:
                raise ValueError(f"{name} must be positive, got {v}")
        if isinstance(self.metric, dict):
            object.__setattr__(self, "metric", DistanceMetricConfig(**self.metric))
        if self.k < 1:
            raise ValueError(f"k must be >= 1, got {self.k}")
        if not 0.0 <= self.gamma <= 1.0:
            raise ValueError(f"gamma must lie in [0, 1], got {self.gamma}")
        if not self.beta > 0:
            raise ValueError(f"beta must be positive, got {self.beta}")
        if self.tau < 1:
            raise ValueError(f"tau must be >= 1, got {self.tau}")
        if self.fixed_alpha is not None and not 0.0 <= self.fixed_alpha <= 1.0:
            raise ValueError(f"fixed_alpha must lie in [0, 1], got {self.fixed_alpha}")

    def to_dict(self) -> dict:
        d = asdict(self)
        for name in ("sigma_m", "sigma_cv"):
            if math.isinf(d[name]):
                d[name] = "inf"
        return d


def alpha(n: int, beta: float = 0.1, tau: int = 40) -> float:
    """Neighbor weight function: 1 / (1 + ln(1 + beta (n - 1))) for n <= tau, else 0."""
    if n < 1:
        raise ValueError(f"sample count must be >= 1, got {n}")
    if n > tau:
        return 0.0
    return 1.0 / (1.0 + math.log1p(beta * (n - 1)))


def _kernel_exponent(dist: float, sigma: float) -> float:
    if math.isinf(sigma):
        return 0.0
    return -(dist * dist) / (2.0 * sigma * sigma)


def _neighbors_from_row(dist_row, class_ids, k, K, include_self):
    cand = np.arange(len(dist_row))
    if not include_self:
        cand = cand[cand != k]
    order = np.lexsort((class_ids[cand], dist_row[cand]))
    return cand[order[:K]]


def neighbor_set(
    stats: list[ClassStats],
    k: int,
    K: int,
    metric: DistanceMetricConfig = DEFAULT_METRIC,
    include_self: bool = False,
) -> np.ndarray:
    """Positions (into ``stats``) of the K classes closest to class position k."""
    if len(stats) < 2:
        raise ValueError("need at least two classes")
    d = np.array([mean_distance(s.mean, stats[k].mean, metric) for s in stats])
    ids = np.array([s.class_id for s in stats])
    return _neighbors_from_row(d, ids, k, K, include_self)


def neighbor_weight(i: int, k: int, stats: list[ClassStats], cfg: CorrectionConfig = CorrectionConfig()) -> float:
    dm = mean_distance(stats[i].mean, stats[k].mean, cfg.metric)
    dc = cov_distance(stats[i].cov, stats[k].cov, cfg.metric)
    return stats[i].count * math.exp(_kernel_exponent(dm, cfg.sigma_m) + _kernel_exponent(dc, cfg.sigma_cv))


def _pool(covs, counts, neighbors, dm_row, dc_row, cfg):
    expo = np.array([_kernel_exponent(dm_row[i], cfg.sigma_m) + _kernel_exponent(dc_row[i], cfg.sigma_cv) for i in neighbors])
    n = np.array([counts[i] for i in neighbors], dtype=np.float64)
    weights = n * np.exp(expo)
    # normalize in log space so that the ratio survives kernel underflow
    logw = np.log(n) + expo
    rel = np.exp(logw - logw.max())
    assert rel.sum() > 0
    pooled = np.tensordot(rel, covs[neighbors], axes=1) / rel.sum()
    return pooled, weights


def neighbor_covariance(stats: list[ClassStats], k: int, cfg: CorrectionConfig = CorrectionConfig()) -> np.ndarray:
    """Kernel-weighted average of the neighbor covariances of class position k."""
    neighbors = neighbor_set(stats, k, cfg.k, cfg.metric, cfg.include_self)
    if neighbors.size == 0:
        raise ValueError("empty neighbor set")
    covs = np.stack([s.cov for s in stats])
    counts = [s.count for s in stats]
    dm = np.array([mean_distance(s.mean, stats[k].mean, cfg.metric) for s in stats])
    dc = np.array([cov_distance(s.cov, stats[k].cov, cfg.metric) for s in stats])
    pooled, _ = _pool(covs, counts, neighbors, dm, dc, cfg)
    return pooled


@dataclass
class CorrectedStats:
    stats: list[ClassStats]
    alphas: np.ndarray
    neighbors: list[np.ndarray]
    weights: list[np.ndarray]
    config: CorrectionConfig = field(default_factory=CorrectionConfig)

    def to_json(self, global_stats: GlobalStats) -> dict:
        doc = stats_to_json(self.stats, global_stats)
        ids = [s.class_id for s in self.stats]
        for entry, a, nb, w in zip(doc["classes"], self.alphas, self.neighbors, self.weights):
            entry["alpha"] = float(a)
            entry["neighbors"] = [int(ids[j]) for j in nb]
            entry["weights"] = [float(x) for x in w]
        doc["correction"] = self.config.to_dict()
        return doc


def correct_covariance(
    stats: list[ClassStats],
    global_stats: GlobalStats,
    cfg: CorrectionConfig = CorrectionConfig(),
    workers: int = 1,
) -> CorrectedStats:
    """Blend each class covariance with its neighbor pool and the global covariance."""
    if any(s.mode != global_stats.mode for s in stats):
        raise ValueError("class and global covariances must share a mode")
    c = len(stats)
    covs = np.stack([s.cov for s in stats])
    counts = [s.count for s in stats]
    ids = np.array([s.class_id for s in stats])
    dm, dc = (pairwise_distances(stats, cfg.metric) if c > 1 else (np.zeros((1, 1)), np.zeros((1, 1))))

    def one(k):
        s = stats[k]
        a = cfg.fixed_alpha if cfg.fixed_alpha is not None else alpha(s.count, cfg.beta, cfg.tau)
        if c < 2 and not cfg.include_self:
            nb = np.array([], dtype=np.int64)
        else:
            nb = _neighbors_from_row(dm[k], ids, k, cfg.k, cfg.include_self)
        if nb.size:
            pooled, w = _pool(covs, counts, nb, dm[k], dc[k], cfg)
        else:
            # lone class: the neighbor term falls back to the global covariance
            pooled, w = global_stats.cov, np.array([])
        cov = (1.0 - a) * s.cov + a * ((1.0 - cfg.gamma) * pooled + cfg.gamma * global_stats.cov)
        return replace(s, cov=cov), a, nb, w

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(one, range(c)))
    else:
        rows = [one(k) for k in range(c)]
    return CorrectedStats(
        stats=[r[0] for r in rows],
        alphas=np.array([r[1] for r in rows]),
        neighbors=[r[2] for r in rows],
        weights=[r[3] for r in rows],
        config=cfg,
    )
