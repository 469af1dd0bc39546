"""Rank correlation between class-mean distances and class-covariance distances."""

from __future__ import annotations

import csv
import io
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.stats import rankdata

from .stats import ClassStats, GlobalStats


@dataclass(frozen=True)
class DistanceMetricConfig:
    """Norm order and transforms for mean/covariance distances.

    The default (squared means, raw covariances, p=2) is the metric used for
    neighbor selection.
    """

    p: int = 2
    square_mean: bool = True
    sqrt_cov: bool = False

    def __post_init__(self):
        if self.p not in (1, 2, 3, 4):
            raise ValueError(f"norm order p must be one of 1..4, got {self.p}")


DEFAULT_METRIC = DistanceMetricConfig()


def _pnorm(x: np.ndarray, p: int) -> float:
    # entrywise norm, also for matrices
    a = np.abs(np.ravel(x))
    if p == 1:
        return float(a.sum())
    if p == 2:
        return float(np.sqrt(np.sum(a * a)))
    return float(np.sum(a**p) ** (1.0 / p))


def mean_distance(mu_i, mu_j, cfg: DistanceMetricConfig = DEFAULT_METRIC) -> float:
    mu_i = np.asarray(mu_i, dtype=np.float64)
    mu_j = np.asarray(mu_j, dtype=np.float64)
    if mu_i.shape != mu_j.shape:
        raise ValueError(f"dimension mismatch: {mu_i.shape} vs {mu_j.shape}")
    if cfg.square_mean:
        return _pnorm(mu_i**2 - mu_j**2, cfg.p)
    return _pnorm(mu_i - mu_j, cfg.p)


def _cov_sqrt(cov: np.ndarray) -> np.ndarray:
    if cov.ndim == 1:
        if np.any(cov < 0):
            raise ValueError("negative variance has no square root")
        return np.sqrt(cov)
    w, v = np.linalg.eigh(cov)
    tol = 1e-9 * max(1.0, float(np.abs(w).max(initial=0.0)))
    if np.any(w < -tol):
        raise ValueError("covariance is not positive semidefinite")
    return (v * np.sqrt(np.clip(w, 0.0, None))) @ v.T


def cov_distance(cov_i, cov_j, cfg: DistanceMetricConfig = DEFAULT_METRIC) -> float:
    cov_i = np.asarray(cov_i, dtype=np.float64)
    cov_j = np.asarray(cov_j, dtype=np.float64)
    if cov_i.shape != cov_j.shape:
        raise ValueError(f"shape mismatch: {cov_i.shape} vs {cov_j.shape}")
    if cfg.sqrt_cov:
        return _pnorm(_cov_sqrt(cov_i) - _cov_sqrt(cov_j), cfg.p)
    return _pnorm(cov_i - cov_j, cfg.p)


def spearman(x, y) -> float:
    """Spearman rank correlation with average ranks for ties."""
    x = np.asarray(x, dtype=np.float64).ravel()
    y = np.asarray(y, dtype=np.float64).ravel()
    if x.size != y.size:
        raise ValueError(f"length mismatch: {x.size} vs {y.size}")
    if x.size < 2:
        raise ValueError("need at least two observations")
    rx = rankdata(x, method="average")
    ry = rankdata(y, method="average")
    rx -= rx.mean()
    ry -= ry.mean()
    denom = np.sqrt(np.sum(rx * rx) * np.sum(ry * ry))
    if denom == 0.0:
        raise ValueError("Spearman correlation is undefined for a constant sequence")
    return float(np.clip(np.sum(rx * ry) / denom, -1.0, 1.0))


def pairwise_distances(stats: list[ClassStats], cfg: DistanceMetricConfig = DEFAULT_METRIC):
    """Symmetric C x C matrices of mean distances and covariance distances."""
    c = len(stats)
    dm = np.zeros((c, c))
    dc = np.zeros((c, c))
    covs = [_cov_sqrt(s.cov) for s in stats] if cfg.sqrt_cov else [s.cov for s in stats]
    raw = DistanceMetricConfig(cfg.p, cfg.square_mean, sqrt_cov=False)
    for i in range(c):
        for j in range(i + 1, c):
            dm[i, j] = dm[j, i] = mean_distance(stats[i].mean, stats[j].mean, cfg)
            dc[i, j] = dc[j, i] = cov_distance(covs[i], covs[j], raw)
    return dm, dc


def _minmax(x: np.ndarray) -> np.ndarray:
    lo, hi = x.min(), x.max()
    if hi == lo:
        return np.zeros_like(x)
    return (x - lo) / (hi - lo)


@dataclass
class CorrelationReport:
    class_ids: list
    per_class_rho: np.ndarray
    mean_curve: np.ndarray
    cov_curve: np.ndarray
    config: DistanceMetricConfig = field(default_factory=DistanceMetricConfig)

    @property
    def mean_rho(self) -> float:
        return float(np.mean(self.per_class_rho))

    def to_json(self) -> dict:
        return {
            "per_class_rho": {str(k): float(r) for k, r in zip(self.class_ids, self.per_class_rho)},
            "mean_rho": self.mean_rho,
            "config": asdict(self.config),
        }

    def curves_csv(self) -> str:
        out = io.StringIO()
        w = csv.writer(out, lineterminator="\n")
        w.writerow(["rank_index", "mean_dist_norm", "cov_dist_norm"])
        for i, (a, b) in enumerate(zip(self.mean_curve, self.cov_curve)):
            w.writerow([i, repr(float(a)), repr(float(b))])
        return out.getvalue()


def correlation_report(stats: list[ClassStats], cfg: DistanceMetricConfig = DEFAULT_METRIC) -> CorrelationReport:
    """Per-anchor Spearman correlation between mean and covariance distances.

    For every anchor class the other classes are sorted by descending mean
    distance; both distance sequences are min-max scaled to [0, 1] per anchor
    and then averaged over anchors to form the rank curves.
    """
    c = len(stats)
    if c < 3:
        raise ValueError(f"need at least 3 classes, got {c}")
    dm, dc = pairwise_distances(stats, cfg)
    rho = np.empty(c)
    mean_curve = np.zeros(c - 1)
    cov_curve = np.zeros(c - 1)
    for k in range(c):
        others = np.delete(np.arange(c), k)
        x, y = dm[k, others], dc[k, others]
        rho[k] = spearman(x, y)
        order = np.argsort(-x, kind="stable")
        mean_curve += _minmax(x[order])
        cov_curve += _minmax(y[order])
    return CorrelationReport(
        class_ids=[s.class_id for s in stats],
        per_class_rho=rho,
        mean_curve=mean_curve / c,
        cov_curve=cov_curve / c,
        config=cfg,
    )


def metric_sweep(stats: list[ClassStats], ps=(1, 2, 3)) -> list[dict]:
    """Mean Spearman correlation for every mean/covariance metric variant."""
    rows = []
    for square_mean in (True, False):
        for sqrt_cov in (False, True):
            for p in ps:
                cfg = DistanceMetricConfig(p, square_mean, sqrt_cov)
                rows.append({**asdict(cfg), "mean_rho": correlation_report(stats, cfg).mean_rho})
    return rows


def global_distance_profile(
    stats: list[ClassStats], global_stats: GlobalStats, cfg: DistanceMetricConfig = DEFAULT_METRIC
) -> tuple[np.ndarray, float]:
    """Distance from the pooled covariance to each class covariance, plus its
    distance to the origin."""
    if not stats:
        raise ValueError("stats must be non-empty")
    dists = np.array([cov_distance(global_stats.cov, s.cov, cfg) for s in stats])
    reference = cov_distance(global_stats.cov, np.zeros_like(global_stats.cov), cfg)
    return dists, reference
