"""Synthetic embeddings drawn from per-class Gaussians.

``dynamic`` draws around each original sample, N(z, lam * Sigma_y); the raw
noise offset is stored so the synthetic stays a differentiable function of z.
``fixed`` draws around the class mean, N(mu_y, lam * Sigma_y), and has no
gradient path back to any original sample.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DataError, NumericalError
from .stats import ClassStats

STRATEGIES = ("dynamic", "fixed")


@dataclass(frozen=True)
class AugmentConfig:
    lam: float = 0.7
    m: int = 3
    strategy: str = "dynamic"
    seed: int = 0
    renormalize: bool = True

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError(f"lam must be >= 0, got {self.lam}")
        if self.m < 0:
            raise ValueError(f"m must be >= 0, got {self.m}")
        if self.strategy not in STRATEGIES:
            raise ValueError(f"unknown strategy {self.strategy!r}")


@dataclass
class SyntheticBatch:
    samples: np.ndarray
    origin: np.ndarray
    offset: np.ndarray
    labels: np.ndarray
    renormalize: bool = True
    strategy: str = "dynamic"

    def __len__(self):
        return self.samples.shape[0]

    @property
    def detached(self) -> bool:
        """True when the samples carry no gradient path to the originals."""
        return self.strategy == "fixed"

    @classmethod
    def empty(cls, dim: int) -> "SyntheticBatch":
        return cls(
            np.zeros((0, dim)), np.zeros(0, dtype=np.int64), np.zeros((0, dim)), np.zeros(0, dtype=np.int64)
        )


def _noise_factor(stats: ClassStats, lam: float) -> np.ndarray:
    """Diagonal mode: per-dimension std. Full mode: lower Cholesky factor."""
    cov = lam * stats.cov
    if stats.mode == "diagonal":
        if np.any(cov < 0):
            raise ValueError(f"class {stats.class_id}: negative variance in covariance diagonal")
        return np.sqrt(cov)
    if not np.any(cov):
        return np.zeros_like(cov)
    try:
        return np.linalg.cholesky(cov)
    except np.linalg.LinAlgError:
        pass
    d = cov.shape[0]
    ridge = 1e-8 * np.trace(cov) / d
    try:
        return np.linalg.cholesky(cov + ridge * np.eye(d))
    except np.linalg.LinAlgError:
        raise NumericalError(
            f"class {stats.class_id}: Cholesky failed after ridge {ridge:g}; covariance is corrupt",
            state={"class_id": stats.class_id},
        ) from None


def _as_lookup(stats) -> dict:
    if isinstance(stats, dict):
        return stats
    return {s.class_id: s for s in stats}


def sample_rng(seed: int, epoch: int, batch: int, sample: int) -> np.random.Generator:
    """Independent stream per (seed, epoch, batch, sample)."""
    return np.random.default_rng([seed, epoch, batch, sample])


def _draw(labels, lookup, cfg: AugmentConfig, key):
    epoch, batch = key
    n = len(labels)
    factors = {}
    offsets = []
    for i in range(n):
        y = int(labels[i])
        if y not in factors:
            if y not in lookup:
                raise DataError(f"no statistics for class {y}")
            factors[y] = _noise_factor(lookup[y], cfg.lam)
        f = factors[y]
        eps = sample_rng(cfg.seed, epoch, batch, i).standard_normal((cfg.m, f.shape[0]))
        offsets.append(eps * f if f.ndim == 1 else eps @ f.T)
    return offsets


def _finish(raw, renormalize):
    if not renormalize:
        return raw
    norm = np.linalg.norm(raw, axis=1, keepdims=True)
    if np.any(norm == 0.0):
        raise NumericalError("synthetic sample has zero norm; cannot renormalize")
    return raw / norm


def generate_dynamic(z, labels, stats, cfg: AugmentConfig = AugmentConfig(), key=(0, 0)) -> SyntheticBatch:
    """M synthetic samples per row of ``z``; rows i*M .. i*M+M-1 come from z[i]."""
    z = np.asarray(z, dtype=np.float64)
    labels = np.asarray(labels)
    if cfg.m == 0 or z.shape[0] == 0:
        return SyntheticBatch.empty(z.shape[1])
    offsets = _draw(labels, _as_lookup(stats), cfg, key)
    offset = np.concatenate(offsets)
    origin = np.repeat(np.arange(z.shape[0]), cfg.m)
    samples = _finish(z[origin] + offset, cfg.renormalize)
    return SyntheticBatch(samples, origin, offset, labels[origin].astype(np.int64), cfg.renormalize, "dynamic")


def generate_fixed(labels, stats, cfg: AugmentConfig = AugmentConfig(), key=(0, 0)) -> SyntheticBatch:
    """M samples per entry of ``labels`` drawn around the class mean."""
    labels = np.asarray(labels)
    lookup = _as_lookup(stats)
    dim = next(iter(lookup.values())).dim
    if cfg.m == 0 or labels.shape[0] == 0:
        return SyntheticBatch.empty(dim)
    offset = np.concatenate(_draw(labels, lookup, cfg, key))
    rep = np.repeat(labels, cfg.m)
    means = np.stack([lookup[int(y)].mean for y in rep])
    samples = _finish(means + offset, cfg.renormalize)
    origin = np.full(rep.shape[0], -1, dtype=np.int64)
    return SyntheticBatch(samples, origin, offset, rep.astype(np.int64), cfg.renormalize, "fixed")


def generate(z, labels, stats, cfg: AugmentConfig = AugmentConfig(), key=(0, 0)) -> SyntheticBatch:
    if cfg.strategy == "fixed":
        return generate_fixed(labels, stats, cfg, key)
    return generate_dynamic(z, labels, stats, cfg, key)
