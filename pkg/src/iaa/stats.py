"""Per-class Gaussian statistics in embedding space.

Means and covariances are maximum-likelihood estimates (divisor ``n_k``).
Covariances are held either as the diagonal (a length-D vector) or as the
full D x D matrix, selected by ``mode``.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace

import jsonschema
import numpy as np

from .core import ClassIndex, Dataset
from .errors import DataError

MODES = ("diagonal", "full")
DEGENERATIONS = ("identity", "global", "diagonal", "keep")


def _check_mode(mode):
    if mode not in MODES:
        raise ValueError(f"unknown covariance mode {mode!r}; expected one of {MODES}")


@dataclass(frozen=True)
class ClassStats:
    class_id: int
    count: int
    mean: np.ndarray
    cov: np.ndarray
    mode: str = "diagonal"

    @property
    def dim(self) -> int:
        return self.mean.shape[0]

    def cov_diag(self) -> np.ndarray:
        return self.cov if self.mode == "diagonal" else np.diag(self.cov).copy()


@dataclass(frozen=True)
class GlobalStats:
    cov: np.ndarray
    total: int
    mode: str = "diagonal"


def _class_moments(x: np.ndarray, mode: str):
    n = x.shape[0]
    mean = x.sum(axis=0) / n
    centered = x - mean
    if mode == "diagonal":
        cov = (centered**2).sum(axis=0) / n
    else:
        cov = centered.T @ centered / n
        cov = 0.5 * (cov + cov.T)
    return mean, cov


def estimate_class_stats(
    dataset: Dataset,
    class_index: ClassIndex | None = None,
    mode: str = "diagonal",
    workers: int = 1,
) -> list[ClassStats]:
    """Two-pass ML mean and covariance for every class in ``class_index``.

    Output order follows ``class_index.classes``. Singleton classes get a zero
    covariance.
    """
    _check_mode(mode)
    if class_index is None:
        class_index = dataset.class_index()
    emb = dataset.embeddings

    def one(c):
        idx = class_index.members[c]
        if len(idx) == 0:
            raise DataError(f"class {class_index.classes[c]} has no samples")
        mean, cov = _class_moments(emb[idx], mode)
        return ClassStats(class_index.classes[c], len(idx), mean, cov, mode)

    rng = range(class_index.num_classes)
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(one, rng))
    return [one(c) for c in rng]


def streaming_class_stats(dataset: Dataset, mode: str = "diagonal") -> list[ClassStats]:
    """Single pass over the samples using Welford updates."""
    _check_mode(mode)
    index = dataset.class_index()
    c, d = index.num_classes, dataset.dim
    count = np.zeros(c, dtype=np.int64)
    mean = np.zeros((c, d))
    m2 = np.zeros((c, d)) if mode == "diagonal" else np.zeros((c, d, d))
    for row, k in zip(dataset.embeddings, index.dense):
        count[k] += 1
        delta = row - mean[k]
        mean[k] += delta / count[k]
        delta2 = row - mean[k]
        if mode == "diagonal":
            m2[k] += delta * delta2
        else:
            m2[k] += np.outer(delta, delta2)
    out = []
    for k in range(c):
        cov = m2[k] / count[k]
        if mode == "full":
            cov = 0.5 * (cov + cov.T)
        out.append(ClassStats(index.classes[k], int(count[k]), mean[k], cov, mode))
    return out


def estimate_global_covariance(stats: list[ClassStats]) -> GlobalStats:
    if not stats:
        raise ValueError("need at least one class")
    mode = stats[0].mode
    if any(s.mode != mode for s in stats):
        raise ValueError("mixed covariance modes")
    counts = np.array([s.count for s in stats], dtype=np.float64)
    covs = np.stack([s.cov for s in stats])
    cov = np.tensordot(counts, covs, axes=1) / counts.sum()
    return GlobalStats(cov, int(counts.sum()), mode)


def degenerate_covariance(stats: list[ClassStats], global_stats: GlobalStats, mode: str) -> list[ClassStats]:
    """Replace every class covariance by a simplified stand-in.

    ``identity`` uses I, ``global`` uses the pooled covariance, ``diagonal``
    zeroes off-diagonal entries (a no-op in diagonal mode) and ``keep``
    returns the input unchanged.
    """
    if mode not in DEGENERATIONS:
        raise ValueError(f"unknown degeneration {mode!r}; expected one of {DEGENERATIONS}")
    if mode == "keep":
        return list(stats)
    out = []
    for s in stats:
        if mode == "identity":
            cov = np.ones(s.dim) if s.mode == "diagonal" else np.eye(s.dim)
        elif mode == "global":
            cov = global_stats.cov.copy()
        else:
            cov = s.cov.copy() if s.mode == "diagonal" else np.diag(np.diag(s.cov))
        out.append(replace(s, cov=cov))
    return out


def stack(stats: list[ClassStats]):
    """Return (counts, means, covs) arrays in list order."""
    counts = np.array([s.count for s in stats], dtype=np.int64)
    means = np.stack([s.mean for s in stats])
    covs = np.stack([s.cov for s in stats])
    return counts, means, covs


# --- JSON --------------------------------------------------------------------

_VEC = {"type": "array", "items": {"type": "number"}}
_MAT = {"type": "array", "items": _VEC}

STATS_SCHEMA = {
    "type": "object",
    "required": ["mode", "classes", "global_cov"],
    "properties": {
        "mode": {"enum": list(MODES)},
        "total": {"type": "integer", "minimum": 1},
        "classes": {
            "type": "array",
            "minItems": 1,
            "items": {
                "type": "object",
                "required": ["class_id", "n", "mean"],
                "properties": {
                    "class_id": {"type": "integer", "minimum": 0},
                    "n": {"type": "integer", "minimum": 1},
                    "mean": _VEC,
                    "cov_diag": _VEC,
                    "cov": _MAT,
                    "alpha": {"type": "number", "minimum": 0, "maximum": 1},
                    "neighbors": {"type": "array", "items": {"type": "integer"}},
                    "weights": _VEC,
                },
            },
        },
        "global_cov": {"anyOf": [_VEC, _MAT]},
    },
}


def class_stats_to_dict(s: ClassStats) -> dict:
    out = {"class_id": int(s.class_id), "n": int(s.count), "mean": s.mean.tolist()}
    if s.mode == "diagonal":
        out["cov_diag"] = s.cov.tolist()
    else:
        out["cov_diag"] = np.diag(s.cov).tolist()
        out["cov"] = s.cov.tolist()
    return out


def stats_to_json(stats: list[ClassStats], global_stats: GlobalStats) -> dict:
    return {
        "mode": global_stats.mode,
        "total": int(global_stats.total),
        "classes": [class_stats_to_dict(s) for s in stats],
        "global_cov": global_stats.cov.tolist(),
    }


def stats_from_json(doc: dict) -> tuple[list[ClassStats], GlobalStats]:
    try:
        jsonschema.validate(doc, STATS_SCHEMA)
    except jsonschema.ValidationError as exc:
        raise DataError(f"invalid stats document: {exc.message}") from None
    mode = doc["mode"]
    key = "cov_diag" if mode == "diagonal" else "cov"
    stats = []
    for entry in doc["classes"]:
        if key not in entry:
            raise DataError(f"class {entry['class_id']} lacks {key!r} for mode {mode}")
        mean = np.array(entry["mean"], dtype=np.float64)
        cov = np.array(entry[key], dtype=np.float64)
        expected = (mean.size,) if mode == "diagonal" else (mean.size, mean.size)
        if cov.shape != expected:
            raise DataError(f"class {entry['class_id']}: covariance shape {cov.shape} != {expected}")
        stats.append(ClassStats(entry["class_id"], entry["n"], mean, cov, mode))
    gcov = np.array(doc["global_cov"], dtype=np.float64)
    if gcov.shape != stats[0].cov.shape:
        raise DataError("global covariance shape does not match class covariances")
    total = doc.get("total", sum(s.count for s in stats))
    return stats, GlobalStats(gcov, total, mode)
