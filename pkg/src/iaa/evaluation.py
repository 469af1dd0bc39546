"""Exact retrieval metrics (Recall@K, R-precision, MAP@R) by brute-force search.

Each sample queries every other sample; neighbors are ranked by Euclidean
distance with ties broken by ascending index. Queries whose class has no other
member are skipped.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np


def _mean(values) -> float:
    # correctly rounded, so the result does not depend on summation order
    values = list(values)
    return math.fsum(values) / len(values)


@dataclass
class RetrievalResult:
    rankings: list
    relevant: list
    n_queries: int
    n_skipped: int

    def recall_at_k(self, k: int) -> float:
        if not self.n_queries:
            return 0.0
        return _mean(float(rel[:k].any()) for rel in self.relevant)

    def r_precision(self) -> float:
        if not self.n_queries:
            return 0.0
        scores = []
        for rel in self.relevant:
            r = int(rel.sum())
            scores.append(int(rel[:r].sum()) / r)
        return _mean(scores)

    def map_at_r(self) -> float:
        if not self.n_queries:
            return 0.0
        scores = []
        for rel in self.relevant:
            r = int(rel.sum())
            hits = np.flatnonzero(rel[:r])
            # precision at each relevant rank: (number of hits so far) / rank
            scores.append(math.fsum((np.arange(1, hits.size + 1) / (hits + 1)).tolist()) / r)
        return _mean(scores)


def _rank_one(q, emb, gallery):
    diff = emb[gallery] - emb[q]
    d2 = np.sum(diff * diff, axis=1)
    return gallery[np.argsort(d2, kind="stable")]


def retrieve(embeddings, labels, queries=None, gallery=None, workers: int = 1) -> RetrievalResult:
    """Rank the gallery for every query.

    Without an explicit split every sample is a query against all other
    samples. With ``queries``/``gallery`` index arrays the two sets are used as
    given (a query is still never matched with itself).
    """
    emb = np.asarray(embeddings, dtype=np.float64)
    labels = np.asarray(labels)
    n = emb.shape[0]
    queries = np.arange(n) if queries is None else np.asarray(queries)
    full_gallery = np.arange(n) if gallery is None else np.asarray(gallery)

    def one(q):
        g = full_gallery[full_gallery != q]
        ranked = _rank_one(q, emb, g)
        return ranked, labels[ranked] == labels[q]

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(one, queries))
    else:
        rows = [one(q) for q in queries]
    kept = [(r, rel) for r, rel in rows if rel.any()]
    return RetrievalResult(
        rankings=[r for r, _ in kept],
        relevant=[rel for _, rel in kept],
        n_queries=len(kept),
        n_skipped=len(rows) - len(kept),
    )


def _gallery_size(n, gallery):
    return n if gallery is None else len(gallery)


def recall_at_k(embeddings, labels, k: int, result: RetrievalResult | None = None) -> float:
    n = len(labels)
    if k < 1 or k >= n:
        raise ValueError(f"K must satisfy 1 <= K < {n} (gallery size), got {k}")
    result = result or retrieve(embeddings, labels)
    return result.recall_at_k(k)


def r_precision(embeddings, labels, result: RetrievalResult | None = None) -> float:
    return (result or retrieve(embeddings, labels)).r_precision()


def map_at_r(embeddings, labels, result: RetrievalResult | None = None) -> float:
    return (result or retrieve(embeddings, labels)).map_at_r()


def evaluate(embeddings, labels, ks=(1, 2, 4, 8), workers: int = 1, queries=None, gallery=None) -> dict:
    """All metrics in one pass; K values that exceed the gallery are omitted."""
    res = retrieve(embeddings, labels, queries, gallery, workers)
    size = _gallery_size(len(labels), gallery)
    out = {f"recall@{k}": res.recall_at_k(k) for k in ks if k < size}
    out["rp"] = res.r_precision()
    out["map_at_r"] = res.map_at_r()
    out["n_queries"] = res.n_queries
    out["n_skipped"] = res.n_skipped
    return out


HIST_EDGES = np.linspace(-1.0, 1.0, 101)


def similarity_histogram(embeddings, labels, edges=HIST_EDGES):
    """Counts of cosine similarities over all unordered pairs, split into
    same-class and different-class pairs."""
    emb = np.asarray(embeddings, dtype=np.float64)
    u = emb / np.linalg.norm(emb, axis=1, keepdims=True)
    labels = np.asarray(labels)
    iu, ju = np.triu_indices(emb.shape[0], k=1)
    s = np.clip(np.sum(u[iu] * u[ju], axis=1), -1.0, 1.0)
    same = labels[iu] == labels[ju]
    pos, _ = np.histogram(s[same], bins=edges)
    neg, _ = np.histogram(s[~same], bins=edges)
    return edges, pos, neg
