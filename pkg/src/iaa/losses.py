"""Pair-based metric learning losses, optionally boosted with synthetic samples.

Every loss treats the original batch samples as anchors and the originals plus
synthetic samples as candidates. Inputs are L2-normalized inside the loss, and
the returned gradient is taken with respect to the raw (pre-normalization)
batch embeddings. Gradients reaching a dynamic synthetic sample are folded
into its origin row through the stored offset (d z_hat / d z = I before
normalization); fixed-strategy synthetics are constants.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .augment import SyntheticBatch

VARIANTS = ("contrastive", "triplet", "ms")


@dataclass(frozen=True)
class LossConfig:
    variant: str = "triplet"
    pos_margin: float = 0.0
    neg_margin: float = 0.5
    margin: float = 0.2
    ms_alpha: float = 2.0
    ms_beta: float = 50.0
    ms_lambda: float = 0.5
    ms_epsilon: float = 0.1

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown loss variant {self.variant!r}; expected one of {VARIANTS}")
        if min(self.pos_margin, self.neg_margin, self.margin) < 0:
            raise ValueError("margins must be >= 0")
        if self.ms_alpha <= 0 or self.ms_beta <= 0:
            raise ValueError("ms_alpha and ms_beta must be positive")


@dataclass
class Batch:
    embeddings: np.ndarray
    labels: np.ndarray
    synthetic: SyntheticBatch | None = None

    def __post_init__(self):
        self.embeddings = np.asarray(self.embeddings, dtype=np.float64)
        self.labels = np.asarray(self.labels)
        if self.embeddings.shape[0] != self.labels.shape[0]:
            raise ValueError("embedding rows and labels differ in length")
        syn = self.synthetic
        if syn is not None and len(syn) and not syn.detached:
            if not np.array_equal(syn.labels, self.labels[syn.origin]):
                raise ValueError("synthetic labels must match their origin labels")

    def without_synthetic(self) -> "Batch":
        return Batch(self.embeddings, self.labels, None)


@dataclass
class LossOutput:
    value: float
    grad: np.ndarray
    active: int = 0
    selected: int = 0
    selected_synthetic: int = 0
    skipped_anchors: int = 0
    extra: dict = field(default_factory=dict)

    @property
    def synthetic_ratio(self) -> float:
        return self.selected_synthetic / self.selected if self.selected else 0.0


class _Candidates:
    """Normalized anchors and candidates plus the chain rule back to raw inputs."""

    def __init__(self, batch: Batch):
        z = batch.embeddings
        self.n = z.shape[0]
        self.z = z
        self.r = np.linalg.norm(z, axis=1, keepdims=True)
        self.u = z / self.r
        syn = batch.synthetic
        self.syn = syn if syn is not None and len(syn) else None
        if self.syn is None:
            self.points = self.u
            self.labels = batch.labels
            return
        if self.syn.detached:
            v = self.syn.samples
        else:
            raw = z[self.syn.origin] + self.syn.offset
            if self.syn.renormalize:
                self.vr = np.linalg.norm(raw, axis=1, keepdims=True)
                v = raw / self.vr
            else:
                v = raw
        self.v = v
        self.points = np.vstack([self.u, v])
        self.labels = np.concatenate([batch.labels, self.syn.labels])

    def masks(self):
        same = self.labels[None, :] == self.labels[: self.n, None]
        pos = same.copy()
        pos[np.arange(self.n), np.arange(self.n)] = False
        return pos, ~same

    def is_synthetic(self):
        flag = np.zeros(self.points.shape[0], dtype=bool)
        flag[self.n :] = True
        return flag

    def backward(self, g_anchor: np.ndarray, g_points: np.ndarray) -> np.ndarray:
        """Fold gradients on anchors (n x D) and candidates ((n+m) x D) into raw z."""
        g_u = g_anchor + g_points[: self.n]
        grad = np.zeros_like(self.z)
        if self.syn is not None and not self.syn.detached:
            g_v = g_points[self.n :]
            if self.syn.renormalize:
                g_v = (g_v - self.v * np.sum(self.v * g_v, axis=1, keepdims=True)) / self.vr
            np.add.at(grad, self.syn.origin, g_v)
        grad += (g_u - self.u * np.sum(self.u * g_u, axis=1, keepdims=True)) / self.r
        return grad


def _distances(c: _Candidates):
    diff = c.u[:, None, :] - c.points[None, :, :]
    return np.sqrt(np.sum(diff * diff, axis=2)), diff


def _distance_backward(c: _Candidates, coef: np.ndarray, d: np.ndarray, diff: np.ndarray) -> np.ndarray:
    # d d_ij / d u_i = (u_i - c_j) / d_ij; zero-distance pairs get the zero subgradient
    with np.errstate(divide="ignore", invalid="ignore"):
        w = np.where(d > 0, coef / d, 0.0)
    g_anchor = np.einsum("ij,ijd->id", w, diff)
    g_points = -np.einsum("ij,ijd->jd", w, diff)
    return c.backward(g_anchor, g_points)


def contrastive_iaa(batch: Batch, cfg: LossConfig = LossConfig(variant="contrastive")) -> LossOutput:
    c = _Candidates(batch)
    d, diff = _distances(c)
    pos, neg = c.masks()
    hp = np.where(pos, d - cfg.pos_margin, 0.0)
    hn = np.where(neg, cfg.neg_margin - d, 0.0)
    act_p = pos & (hp > 0)
    act_n = neg & (hn > 0)
    value = (np.sum(np.where(act_p, hp, 0.0)) + np.sum(np.where(act_n, hn, 0.0))) / c.n
    coef = (act_p.astype(np.float64) - act_n.astype(np.float64)) / c.n
    syn = c.is_synthetic()
    active = act_p | act_n
    return LossOutput(
        value=float(value),
        grad=_distance_backward(c, coef, d, diff),
        active=int(active.sum()),
        selected=int(active.sum()),
        selected_synthetic=int(active[:, syn].sum()),
    )


def triplet_iaa(batch: Batch, cfg: LossConfig = LossConfig(variant="triplet")) -> LossOutput:
    """Hardest-negative triplet loss summed over all positives of each anchor."""
    c = _Candidates(batch)
    d, diff = _distances(c)
    pos, neg = c.masks()
    valid = pos.any(axis=1) & neg.any(axis=1)
    dneg = np.where(neg, d, np.inf)
    kstar = np.argmin(dneg, axis=1)
    rows = np.arange(c.n)
    dmin = dneg[rows, kstar]
    t = np.where(pos & valid[:, None], d - np.where(valid, dmin, 0.0)[:, None] + cfg.margin, 0.0)
    act = pos & valid[:, None] & (t > 0)
    value = np.sum(np.where(act, t, 0.0)) / c.n
    n_act = act.sum(axis=1)
    coef = act.astype(np.float64)
    coef[rows, kstar] -= np.where(valid, n_act, 0)
    coef /= c.n
    syn = c.is_synthetic()
    used_neg = valid & (n_act > 0)
    sel_syn = int(act[:, syn].sum()) + int(np.sum(used_neg & syn[kstar]))
    return LossOutput(
        value=float(value),
        grad=_distance_backward(c, coef, d, diff),
        active=int(act.sum()),
        selected=int(act.sum()) + int(used_neg.sum()),
        selected_synthetic=sel_syn,
        skipped_anchors=int((~valid).sum()),
        extra={"hardest_negative": kstar},
    )


def _similarities(c: _Candidates):
    raw = c.u @ c.points.T
    return np.clip(raw, -1.0, 1.0), (raw >= -1.0) & (raw <= 1.0)


def ms_mining(batch: Batch, epsilon: float = 0.1):
    """Hard positive / negative candidate indices per anchor.

    Negatives are kept when more similar than the least similar positive minus
    epsilon; positives are kept when less similar than the most similar
    negative plus epsilon. Anchors lacking a positive or a negative get empty
    sets. Indices refer to the candidate list (originals, then synthetics).
    """
    c = _Candidates(batch)
    s, _ = _similarities(c)
    hard_p, hard_n, _ = _mine(c, s, epsilon)
    return [(np.flatnonzero(hard_p[i]), np.flatnonzero(hard_n[i])) for i in range(c.n)]


def _mine(c, s, epsilon):
    pos, neg = c.masks()
    valid = pos.any(axis=1) & neg.any(axis=1)
    min_pos = np.where(pos, s, np.inf).min(axis=1)
    max_neg = np.where(neg, s, -np.inf).max(axis=1)
    hard_n = neg & (s > (min_pos - epsilon)[:, None]) & valid[:, None]
    hard_p = pos & (s < (max_neg + epsilon)[:, None]) & valid[:, None]
    return hard_p, hard_n, valid


def _log1p_sum_exp(x: np.ndarray, mask: np.ndarray):
    """Row-wise log(1 + sum_{mask} exp(x)) and the softmax-style weights."""
    xm = np.where(mask, x, -np.inf)
    top = np.max(xm, axis=1, keepdims=True)
    shift = np.maximum(top, 0.0)
    total = np.exp(-shift[:, 0]) + np.sum(np.where(mask, np.exp(xm - shift), 0.0), axis=1)
    lse = shift[:, 0] + np.log(total)
    weights = np.where(mask, np.exp(xm - lse[:, None]), 0.0)
    return lse, weights


def ms_iaa(batch: Batch, cfg: LossConfig = LossConfig(variant="ms")) -> LossOutput:
    c = _Candidates(batch)
    s, inside = _similarities(c)
    hard_p, hard_n, valid = _mine(c, s, cfg.ms_epsilon)
    a, b, lam = cfg.ms_alpha, cfg.ms_beta, cfg.ms_lambda
    lp, wp = _log1p_sum_exp(a * (lam - s), hard_p)
    ln, wn = _log1p_sum_exp(b * (s - lam), hard_n)
    value = np.sum(lp / a + ln / b) / c.n
    coef = np.where(inside, (wn - wp) / c.n, 0.0)
    g_anchor = coef @ c.points
    g_points = coef.T @ c.u
    selected = hard_p | hard_n
    syn = c.is_synthetic()
    return LossOutput(
        value=float(value),
        grad=c.backward(g_anchor, g_points),
        active=int(selected.sum()),
        selected=int(selected.sum()),
        selected_synthetic=int(selected[:, syn].sum()),
        skipped_anchors=int((~valid).sum()),
    )


_DISPATCH = {"contrastive": contrastive_iaa, "triplet": triplet_iaa, "ms": ms_iaa}


def compute_loss(batch: Batch, cfg: LossConfig) -> LossOutput:
    return _DISPATCH[cfg.variant](batch, cfg)


def contrastive_loss(batch: Batch, cfg: LossConfig = LossConfig(variant="contrastive")) -> LossOutput:
    return contrastive_iaa(batch.without_synthetic(), cfg)


def triplet_loss(batch: Batch, cfg: LossConfig = LossConfig(variant="triplet")) -> LossOutput:
    return triplet_iaa(batch.without_synthetic(), cfg)


def ms_loss(batch: Batch, cfg: LossConfig = LossConfig(variant="ms")) -> LossOutput:
    return ms_iaa(batch.without_synthetic(), cfg)
