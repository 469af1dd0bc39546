"""Desk-scale training loop: a small encoder trained with IAA-boosted losses.

Per epoch (every ``stats_interval`` epochs) the whole training set is embedded
to re-estimate class statistics, which are then neighbor-corrected. Each
mini-batch is embedded, augmented with synthetic samples, scored by the
configured loss and back-propagated through the encoder by hand.
"""

from __future__ import annotations

import json
import logging
import math
import struct
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from .augment import AugmentConfig, generate
from .core import Dataset
from .correction import CorrectionConfig, correct_covariance
from .errors import ConfigError, DataError, NumericalError
from .evaluation import evaluate
from .losses import Batch, LossConfig, compute_loss
from .stats import estimate_class_stats, estimate_global_covariance

log = logging.getLogger(__name__)


class Encoder:
    """Linear map or one-hidden-layer ReLU perceptron with L2-normalized output."""

    def __init__(self, d_in: int, d_emb: int, hidden: int = 0, seed: int = 0):
        rng = np.random.default_rng([seed, 1])
        self.d_in, self.d_emb, self.hidden = d_in, d_emb, hidden
        if hidden:
            self.params = {
                "w1": rng.standard_normal((d_in, hidden)) * np.sqrt(2.0 / d_in),
                "b1": np.zeros(hidden),
                "w2": rng.standard_normal((hidden, d_emb)) * np.sqrt(1.0 / hidden),
                "b2": np.zeros(d_emb),
            }
        else:
            self.params = {
                "w1": rng.standard_normal((d_in, d_emb)) * np.sqrt(1.0 / d_in),
                "b1": np.zeros(d_emb),
            }

    def forward(self, x):
        x = np.asarray(x, dtype=np.float64)
        p = self.params
        if self.hidden:
            pre = x @ p["w1"] + p["b1"]
            h = np.maximum(pre, 0.0)
            v = h @ p["w2"] + p["b2"]
        else:
            pre = h = None
            v = x @ p["w1"] + p["b1"]
        norm = np.linalg.norm(v, axis=1, keepdims=True)
        if np.any(norm == 0.0):
            raise NumericalError("encoder produced a zero vector")
        out = v / norm
        return out, (x, pre, h, out, norm)

    def embed(self, x) -> np.ndarray:
        return self.forward(x)[0]

    def backward(self, cache, grad_out) -> dict:
        x, pre, h, out, norm = cache
        gv = (grad_out - out * np.sum(out * grad_out, axis=1, keepdims=True)) / norm
        if not self.hidden:
            return {"w1": x.T @ gv, "b1": gv.sum(axis=0)}
        p = self.params
        gh = (gv @ p["w2"].T) * (pre > 0)
        return {"w1": x.T @ gh, "b1": gh.sum(axis=0), "w2": h.T @ gv, "b2": gv.sum(axis=0)}

    def state(self) -> dict:
        return {k: v.copy() for k, v in self.params.items()}


class SGD:
    def __init__(self, lr: float, weight_decay: float = 0.0):
        self.lr, self.weight_decay = lr, weight_decay

    def step(self, params: dict, grads: dict, lr: float | None = None):
        lr = self.lr if lr is None else lr
        for k in params:
            g = grads[k] + self.weight_decay * params[k] if self.weight_decay else grads[k]
            params[k] -= lr * g


class Adam:
    def __init__(self, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8, weight_decay: float = 0.0):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m: dict = {}
        self.v: dict = {}

    def step(self, params: dict, grads: dict, lr: float | None = None):
        lr = self.lr if lr is None else lr
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for k in params:
            g = grads[k] + self.weight_decay * params[k] if self.weight_decay else grads[k]
            m = self.m.get(k, np.zeros_like(g))
            v = self.v.get(k, np.zeros_like(g))
            m = self.beta1 * m + (1.0 - self.beta1) * g
            v = self.beta2 * v + (1.0 - self.beta2) * g * g
            self.m[k], self.v[k] = m, v
            params[k] -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def balanced_batches(labels, n_classes: int, n_samples: int, rng: np.random.Generator, n_batches: int | None = None):
    """One epoch of P x S index batches.

    Classes are visited in a shuffled cycle so every class appears at least
    once per epoch when ``n_batches * P >= C``. Within a class, samples are
    drawn without replacement and topped up with replacement when the class
    is smaller than S.
    """
    labels = np.asarray(labels)
    classes, inverse = np.unique(labels, return_inverse=True)
    if len(classes) < n_classes:
        raise ValueError(f"need at least {n_classes} classes for a batch, found {len(classes)}")
    members = [np.flatnonzero(inverse == c) for c in range(len(classes))]
    if n_batches is None:
        n_batches = max(math.ceil(len(classes) / n_classes), round(len(labels) / (n_classes * n_samples)))
    queue: list = []
    batches = []
    for _ in range(n_batches):
        chosen: list = []
        while len(chosen) < n_classes:
            if all(q in chosen for q in queue):
                queue.extend(rng.permutation(len(classes)).tolist())
            pos = next(i for i, q in enumerate(queue) if q not in chosen)
            chosen.append(queue.pop(pos))
        idx = []
        for c in chosen:
            pool = members[c]
            take = rng.permutation(pool)[:n_samples]
            if take.size < n_samples:
                take = np.concatenate([take, rng.choice(pool, n_samples - take.size, replace=True)])
            idx.append(take)
        batches.append(np.concatenate(idx))
    return batches


@dataclass
class TrainConfig:
    epochs: int = 40
    classes_per_batch: int = 8
    samples_per_class: int = 4
    batches_per_epoch: int | None = None
    lr: float = 1e-3
    optimizer: str = "adam"
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    weight_decay: float = 0.0
    lr_decay_epochs: tuple = ()
    lr_decay_factor: float = 0.2
    hidden: int = 0
    embedding_dim: int = 16
    stats_interval: int = 4
    stats_mode: str = "diagonal"
    use_correction: bool = True
    ablation: bool = False
    eval_every: int = 1
    seed: int = 0
    correction: CorrectionConfig = field(default_factory=CorrectionConfig)
    augment: AugmentConfig | None = field(default_factory=AugmentConfig)
    loss: LossConfig = field(default_factory=LossConfig)

    def __post_init__(self):
        if self.classes_per_batch < 2 or self.samples_per_class < 2:
            raise ConfigError("a batch needs at least 2 classes and 2 samples per class")
        if self.stats_interval < 1:
            raise ConfigError("stats_interval must be >= 1")
        if self.optimizer not in ("sgd", "adam"):
            raise ConfigError(f"unknown optimizer {self.optimizer!r}")
        if self.augment is not None and self.augment.strategy == "fixed" and not self.ablation:
            raise ConfigError("the fixed generation strategy is only available with ablation=true")
        self.lr_decay_epochs = tuple(self.lr_decay_epochs)


@dataclass
class RunLog:
    records: list = field(default_factory=list)

    def to_jsonl(self, include_time: bool = False) -> str:
        lines = []
        for r in self.records:
            r = dict(r)
            if not include_time:
                r["wall_time"] = None
            lines.append(json.dumps(r, sort_keys=True))
        return "\n".join(lines) + ("\n" if lines else "")


def _lr_at(cfg: TrainConfig, epoch: int) -> float:
    return cfg.lr * cfg.lr_decay_factor ** sum(epoch >= e for e in cfg.lr_decay_epochs)


def _class_statistics(encoder, dataset, cfg: TrainConfig, workers: int):
    z = encoder.embed(dataset.embeddings)
    emb = Dataset(z, dataset.labels)
    stats = estimate_class_stats(emb, mode=cfg.stats_mode, workers=workers)
    if not cfg.use_correction:
        return stats
    global_stats = estimate_global_covariance(stats)
    return correct_covariance(stats, global_stats, cfg.correction, workers=workers).stats


def train(dataset: Dataset, cfg: TrainConfig, eval_dataset: Dataset | None = None, workers: int = 1):
    """Train an encoder on ``dataset``; returns (encoder, RunLog)."""
    encoder = Encoder(dataset.dim, cfg.embedding_dim, cfg.hidden, cfg.seed)
    if cfg.optimizer == "adam":
        opt = Adam(cfg.lr, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps, cfg.weight_decay)
    else:
        opt = SGD(cfg.lr, cfg.weight_decay)
    sampler_rng = np.random.default_rng([cfg.seed, 2])
    aug = cfg.augment
    augmenting = aug is not None
    runlog = RunLog()
    stats = None
    for epoch in range(cfg.epochs):
        t0 = time.perf_counter()
        if augmenting and epoch % cfg.stats_interval == 0:
            stats = _class_statistics(encoder, dataset, cfg, workers)
        lr = _lr_at(cfg, epoch)
        batches = balanced_batches(
            dataset.labels, cfg.classes_per_batch, cfg.samples_per_class, sampler_rng, cfg.batches_per_epoch
        )
        losses, active, selected, selected_syn, skipped = [], 0, 0, 0, 0
        for b, idx in enumerate(batches):
            x = dataset.embeddings[idx]
            y = dataset.labels[idx]
            z, cache = encoder.forward(x)
            syn = generate(z, y, stats, aug, key=(epoch, b)) if augmenting and aug.m > 0 else None
            out = compute_loss(Batch(z, y, syn), cfg.loss)
            if not np.isfinite(out.value) or not np.all(np.isfinite(out.grad)):
                raise NumericalError(
                    f"non-finite loss at epoch {epoch}, batch {b}",
                    state={
                        "epoch": epoch,
                        "batch": b,
                        "indices": idx.tolist(),
                        "loss": repr(out.value),
                        "param_norms": {k: float(np.linalg.norm(v)) for k, v in encoder.params.items()},
                    },
                )
            grads = encoder.backward(cache, out.grad)
            opt.step(encoder.params, grads, lr)
            losses.append(out.value)
            active += out.active
            selected += out.selected
            selected_syn += out.selected_synthetic
            skipped += out.skipped_anchors
        record = {
            "epoch": epoch,
            "loss": float(np.mean(losses)),
            "lr": lr,
            "active": active,
            "synthetic_ratio": selected_syn / selected if selected else 0.0,
            "skipped_anchors": skipped,
            "metrics": None,
        }
        if eval_dataset is not None and ((epoch + 1) % cfg.eval_every == 0 or epoch == cfg.epochs - 1):
            record["metrics"] = evaluate(encoder.embed(eval_dataset.embeddings), eval_dataset.labels, workers=workers)
        record["wall_time"] = time.perf_counter() - t0
        log.debug("epoch %d loss %.5f", epoch, record["loss"])
        runlog.records.append(record)
    return encoder, runlog


def config_to_dict(cfg: TrainConfig) -> dict:
    d = asdict(cfg)
    d["correction"] = cfg.correction.to_dict()
    d["lr_decay_epochs"] = list(cfg.lr_decay_epochs)
    return d


# Encoder parameter file: same layout idea as the dataset dump. Header is
# magic "IAAE", u32 version, u32 d_in, u32 d_emb, u32 hidden, u32 array count;
# then for each array: u32 name length, name bytes, u32 ndim, u32 dims, f64 data.
ENCODER_MAGIC = b"IAAE"
_ENC_HEADER = struct.Struct("<4sIIIII")


def encode_encoder(encoder: Encoder) -> bytes:
    names = sorted(encoder.params)
    parts = [_ENC_HEADER.pack(ENCODER_MAGIC, 1, encoder.d_in, encoder.d_emb, encoder.hidden, len(names))]
    for name in names:
        arr = np.ascontiguousarray(encoder.params[name], dtype="<f8")
        raw = name.encode()
        parts.append(struct.pack("<I", len(raw)) + raw)
        parts.append(struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape))
        parts.append(arr.tobytes())
    return b"".join(parts)


def decode_encoder(buf: bytes) -> Encoder:
    if len(buf) < _ENC_HEADER.size:
        raise DataError("encoder file is truncated")
    magic, version, d_in, d_emb, hidden, count = _ENC_HEADER.unpack_from(buf, 0)
    if magic != ENCODER_MAGIC:
        raise DataError(f"bad encoder magic {magic!r}")
    if version != 1:
        raise DataError(f"unsupported encoder version {version}")
    encoder = Encoder(d_in, d_emb, hidden)
    params = {}
    pos = _ENC_HEADER.size
    try:
        for _ in range(count):
            (n,) = struct.unpack_from("<I", buf, pos)
            name = buf[pos + 4 : pos + 4 + n].decode()
            pos += 4 + n
            (ndim,) = struct.unpack_from("<I", buf, pos)
            shape = struct.unpack_from(f"<{ndim}I", buf, pos + 4)
            pos += 4 + 4 * ndim
            size = int(np.prod(shape)) * 8
            if pos + size > len(buf):
                raise DataError("encoder file is truncated")
            params[name] = np.frombuffer(buf, dtype="<f8", count=size // 8, offset=pos).reshape(shape).astype(np.float64)
            pos += size
    except struct.error:
        raise DataError("encoder file is truncated") from None
    if pos != len(buf):
        raise DataError("trailing bytes after encoder parameters")
    if set(params) != set(encoder.params):
        raise DataError(f"encoder arrays {sorted(params)} do not match the architecture")
    for k, v in params.items():
        if v.shape != encoder.params[k].shape:
            raise DataError(f"encoder array {k} has shape {v.shape}, expected {encoder.params[k].shape}")
    encoder.params = params
    return encoder
