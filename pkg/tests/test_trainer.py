import json
import math

import numpy as np
import pytest

import iaa.trainer as trainer_mod
from iaa.augment import AugmentConfig
from iaa.errors import ConfigError, DataError, NumericalError
from iaa.losses import LossConfig, LossOutput
from iaa.trainer import (
    SGD,
    Adam,
    Encoder,
    TrainConfig,
    balanced_batches,
    config_to_dict,
    decode_encoder,
    encode_encoder,
    train,
)
from iaa.world import make_synthetic_world


def small_world(seed=0):
    return make_synthetic_world(8, 6, 4, (3, 6), seed=seed, heldout_classes=4)


def quick_cfg(**kw):
    base = dict(epochs=3, classes_per_batch=4, samples_per_class=3, embedding_dim=4, stats_interval=2, seed=0)
    base.update(kw)
    return TrainConfig(**base)


def test_adam_two_step_trace():
    lr, b1, b2, eps = 0.01, 0.9, 0.999, 1e-8
    p0, g1, g2 = 0.5, 0.2, -0.4
    m1, v1 = (1 - b1) * g1, (1 - b2) * g1**2
    p1 = p0 - lr * (m1 / (1 - b1)) / (math.sqrt(v1 / (1 - b2)) + eps)
    m2, v2 = b1 * m1 + (1 - b1) * g2, b2 * v1 + (1 - b2) * g2**2
    p2 = p1 - lr * (m2 / (1 - b1**2)) / (math.sqrt(v2 / (1 - b2**2)) + eps)
    params = {"w": np.array([p0])}
    opt = Adam(lr, b1, b2, eps)
    opt.step(params, {"w": np.array([g1])})
    assert params["w"][0] == pytest.approx(p1, abs=1e-12)
    opt.step(params, {"w": np.array([g2])})
    assert params["w"][0] == pytest.approx(p2, abs=1e-12)


def test_sgd_step_with_weight_decay():
    params = {"w": np.array([1.0, -2.0])}
    SGD(0.1, weight_decay=0.5).step(params, {"w": np.array([0.2, 0.2])})
    assert params["w"] == pytest.approx([1.0 - 0.1 * (0.2 + 0.5), -2.0 - 0.1 * (0.2 - 1.0)])


@pytest.mark.parametrize("hidden", [0, 5])
def test_encoder_backward_matches_finite_differences(hidden):
    rng = np.random.default_rng(hidden)
    enc = Encoder(6, 3, hidden=hidden, seed=1)
    for k in enc.params:
        enc.params[k] = enc.params[k] + 0.1 * rng.standard_normal(enc.params[k].shape)
    x = rng.standard_normal((5, 6))
    upstream = rng.standard_normal((5, 3))
    out, cache = enc.forward(x)
    grads = enc.backward(cache, upstream)
    h = 1e-6
    for k, p in enc.params.items():
        num = np.zeros_like(p)
        for idx in np.ndindex(*p.shape):
            old = p[idx]
            p[idx] = old + h
            up = np.sum(enc.embed(x) * upstream)
            p[idx] = old - h
            down = np.sum(enc.embed(x) * upstream)
            p[idx] = old
            num[idx] = (up - down) / (2 * h)
        assert np.max(np.abs(num - grads[k])) / max(np.max(np.abs(num)), 1e-8) < 1e-5


def test_encoder_output_is_unit_norm():
    z = Encoder(4, 3, hidden=8).embed(np.random.default_rng(0).standard_normal((10, 4)))
    assert np.allclose(np.linalg.norm(z, axis=1), 1.0)


@pytest.mark.parametrize("hidden", [0, 3])
def test_encoder_serialization_round_trip(hidden):
    enc = Encoder(5, 2, hidden=hidden, seed=4)
    back = decode_encoder(encode_encoder(enc))
    assert (back.d_in, back.d_emb, back.hidden) == (5, 2, hidden)
    assert all(np.array_equal(enc.params[k], back.params[k]) for k in enc.params)
    buf = encode_encoder(enc)
    with pytest.raises(DataError):
        decode_encoder(b"XXXX" + buf[4:])
    with pytest.raises(DataError):
        decode_encoder(buf[:-3])
    with pytest.raises(DataError):
        decode_encoder(buf + b"\0")


def test_sampler_batch_structure():
    rng = np.random.default_rng(0)
    labels = np.repeat(np.arange(10), [2, 3, 4, 5, 6, 2, 3, 4, 5, 6])
    batches = balanced_batches(labels, 4, 3, rng, n_batches=7)
    seen = set()
    for b in batches:
        assert b.size == 12
        classes = labels[b].reshape(4, 3)
        assert np.all(classes == classes[:, :1])
        assert len(set(classes[:, 0])) == 4
        seen |= set(classes[:, 0].tolist())
        for row in b.reshape(4, 3):
            cls = labels[row[0]]
            if np.sum(labels == cls) >= 3:
                assert len(set(row.tolist())) == 3
    assert seen == set(range(10))


def test_sampler_needs_enough_classes():
    with pytest.raises(ValueError):
        balanced_batches([0, 0, 1, 1], 3, 2, np.random.default_rng(0))


def test_fixed_strategy_requires_ablation():
    with pytest.raises(ConfigError):
        TrainConfig(augment=AugmentConfig(strategy="fixed"))
    TrainConfig(augment=AugmentConfig(strategy="fixed"), ablation=True)


def test_zero_learning_rate_leaves_encoder_untouched():
    w = small_world()
    enc, _ = train(w.train, quick_cfg(lr=0.0))
    fresh = Encoder(w.train.dim, 4, 0, 0)
    assert all(np.array_equal(enc.params[k], fresh.params[k]) for k in enc.params)


@pytest.mark.parametrize("variant", ["contrastive", "triplet", "ms"])
def test_m_zero_is_bit_identical_to_baseline(variant):
    w = small_world(1)
    loss = LossConfig(variant=variant)
    a, la = train(w.train, quick_cfg(augment=AugmentConfig(m=0), loss=loss), eval_dataset=w.heldout)
    b, lb = train(w.train, quick_cfg(augment=None, loss=loss), eval_dataset=w.heldout)
    assert all(np.array_equal(a.params[k], b.params[k]) for k in a.params)
    assert la.to_jsonl() == lb.to_jsonl()


def test_training_is_deterministic_and_thread_safe():
    w = small_world(2)
    cfg = quick_cfg(hidden=6)
    a, la = train(w.train, cfg, eval_dataset=w.heldout)
    b, lb = train(w.train, cfg, eval_dataset=w.heldout, workers=4)
    assert all(np.array_equal(a.params[k], b.params[k]) for k in a.params)
    assert la.to_jsonl() == lb.to_jsonl()


def test_run_log_records():
    w = small_world(3)
    _, log = train(w.train, quick_cfg(lr_decay_epochs=(2,), lr_decay_factor=0.5), eval_dataset=w.heldout)
    rows = [json.loads(line) for line in log.to_jsonl().splitlines()]
    assert [r["epoch"] for r in rows] == [0, 1, 2]
    assert [r["lr"] for r in rows] == [1e-3, 1e-3, 5e-4]
    assert all(r["wall_time"] is None for r in rows)
    assert all(0.0 <= r["synthetic_ratio"] <= 1.0 for r in rows)
    assert set(rows[-1]["metrics"]) >= {"recall@1", "rp", "map_at_r"}
    timed = [json.loads(line) for line in log.to_jsonl(include_time=True).splitlines()]
    assert all(r["wall_time"] >= 0 for r in timed)


def test_sgd_and_full_stats_run():
    w = small_world(4)
    _, log = train(w.train, quick_cfg(optimizer="sgd", lr=0.05, stats_mode="full"))
    assert all(np.isfinite(r["loss"]) for r in log.records)


def test_non_finite_loss_dumps_state(monkeypatch):
    w = small_world(5)

    def broken(batch, cfg):
        return LossOutput(float("nan"), np.zeros_like(batch.embeddings))

    monkeypatch.setattr(trainer_mod, "compute_loss", broken)
    with pytest.raises(NumericalError) as info:
        train(w.train, quick_cfg())
    assert info.value.state["epoch"] == 0 and "param_norms" in info.value.state


def test_config_to_dict_is_json():
    d = config_to_dict(TrainConfig(correction=trainer_mod.CorrectionConfig(sigma_m=math.inf)))
    assert json.loads(json.dumps(d))["correction"]["sigma_m"] == "inf"


def test_published_defaults():
    cfg = TrainConfig()
    assert (cfg.stats_interval, cfg.stats_mode, cfg.lr_decay_factor) == (4, "diagonal", 0.2)
    assert cfg.augment.m == 3 and 0.6 <= cfg.augment.lam <= 0.8
    c = cfg.correction
    assert (c.k, c.beta, c.gamma, c.sigma_m, c.sigma_cv, c.tau) == (25, 0.1, 0.1, 1.0, 1.0, 40)
