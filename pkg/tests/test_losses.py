import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from batches import CONFIGS, oracle_kwargs, random_batch
from iaa.augment import SyntheticBatch
from iaa.losses import (
    Batch,
    LossConfig,
    compute_loss,
    contrastive_iaa,
    contrastive_loss,
    ms_iaa,
    ms_loss,
    ms_mining,
    triplet_iaa,
    triplet_loss,
)

H = 1e-5
KINK = 1e-4


def unit(angle):
    return np.array([math.cos(angle), math.sin(angle)])


def chord_angle(d):
    # angle between unit vectors at Euclidean distance d
    return 2 * math.asin(d / 2)


def oracle_value(batch, cfg):
    kw = oracle_kwargs(batch)
    z, y = batch.embeddings, batch.labels
    if cfg.variant == "contrastive":
        return oracles.contrastive(z, y, cfg.pos_margin, cfg.neg_margin, **kw)
    if cfg.variant == "triplet":
        return oracles.triplet(z, y, cfg.margin, **kw)[0]
    return oracles.ms(z, y, cfg.ms_alpha, cfg.ms_beta, cfg.ms_lambda, cfg.ms_epsilon, **kw)


def kink_distance(batch, cfg):
    """Smallest distance of any hinge, argmin or mining predicate to its switch point."""
    anchors, cands = oracles.candidates(batch.embeddings, batch.labels, **oracle_kwargs(batch))
    u = np.array(anchors)
    p = np.array([v for v, _ in cands])
    lab = np.array([c for _, c in cands])
    d = np.sqrt(np.maximum(np.sum((u[:, None] - p[None]) ** 2, axis=2), 0))
    s = u @ p.T
    gaps = [1.0]
    for i in range(len(u)):
        pos = (lab == batch.labels[i]) & (np.arange(len(p)) != i)
        neg = lab != batch.labels[i]
        if cfg.variant == "contrastive":
            gaps += list(np.abs(d[i, pos] - cfg.pos_margin)) + list(np.abs(cfg.neg_margin - d[i, neg]))
        if not pos.any() or not neg.any():
            continue
        if cfg.variant == "triplet":
            dn = np.sort(d[i, neg])
            if dn.size > 1:
                gaps.append(dn[1] - dn[0])
            gaps += list(np.abs(d[i, pos] - dn[0] + cfg.margin))
        if cfg.variant == "ms":
            lo = s[i, pos].min() - cfg.ms_epsilon
            hi = s[i, neg].max() + cfg.ms_epsilon
            gaps += list(np.abs(s[i, neg] - lo)) + list(np.abs(s[i, pos] - hi))
            gaps += list(1 - np.abs(s[i, pos | neg]))
    return min(gaps)


def finite_difference(batch, cfg):
    z = batch.embeddings
    g = np.zeros_like(z)
    for idx in np.ndindex(*z.shape):
        vals = []
        for sign in (1, -1):
            zz = z.copy()
            zz[idx] += sign * H
            vals.append(compute_loss(Batch(zz, batch.labels, batch.synthetic), cfg).value)
        g[idx] = (vals[0] - vals[1]) / (2 * H)
    return g


def grad_error(analytic, numeric):
    return np.max(np.abs(analytic - numeric)) / max(np.max(np.abs(numeric)), 1e-8)


# --- hand-computed examples -----------------------------------------------------


def test_contrastive_single_pair():
    z = np.stack([unit(0.0), unit(chord_angle(0.3))])
    out = contrastive_iaa(Batch(z, [0, 0]), LossConfig(variant="contrastive", pos_margin=0.2))
    # 0.1 from each anchor role, averaged over 2 anchors
    assert out.value == pytest.approx(0.1, abs=1e-12)


def test_contrastive_inactive_gives_zero_and_zero_grad():
    z = np.stack([unit(0.0), unit(0.05), unit(2.0), unit(2.05)])
    out = contrastive_iaa(Batch(z, [0, 0, 1, 1]), LossConfig(variant="contrastive", pos_margin=0.2, neg_margin=0.5))
    assert out.value == 0.0 and out.active == 0
    assert np.array_equal(out.grad, np.zeros_like(z))


@pytest.mark.parametrize("d_ap, d_an, expected", [(0.4, 0.9, 0.0), (0.8, 0.9, 0.4)])
def test_triplet_term(d_ap, d_an, expected):
    tp, tn = chord_angle(d_ap), chord_angle(d_an)
    a = np.array([1.0, 0.0, 0.0])
    p = np.array([math.cos(tp), math.sin(tp), 0.0])
    n = np.array([math.cos(tn), 0.0, math.sin(tn)])
    out = triplet_iaa(Batch(np.stack([a, p, n]), [0, 0, 1]), LossConfig(margin=0.5))
    # anchor p sees a at d_ap and n at |p - n|; anchor n has no positive and is skipped
    d_pn = math.sqrt(2 - 2 * math.cos(tp) * math.cos(tn))
    other = max(d_ap - d_pn + 0.5, 0.0)
    assert out.value * 3 == pytest.approx(expected + other, abs=1e-12)
    assert out.skipped_anchors == 1


def test_triplet_hardest_negative_can_be_synthetic():
    z = np.stack([unit(0.0), unit(0.3), unit(1.5)])
    # a synthetic of sample 2 pushed right next to anchor 0
    offset = (unit(0.1) - unit(1.5))[None, :]
    syn = SyntheticBatch(unit(0.1)[None, :], np.array([2]), offset, np.array([1]))
    batch = Batch(z, [0, 0, 1], syn)
    out = triplet_iaa(batch, LossConfig(margin=0.2))
    assert out.extra["hardest_negative"][0] == 3
    _, hardest = oracles.triplet(z, [0, 0, 1], 0.2, **oracle_kwargs(batch))
    assert list(out.extra["hardest_negative"][:2]) == hardest[:2]
    assert out.selected_synthetic > 0


def test_ms_empty_sets_give_zero():
    z = np.stack([unit(0.0), unit(0.01), unit(math.pi), unit(math.pi + 0.01)])
    batch = Batch(z, [0, 0, 1, 1])
    assert all(len(p) == 0 and len(n) == 0 for p, n in ms_mining(batch, 0.0))
    out = ms_iaa(batch, LossConfig(variant="ms", ms_epsilon=0.0))
    assert out.value == 0.0 and out.active == 0
    assert np.array_equal(out.grad, np.zeros_like(z))


def test_ms_large_epsilon_selects_everything():
    rng = np.random.default_rng(0)
    batch = Batch(rng.standard_normal((6, 3)), [0, 0, 0, 1, 1, 1])
    for i, (p, n) in enumerate(ms_mining(batch, 10.0)):
        assert len(p) == 2 and len(n) == 3


def test_ms_single_positive_at_lambda():
    # anchor and positive at similarity 0.5, one negative far away on the other side
    a, p, n = unit(0.0), unit(math.acos(0.5)), unit(-math.acos(0.5) - 2.0)
    batch = Batch(np.stack([a, p, n]), [0, 0, 1])
    cfg = LossConfig(variant="ms", ms_alpha=2.0, ms_beta=50.0, ms_lambda=0.5, ms_epsilon=2.0)
    out = ms_iaa(batch, cfg)
    s = lambda x, y: float(np.dot(x, y))
    expected = 0.0
    for anchor, pos, negs in ((a, p, [n]), (p, a, [n])):
        expected += math.log(1 + math.exp(2.0 * (0.5 - s(anchor, pos)))) / 2.0
        expected += math.log(1 + sum(math.exp(50 * (s(anchor, v) - 0.5)) for v in negs)) / 50.0
    assert out.value * 3 == pytest.approx(expected, abs=1e-12)
    assert math.log(1 + math.exp(2.0 * (0.5 - s(a, p)))) / 2.0 == pytest.approx(math.log(2) / 2, abs=1e-15)


# --- oracle equivalence ------------------------------------------------------------


@pytest.mark.parametrize("variant", ["contrastive", "triplet", "ms"])
@pytest.mark.parametrize("strategy", ["dynamic", "fixed"])
def test_matches_double_loop_oracle(variant, strategy):
    rng = np.random.default_rng([("contrastive", "triplet", "ms").index(variant), strategy == "fixed"])
    cfg = CONFIGS[variant]
    for _ in range(15):
        batch = random_batch(rng, strategy=strategy)
        assert compute_loss(batch, cfg).value == pytest.approx(oracle_value(batch, cfg), abs=1e-10)


def test_ms_mining_matches_predicates():
    rng = np.random.default_rng(3)
    for _ in range(20):
        batch = random_batch(rng, max_n=8)
        sets = ms_mining(batch, 0.1)
        expected, _, _ = oracles.ms_sets(batch.embeddings, batch.labels, 0.1, **oracle_kwargs(batch))
        for (p, n), (ep, en) in zip(sets, expected):
            assert p.tolist() == ep and n.tolist() == en


# --- gradients ------------------------------------------------------------------


@pytest.mark.parametrize("variant", ["contrastive", "triplet", "ms"])
@pytest.mark.parametrize("strategy", ["dynamic", "fixed"])
def test_gradients_match_finite_differences(variant, strategy):
    rng = np.random.default_rng(17)
    cfg = CONFIGS[variant]
    checked = 0
    while checked < 6:
        batch = random_batch(rng, max_n=8, strategy=strategy)
        if kink_distance(batch, cfg) < KINK:
            continue
        out = compute_loss(batch, cfg)
        assert grad_error(out.grad, finite_difference(batch, cfg)) < 1e-4
        checked += 1


def test_synthetic_gradient_lands_on_origin():
    z = np.stack([unit(0.0), unit(0.4), unit(2.0)])
    labels = [0, 0, 1]
    offset = np.array([[0.05, -0.1]])
    raw = z[2] + offset[0]
    syn = SyntheticBatch((raw / np.linalg.norm(raw))[None, :], np.array([2]), offset, np.array([1]))
    cfg = LossConfig(variant="contrastive", pos_margin=0.0, neg_margin=0.0)
    with_syn = contrastive_iaa(Batch(z, labels, syn), cfg).grad
    without = contrastive_iaa(Batch(z, labels), cfg).grad
    diff = with_syn - without
    assert np.array_equal(diff[:2], np.zeros((2, 2)))
    assert np.any(diff[2] != 0)


def test_fixed_synthetics_pass_no_gradient_to_their_class_rows():
    z = np.stack([unit(0.0), unit(0.4), unit(2.0)])
    syn = SyntheticBatch(unit(2.1)[None, :], np.array([-1]), np.zeros((1, 2)), np.array([1]), strategy="fixed")
    cfg = LossConfig(variant="contrastive", pos_margin=0.0, neg_margin=0.0)
    diff = contrastive_iaa(Batch(z, [0, 0, 1], syn), cfg).grad - contrastive_iaa(Batch(z, [0, 0, 1]), cfg).grad
    # only the anchor that pairs with the constant sample (row 2) changes
    assert np.array_equal(diff[:2], np.zeros((2, 2)))


# --- properties -------------------------------------------------------------------


@pytest.mark.parametrize("variant", ["contrastive", "triplet", "ms"])
def test_empty_synthetic_equals_base_bit_for_bit(variant):
    rng = np.random.default_rng(5)
    cfg = CONFIGS[variant]
    base = {"contrastive": contrastive_loss, "triplet": triplet_loss, "ms": ms_loss}[variant]
    for _ in range(10):
        b = random_batch(rng, max_m=0)
        empty = Batch(b.embeddings, b.labels, SyntheticBatch.empty(b.embeddings.shape[1]))
        x, y = compute_loss(empty, cfg), base(b, cfg)
        assert x.value == y.value and np.array_equal(x.grad, y.grad)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31), st.sampled_from(["contrastive", "triplet", "ms"]))
def test_nonnegative_and_permutation_invariant(seed, variant):
    rng = np.random.default_rng(seed)
    cfg = CONFIGS[variant]
    b = random_batch(rng, max_m=0)
    out = compute_loss(b, cfg)
    assert out.value >= 0.0
    perm = rng.permutation(len(b.labels))
    outp = compute_loss(Batch(b.embeddings[perm], b.labels[perm]), cfg)
    assert outp.value == pytest.approx(out.value, abs=1e-12)
    assert np.allclose(outp.grad, out.grad[perm], atol=1e-12)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31))
def test_ms_zero_iff_no_hard_pairs(seed):
    b = random_batch(np.random.default_rng(seed))
    cfg = CONFIGS["ms"]
    out = ms_iaa(b, cfg)
    empty = out.active == 0
    assert (out.value == 0.0) == empty


def test_config_validation():
    with pytest.raises(ValueError):
        LossConfig(variant="proxy")
    with pytest.raises(ValueError):
        LossConfig(margin=-1)
    with pytest.raises(ValueError):
        LossConfig(ms_alpha=0)


def test_synthetic_label_mismatch_rejected():
    z = np.eye(2)
    syn = SyntheticBatch(z[:1], np.array([0]), np.zeros((1, 2)), np.array([5]))
    with pytest.raises(ValueError):
        Batch(z, [0, 1], syn)
