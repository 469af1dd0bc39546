import numpy as np
import pytest

from iaa.world import make_synthetic_world


def test_deterministic_and_labeled():
    a = make_synthetic_world(5, 8, 4, (3, 5), seed=3, heldout_classes=2)
    b = make_synthetic_world(5, 8, 4, (3, 5), seed=3, heldout_classes=2)
    assert np.array_equal(a.train.embeddings, b.train.embeddings)
    assert set(a.train.labels.tolist()) == {1, 2, 3, 4, 5}
    assert set(a.heldout.labels.tolist()) == {6, 7}
    assert a.train.dim == 8 and a.latent_train.dim == 4
    counts = np.bincount(a.train.labels)[1:]
    assert counts.min() >= 3 and counts.max() <= 5


def test_no_lift_when_dimensions_agree():
    w = make_synthetic_world(4, 6, 6, seed=0)
    assert w.lift is None
    assert np.array_equal(w.train.embeddings, w.latent_train.embeddings)


def test_coupled_covariance_is_function_of_mean():
    w = make_synthetic_world(6, 5, 5, corr_knob=1.0, seed=1, spread=0.1)
    assert np.allclose(w.covs, 0.1 * (0.1 + 0.9 * 5 * w.means**2))
    assert np.allclose(np.linalg.norm(w.means, axis=1), 1.0)


def test_truth_and_validation():
    w = make_synthetic_world(3, 2, 2, seed=0)
    assert sorted(w.truth()) == [1, 2, 3]
    with pytest.raises(ValueError):
        make_synthetic_world(2, 2, 2)
    with pytest.raises(ValueError):
        make_synthetic_world(3, 2, 2, corr_knob=1.5)
    with pytest.raises(ValueError):
        make_synthetic_world(3, 2, 2, samples_per_class=(4, 2))
