"""Synthetic labeled worlds with known class distributions.

Class means sit on the unit sphere of a latent space. Each class has a
diagonal covariance that blends a smooth function of its squared mean (the
part that makes similar classes vary alike) with the same function evaluated
at an unrelated random direction. ``corr_knob`` sets the blend: 1 gives a
covariance fully determined by the mean, 0 gives one independent of it.
Observed features are a fixed random linear lift of the latent samples plus
isotropic noise; when the two dimensions agree the lift is skipped.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import Dataset


@dataclass
class World:
    train: Dataset
    heldout: Dataset | None
    latent_train: Dataset
    latent_heldout: Dataset | None
    class_ids: np.ndarray
    means: np.ndarray
    covs: np.ndarray
    lift: np.ndarray | None

    def truth(self) -> dict:
        return {
            int(k): {"mean": m.tolist(), "cov_diag": c.tolist()}
            for k, m, c in zip(self.class_ids, self.means, self.covs)
        }


def _variance_profile(direction: np.ndarray) -> np.ndarray:
    # mean 1 per dimension over random directions, ranges over [floor, ~D]
    d = direction.shape[-1]
    return 0.1 + 0.9 * d * direction**2


def make_synthetic_world(
    n_classes: int,
    d_in: int,
    d_emb: int,
    samples_per_class=(3, 8),
    corr_knob: float = 1.0,
    seed: int = 0,
    heldout_classes: int = 0,
    spread: float = 0.02,
    input_noise: float = 0.01,
    anisotropy: float = 0.0,
    rotate_variance: bool = False,
) -> World:
    """Draw a world with ``n_classes`` training classes and optional held-out classes.

    ``spread`` is the average per-dimension latent variance. ``anisotropy``
    scales a fixed log-normal per-dimension variance multiplier shared by all
    classes. With ``rotate_variance`` the variance driven by mean dimension d
    lands on dimension d+1 (cyclically), so it is no longer concentrated along
    the mean direction; distances between covariances are unchanged by this.
    Training classes get ids 1..C, held-out classes C+1..C+H.
    """
    if n_classes < 3:
        raise ValueError(f"need at least 3 classes, got {n_classes}")
    if not 0.0 <= corr_knob <= 1.0:
        raise ValueError(f"corr_knob must lie in [0, 1], got {corr_knob}")
    lo, hi = samples_per_class
    if not 1 <= lo <= hi:
        raise ValueError(f"bad samples_per_class range {samples_per_class}")
    rng = np.random.default_rng(seed)
    total = n_classes + heldout_classes
    means = rng.standard_normal((total, d_emb))
    means /= np.linalg.norm(means, axis=1, keepdims=True)
    other = rng.standard_normal((total, d_emb))
    other /= np.linalg.norm(other, axis=1, keepdims=True)
    covs = spread * (corr_knob * _variance_profile(means) + (1.0 - corr_knob) * _variance_profile(other))
    if rotate_variance:
        covs = np.roll(covs, 1, axis=1)
    if anisotropy:
        scale = np.exp(anisotropy * rng.standard_normal(d_emb))
        covs *= scale / scale.mean()
    lift = None
    if d_in != d_emb:
        lift = rng.standard_normal((d_in, d_emb)) / np.sqrt(d_emb)
    class_ids = np.arange(1, total + 1)

    def draw(classes):
        rows, labels = [], []
        for k in classes:
            n = int(rng.integers(lo, hi + 1))
            rows.append(means[k] + np.sqrt(covs[k]) * rng.standard_normal((n, d_emb)))
            labels.extend([class_ids[k]] * n)
        latent = np.concatenate(rows)
        if lift is None:
            feats = latent
        else:
            feats = latent @ lift.T + input_noise * rng.standard_normal((latent.shape[0], d_in))
        return Dataset(feats, labels), Dataset(latent, labels)

    train, latent_train = draw(range(n_classes))
    heldout = latent_heldout = None
    if heldout_classes:
        heldout, latent_heldout = draw(range(n_classes, total))
    return World(train, heldout, latent_train, latent_heldout, class_ids, means, covs, lift)
