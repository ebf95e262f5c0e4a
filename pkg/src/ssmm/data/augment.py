"""Stochastic views: affine/crop image augmentation and marginal-resampling
feature corruption for tabular rows."""
from dataclasses import dataclass

import numpy as np
from scipy.ndimage import affine_transform


@dataclass
class AugmentationConfig:
    image_rate: float = 0.95
    corruption_rate: float = 0.3
    crop_min: float = 0.8  # smallest crop side as a fraction of the volume
    max_translation: float = 0.1  # fraction of each dim
    max_rotation: float = 10.0  # degrees, per axis
    flip_axes: tuple = (2,)

    def __post_init__(self):
        self.flip_axes = tuple(self.flip_axes)
        for name in ("image_rate", "corruption_rate"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {v}")
        if not 0.0 < self.crop_min <= 1.0:
            raise ValueError("crop_min must lie in (0, 1]")


PRETRAIN_AUG = AugmentationConfig(image_rate=0.95, corruption_rate=0.3)
FINETUNE_AUG = AugmentationConfig(image_rate=0.80, corruption_rate=0.3)


def _rotation(angles):
    ax, ay, az = np.deg2rad(angles)
    rx = np.array([[1, 0, 0], [0, np.cos(ax), -np.sin(ax)], [0, np.sin(ax), np.cos(ax)]])
    ry = np.array([[np.cos(ay), 0, np.sin(ay)], [0, 1, 0], [-np.sin(ay), 0, np.cos(ay)]])
    rz = np.array([[np.cos(az), -np.sin(az), 0], [np.sin(az), np.cos(az), 0], [0, 0, 1]])
    return rz @ ry @ rx


def random_affine(shape, config, rng):
    """Output->input voxel mapping (matrix, offset) for one random view."""
    shape = np.asarray(shape, dtype=float)
    centre = (shape - 1) / 2.0
    crop = rng.uniform(config.crop_min, 1.0)
    # crop window centre may move as far as the crop leaves room for
    crop_shift = rng.uniform(-1.0, 1.0, size=3) * (1.0 - crop) * shape / 2.0
    translation = rng.uniform(-1.0, 1.0, size=3) * config.max_translation * shape
    rot = _rotation(rng.uniform(-config.max_rotation, config.max_rotation, size=3))
    flip = np.ones(3)
    for a in config.flip_axes:
        if rng.random() < 0.5:
            flip[a] = -1.0
    matrix = crop * rot @ np.diag(flip)
    offset = centre + crop_shift + translation - matrix @ centre
    return matrix, offset


def augment_image(volume, config, rng):
    """Return an augmented copy of a 3-D volume (same shape).

    With probability ``1 - config.image_rate`` the volume is returned
    unaltered; otherwise a random crop-and-resize, flip, translation and
    small rotation are applied in one trilinear resampling.
    """
    volume = np.asarray(volume)
    if rng.random() >= config.image_rate:
        return volume.copy()
    matrix, offset = random_affine(volume.shape, config, rng)
    return affine_transform(volume.astype(np.float64), matrix, offset, order=1, mode="nearest")


def augment_batch(volumes, config, rng):
    return np.stack([augment_image(v, config, rng) for v in volumes])


def corrupt_tabular(rows, marginals, rate, rng, blocks=None):
    """Replace each feature, with probability ``rate``, by the same feature
    taken from a random row of the training ``marginals`` matrix.

    ``blocks`` groups columns that form one feature (e.g. a one-hot block);
    by default every column is its own feature. Works on one row or a batch.
    """
    rows = np.asarray(rows, dtype=float)
    single = rows.ndim == 1
    x = np.atleast_2d(rows).copy()
    marginals = np.asarray(marginals, dtype=float)
    if marginals.shape[1] != x.shape[1]:
        raise ValueError(f"marginal width {marginals.shape[1]} != row width {x.shape[1]}")
    if blocks is None:
        blocks = [slice(j, j + 1) for j in range(x.shape[1])]
    n = x.shape[0]
    hit = rng.random((n, len(blocks))) < rate
    donors = rng.integers(0, marginals.shape[0], size=(n, len(blocks)))
    for b, sl in enumerate(blocks):
        rows_hit = np.nonzero(hit[:, b])[0]
        if rows_hit.size:
            x[rows_hit, sl] = marginals[donors[rows_hit, b], sl]
    return x[0] if single else x
