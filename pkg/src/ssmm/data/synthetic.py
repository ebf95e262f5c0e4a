"""Planted-signal multimodal cohorts.

A latent vector per subject drives both modalities and the label:

* latent 0 ("risk") sets the brightness of an ellipsoidal lesion blob near
  the volume centre and weakly loads on the WMH feature;
* latent 1 ("vascular") only reaches the tabular side;
* latents 2.. are shared anatomy: smooth image basis fields plus tabular
  loadings.

So each modality alone sees part of the label signal and their combination
sees all of it.
"""
from dataclasses import dataclass, field

import numpy as np
import pandas as pd

from .schema import DEFAULT_SCHEMA, TabularSchema

RISK, VASCULAR = 0, 1


@dataclass
class SyntheticConfig:
    n_subjects: int = 1000
    volume_shape: tuple = (24, 24, 24)
    latent_dim: int = 8
    missing_rate: float = 0.1
    blob_radius_range: tuple = (2.5, 4.0)
    blob_base: float = 2.0
    blob_gain: float = 1.0
    blob_jitter: float = 1.0
    basis_gain: float = 1.0
    voxel_noise: float = 0.5
    tabular_noise: float = 0.5
    risk_tabular_loading: float = 0.4
    label_weights: tuple = (3.0, 3.0)
    label_bias: float = 0.0
    seed: int = 0

    def __post_init__(self):
        self.volume_shape = tuple(int(v) for v in self.volume_shape)
        self.blob_radius_range = tuple(self.blob_radius_range)
        self.label_weights = tuple(float(v) for v in self.label_weights)
        if len(self.volume_shape) != 3 or min(self.volume_shape) < 8:
            raise ValueError(f"volume dims must be >= 8 per axis, got {self.volume_shape}")
        if not 0.0 <= self.missing_rate < 1.0:
            raise ValueError("missing_rate must lie in [0, 1)")
        if self.latent_dim < 3:
            raise ValueError("latent_dim must be >= 3")
        if len(self.label_weights) > self.latent_dim:
            raise ValueError("more label weights than latent dimensions")

    @property
    def weight_vector(self):
        w = np.zeros(self.latent_dim)
        w[: len(self.label_weights)] = self.label_weights
        return w


@dataclass
class Cohort:
    subject_ids: list
    volumes: np.ndarray  # [N, D, H, W] float32
    tabular: pd.DataFrame  # raw values, NaN = missing
    labels: np.ndarray
    schema: TabularSchema = DEFAULT_SCHEMA
    latents: np.ndarray = None
    blob_centers: np.ndarray = None
    blob_radii: np.ndarray = None
    extra: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.subject_ids)

    def subset(self, idx):
        idx = np.asarray(idx, dtype=int)

        def take(a):
            return None if a is None else a[idx]

        return Cohort(
            [self.subject_ids[i] for i in idx],
            self.volumes[idx],
            self.tabular.iloc[idx].reset_index(drop=True),
            None if self.labels is None else self.labels[idx],
            self.schema,
            take(self.latents),
            take(self.blob_centers),
            take(self.blob_radii),
        )

    def blob_mask(self, i):
        """Boolean mask of subject ``i``'s planted lesion region."""
        if self.blob_centers is None:
            raise ValueError("cohort carries no blob geometry")
        return _ellipsoid(self.volumes.shape[1:], self.blob_centers[i], self.blob_radii[i])


def _grid(shape):
    return np.meshgrid(*(np.arange(s, dtype=float) for s in shape), indexing="ij")


def _ellipsoid(shape, center, radii):
    g = _grid(shape)
    r2 = sum(((g[a] - center[a]) / radii[a]) ** 2 for a in range(3))
    return r2 <= 1.0


def basis_fields(shape, count, rng, bumps=3):
    """Smooth left-right symmetric fields built from Gaussian bumps kept
    away from the centre, each scaled to max |value| = 1."""
    g = _grid(shape)
    dims = np.array(shape, dtype=float)
    centre = (dims - 1) / 2.0
    # margins and exclusion radius shrink with small volumes so a position
    # always exists; 24^3 keeps (3, 6)
    lo = np.minimum(3.0, dims / 4.0)
    min_dist = min(6.0, dims.min() / 4.0)
    fields = np.zeros((count,) + tuple(shape))
    for k in range(count):
        for _ in range(bumps):
            while True:
                pos = rng.uniform(lo, dims - 1 - lo)
                if np.linalg.norm(pos - centre) >= min_dist:
                    break
            width = rng.uniform(2.5, 4.0)
            sign = rng.choice([-1.0, 1.0])
            r2 = sum((g[a] - pos[a]) ** 2 for a in range(3))
            fields[k] += sign * np.exp(-0.5 * r2 / width**2)
        fields[k] = 0.5 * (fields[k] + fields[k][:, :, ::-1])
        fields[k] /= np.abs(fields[k]).max()
    return fields


# (feature, {latent: loading}, location, scale)
_CONTINUOUS = {
    "age": ({2: 1.0}, 63.0, 7.0),
    "alcohol_units": ({5: 0.8}, 10.0, 6.0),
    "bmi": ({VASCULAR: 0.8, 3: 0.3}, 27.0, 4.0),
    "systolic_bp": ({VASCULAR: 1.0}, 138.0, 18.0),
    "cholesterol": ({VASCULAR: 0.8, 4: 0.3}, 5.6, 1.1),
    "hba1c": ({VASCULAR: 0.7, 3: 0.4}, 35.0, 6.0),
    "grey_matter_vol": ({2: -0.8, 3: 0.5}, 610.0, 45.0),
    "white_matter_vol": ({3: 0.7, 4: 0.6}, 540.0, 50.0),
    "csf_vol": ({2: 0.8, 6: 0.5}, 360.0, 60.0),
    "wmh_vol": ({RISK: None, 2: 0.3}, 4.5, 3.0),
    "lesion_volume": ({RISK: 1.0}, 3.0, 2.0),
    "lesion_area": ({RISK: 0.9, 4: 0.2}, 20.0, 8.0),
    "lesion_elongation": ({7: 0.3}, 0.6, 0.1),
    "lesion_sphericity": ({6: 0.3}, 0.7, 0.1),
}

# (feature, {latent: loading}, cut points in standard units)
_CATEGORICAL = {
    "sex": ({7: 1.0}, (0.0,)),
    "smoking": ({VASCULAR: 0.7, 5: 0.4}, (-0.2, 0.7)),
    "diabetes": ({VASCULAR: 0.8, 3: 0.4}, (0.9,)),
    "hypertension": ({VASCULAR: 1.0}, (0.3,)),
    "antihypertensive": ({VASCULAR: 0.9}, (0.5,)),
    "statin": ({VASCULAR: 0.6, 4: 0.4}, (0.4,)),
}


def _loading_vector(spec, cfg):
    a = np.zeros(cfg.latent_dim)
    for lat, val in spec.items():
        if lat < cfg.latent_dim:
            a[lat] = cfg.risk_tabular_loading if val is None else val
    return a


def generate_synthetic(config=None, schema=DEFAULT_SCHEMA):
    """Draw a cohort; fully determined by ``config.seed``."""
    cfg = config or SyntheticConfig()
    rng = np.random.default_rng(cfg.seed)
    n, shape, L = cfg.n_subjects, cfg.volume_shape, cfg.latent_dim
    n_basis = L - 2
    basis = basis_fields(shape, n_basis, rng)

    z = rng.normal(size=(n, L))

    # imaging
    vox = int(np.prod(shape))
    vols = (cfg.basis_gain * z[:, 2:]) @ basis.reshape(n_basis, vox)
    vols += cfg.voxel_noise * rng.normal(size=(n, vox))
    vols = vols.reshape((n,) + shape)
    centre = (np.array(shape) - 1) / 2.0
    centers = centre + cfg.blob_jitter * rng.normal(size=(n, 3))
    radii = rng.uniform(*cfg.blob_radius_range, size=(n, 3))
    intensity = cfg.blob_base + cfg.blob_gain * z[:, RISK]
    for i in range(n):
        vols[i][_ellipsoid(shape, centers[i], radii[i])] += intensity[i]

    # tabular
    cols = {}
    for f in schema.features:
        if f.kind == "continuous":
            spec, loc, scale = _CONTINUOUS.get(f.name, ({}, 0.0, 1.0))
            a = _loading_vector(spec, cfg)
            raw = z @ a + cfg.tabular_noise * rng.normal(size=n)
            cols[f.name] = loc + scale * raw
        else:
            spec, cuts = _CATEGORICAL.get(f.name, ({}, tuple(np.linspace(-0.5, 0.5, len(f.levels) - 1))))
            a = _loading_vector(spec, cfg)
            raw = z @ a + cfg.tabular_noise * rng.normal(size=n)
            raw = raw / np.sqrt(a @ a + cfg.tabular_noise**2)
            level = np.searchsorted(np.asarray(cuts), raw)
            cols[f.name] = np.asarray(f.levels, dtype=object)[np.minimum(level, len(f.levels) - 1)]
    tab = pd.DataFrame(cols, columns=schema.names)
    if cfg.missing_rate > 0:
        mask = rng.random(tab.shape) < cfg.missing_rate
        tab = tab.mask(mask)

    logits = z @ cfg.weight_vector + cfg.label_bias
    labels = (rng.random(n) < 1.0 / (1.0 + np.exp(-logits))).astype(int)

    ids = [f"sub-{cfg.seed:04d}-{i:05d}" for i in range(n)]
    return Cohort(ids, vols.astype(np.float32), tab, labels, schema, z, centers, radii)
