"""Encoders, projection heads, interaction module and downstream heads."""
from dataclasses import asdict, dataclass

import numpy as np

from . import tensor as T
from .nn import (
    MLP,
    ConfigurationError,
    Conv3d,
    Linear,
    Module,
    ResidualBlock3D,
    TransformerLayer,
    VolumeNorm,
)
from .ops3d import global_avg_pool3d
from .tensor import Tensor

SOURCES = ("image", "tabular", "cls")


@dataclass
class ModelConfig:
    volume_shape: tuple = (24, 24, 24)
    widths: tuple = (8, 16, 32, 64)
    strides: tuple = (2, 1, 2, 1)
    stem_stride: int = 2
    image_dim: int = 128
    tabular_in: int = 0
    tabular_hidden: tuple = (128, 128)
    tabular_dim: int = 128
    projection_dim: int = 128
    d_model: int = 256
    n_heads: int = 4
    n_layers: int = 2
    ffn_hidden: int = 512
    dropout: float = 0.0

    def __post_init__(self):
        self.volume_shape = tuple(self.volume_shape)
        self.widths = tuple(self.widths)
        self.strides = tuple(self.strides)
        self.tabular_hidden = tuple(self.tabular_hidden)
        if len(self.widths) != len(self.strides):
            raise ConfigurationError("widths and strides must have the same length")
        if self.d_model % self.n_heads:
            raise ConfigurationError(f"d_model={self.d_model} is not divisible by n_heads={self.n_heads}")

    def to_dict(self):
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}


class ImageEncoder(Module):
    """Residual 3D trunk -> global average pool -> linear embedding."""

    def __init__(self, cfg, rng):
        super().__init__()
        self.volume_shape = cfg.volume_shape
        self.stem = Conv3d(1, cfg.widths[0], 3, rng, stride=cfg.stem_stride, padding=1)
        self.stem_norm = VolumeNorm(cfg.widths[0])
        self.stages = []
        c_in = cfg.widths[0]
        for i, (c, s) in enumerate(zip(cfg.widths, cfg.strides)):
            block = ResidualBlock3D(c_in, c, s, rng)
            setattr(self, f"stage{i}", block)
            self.stages.append(block)
            c_in = c
        self.fc = Linear(c_in, cfg.image_dim, rng)
        self.activations = {}

    def forward(self, x, keep_activations=False):
        if x.ndim != 5 or x.shape[1] != 1 or tuple(x.shape[2:]) != tuple(self.volume_shape):
            raise T.DimensionError(f"expected volumes [N,1,{self.volume_shape}], got {x.shape}")
        h = T.relu(self.stem_norm(self.stem(x)))
        acts = {}
        for i, block in enumerate(self.stages):
            h = block(h)
            if keep_activations:
                acts[f"stage{i}"] = h
        self.activations = acts
        return self.fc(global_avg_pool3d(h))


class TabularEncoder(Module):
    def __init__(self, cfg, rng):
        super().__init__()
        if cfg.tabular_in <= 0:
            raise ConfigurationError("tabular_in must be set to the one-hot schema width")
        self.n_in = cfg.tabular_in
        self.mlp = MLP((cfg.tabular_in,) + cfg.tabular_hidden + (cfg.tabular_dim,), rng, cfg.dropout)

    def forward(self, x):
        if x.ndim != 2 or x.shape[1] != self.n_in:
            raise T.DimensionError(f"expected tabular rows [N,{self.n_in}], got {x.shape}")
        return self.mlp(x)


class ProjectionHead(Module):
    """Two-layer MLP onto the unit hypersphere."""

    def __init__(self, n_in, n_out, rng, eps=1e-12):
        super().__init__()
        self.eps = eps
        self.mlp = MLP((n_in, n_in, n_out), rng)

    def forward(self, x):
        return T.l2_normalize(self.mlp(x), axis=-1, eps=self.eps)


class InteractionModule(Module):
    """Cross-modal transformer producing a [CLS] embedding.

    Queries are [CLS, tabular token]; keys/values are the image token.
    """

    def __init__(self, cfg, rng):
        super().__init__()
        d = cfg.d_model
        self.d_model = d
        self.add_param("cls_token", rng.normal(0.0, 0.02, size=(1, 1, d)))
        self.tab_adapter = Linear(cfg.projection_dim, d, rng)
        self.img_adapter = Linear(cfg.projection_dim, d, rng)
        self.layers = []
        for i in range(cfg.n_layers):
            layer = TransformerLayer(d, cfg.n_heads, cfg.ffn_hidden, rng)
            setattr(self, f"layer{i}", layer)
            self.layers.append(layer)

    def forward(self, z_img, z_tab):
        if z_img.shape[0] != z_tab.shape[0]:
            raise T.DimensionError(f"batch mismatch: image {z_img.shape} vs tabular {z_tab.shape}")
        n = z_tab.shape[0]
        tab_tok = T.reshape(self.tab_adapter(z_tab), (n, 1, self.d_model))
        img_tok = T.reshape(self.img_adapter(z_img), (n, 1, self.d_model))
        cls = self.cls_token + Tensor(np.zeros((n, 1, self.d_model)))
        x = T.concatenate([cls, tab_tok], axis=1)
        for layer in self.layers:
            x = layer(x, img_tok)
        return T.reshape(x[:, 0:1, :], (n, self.d_model))


class EnsembleClassifier(Module):
    """Single linear head over the concatenation of the selected embeddings."""

    def __init__(self, sources, dims, rng):
        super().__init__()
        unknown = [s for s in sources if s not in SOURCES]
        if unknown or not sources:
            raise ConfigurationError(f"invalid classifier sources {sources}")
        self.sources = tuple(sources)
        self.in_dim = int(sum(dims[s] for s in self.sources))
        self.fc = Linear(self.in_dim, 1, rng)

    def forward(self, feats):
        parts = [feats[s] for s in self.sources]
        x = parts[0] if len(parts) == 1 else T.concatenate(parts, axis=1)
        return self.fc(x)


class MultimodalModel(Module):
    """Full network: both encoders, projectors, interaction module, ITM head,
    and (after :meth:`attach_classifier`) a downstream classifier."""

    def __init__(self, cfg, seed=0):
        super().__init__()
        self.config = cfg
        rng = np.random.default_rng(seed)
        self.image_encoder = ImageEncoder(cfg, rng)
        self.tabular_encoder = TabularEncoder(cfg, rng)
        self.image_projector = ProjectionHead(cfg.image_dim, cfg.projection_dim, rng)
        self.tabular_projector = ProjectionHead(cfg.tabular_dim, cfg.projection_dim, rng)
        self.interaction = InteractionModule(cfg, rng)
        self.itm_head = Linear(cfg.d_model, 1, rng)
        self.classifier = None
        self._head_seed = int(rng.integers(2**31))

    def attach_classifier(self, sources, seed=None):
        rng = np.random.default_rng(self._head_seed if seed is None else seed)
        dims = {"image": self.config.image_dim, "tabular": self.config.tabular_dim, "cls": self.config.d_model}
        self.classifier = EnsembleClassifier(sources, dims, rng)
        return self.classifier

    def encode_image(self, volumes, keep_activations=False):
        return self.image_encoder(volumes, keep_activations=keep_activations)

    def encode_tabular(self, rows):
        return self.tabular_encoder(rows)

    def project_image(self, emb):
        return self.image_projector(emb)

    def project_tabular(self, emb):
        return self.tabular_projector(emb)

    def interact(self, z_img, z_tab):
        return self.interaction(z_img, z_tab)

    def itm_logits(self, z_img, z_tab):
        return T.reshape(self.itm_head(self.interact(z_img, z_tab)), (z_img.shape[0],))

    def features(self, volumes=None, rows=None, sources=SOURCES, keep_activations=False):
        """Downstream features for the requested sources (pre-projection
        embeddings plus the interaction [CLS] output)."""
        feats = {}
        need_img = "image" in sources or "cls" in sources
        need_tab = "tabular" in sources or "cls" in sources
        if need_img:
            feats["image"] = self.encode_image(volumes, keep_activations=keep_activations)
        if need_tab:
            feats["tabular"] = self.encode_tabular(rows)
        if "cls" in sources:
            feats["cls"] = self.interact(self.project_image(feats["image"]), self.project_tabular(feats["tabular"]))
        return feats

    def classify(self, volumes=None, rows=None, keep_activations=False):
        if self.classifier is None:
            raise RuntimeError("no classifier attached")
        feats = self.features(volumes, rows, self.classifier.sources, keep_activations)
        return self.classifier(feats)

    def module_groups(self):
        """Parameter groups used for freezing decisions."""
        groups = {
            "image_encoder": self.image_encoder,
            "tabular_encoder": self.tabular_encoder,
            "image_projector": self.image_projector,
            "tabular_projector": self.tabular_projector,
            "interaction": self.interaction,
            "itm_head": self.itm_head,
        }
        if self.classifier is not None:
            groups["classifier"] = self.classifier
        return groups


def ensemble_forward(classifier, img_emb, tab_emb, cls_emb):
    return classifier({"image": img_emb, "tabular": tab_emb, "cls": cls_emb})


__all__ = [
    "ModelConfig",
    "ImageEncoder",
    "TabularEncoder",
    "ProjectionHead",
    "InteractionModule",
    "EnsembleClassifier",
    "MultimodalModel",
    "ensemble_forward",
]
