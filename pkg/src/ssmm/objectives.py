"""Training objectives: cross-modal CLIP loss, NT-Xent, image-tabular
matching with similarity-weighted hard negatives, and their combination."""
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import Tensor, as_tensor


class ContractError(ValueError):
    pass


@dataclass
class ClipConfig:
    temperature: float = 0.1
    lam: float = 0.5
    denominator: str = "standard"  # or "literal": positives excluded
    reduction: str = "mean"

    def __post_init__(self):
        if self.temperature <= 0:
            raise ValueError("temperature must be > 0")
        if not 0.0 <= self.lam <= 1.0:
            raise ValueError("lam must lie in [0, 1]")
        if self.denominator not in ("standard", "literal"):
            raise ValueError(f"unknown denominator mode {self.denominator!r}")
        if self.reduction not in ("mean", "sum"):
            raise ValueError(f"unknown reduction {self.reduction!r}")


def similarity_matrix(z_img, z_tab):
    """S[j, k] = cos(z_img_j, z_tab_k) for unit-norm rows."""
    return T.matmul(z_img, T.transpose(z_tab, None))


def _anchor_losses(logits, denominator):
    """Per-row -log(exp(l_jj) / sum_k exp(l_jk)) over the chosen denominator."""
    n = logits.shape[0]
    eye = np.eye(n, dtype=bool)
    diag = T.tsum(logits * Tensor(eye.astype(float)), axis=1)
    if denominator == "literal":
        # push the positive out of the log-sum-exp
        logits = logits + Tensor(np.where(eye, -np.inf, 0.0))
    return T.logsumexp(logits, axis=1) - diag


def _reduce(v, reduction):
    return T.mean(v) if reduction == "mean" else T.tsum(v)


def clip_loss(z_img, z_tab, config=None):
    """Bidirectional contrastive loss between image and tabular projections.

    Returns ``(loss, S)`` where ``S`` is the (taped) cosine-similarity
    matrix, rows indexed by image anchors.
    """
    config = config or ClipConfig()
    z_img, z_tab = as_tensor(z_img), as_tensor(z_tab)
    n = z_img.shape[0]
    if n < 2:
        raise ContractError("clip_loss needs at least two pairs (no negatives otherwise)")
    if z_tab.shape != z_img.shape:
        raise T.DimensionError(f"projection shapes differ: {z_img.shape} vs {z_tab.shape}")
    sim = similarity_matrix(z_img, z_tab)
    logits = sim * (1.0 / config.temperature)
    l_it = _reduce(_anchor_losses(logits, config.denominator), config.reduction)
    l_ti = _reduce(_anchor_losses(T.transpose(logits, None), config.denominator), config.reduction)
    loss = l_it * config.lam + l_ti * (1.0 - config.lam)
    return loss, sim


def ntxent_loss(z1, z2, temperature=0.1):
    """NT-Xent over 2N views: each view's positive is its counterpart, all
    other 2N-2 views are negatives. Mean over the 2N anchors."""
    z1, z2 = as_tensor(z1), as_tensor(z2)
    n = z1.shape[0]
    if n < 2:
        raise ContractError("ntxent_loss needs at least two samples")
    z = T.concatenate([z1, z2], axis=0)
    logits = T.matmul(z, T.transpose(z, None)) * (1.0 / temperature)
    logits = logits + Tensor(np.where(np.eye(2 * n, dtype=bool), -np.inf, 0.0))
    pos = T.tsum(z1 * z2, axis=1) * (1.0 / temperature)
    pos = T.concatenate([pos, pos], axis=0)
    return T.mean(T.logsumexp(logits, axis=1) - pos)


def negative_weights(sim, temperature):
    """Row-wise sampling probabilities over off-diagonal candidates,
    proportional to exp(S/temperature)."""
    s = np.asarray(sim.data if isinstance(sim, Tensor) else sim, dtype=np.float64)
    n = s.shape[0]
    logits = np.where(np.eye(n, dtype=bool), -np.inf, s / temperature)
    logits = logits - logits.max(axis=1, keepdims=True)
    w = np.exp(logits)
    return w / w.sum(axis=1, keepdims=True)


def _draw(probs, rng):
    u = rng.random(probs.shape[0])
    cdf = np.cumsum(probs, axis=1)
    idx = (cdf < u[:, None]).sum(axis=1)
    return np.minimum(idx, probs.shape[1] - 1)


def mine_hard_negatives(sim, temperature, rng):
    """Sample one non-matching partner per anchor, weighted by similarity.

    Returns ``(neg_tab_for_img, neg_img_for_tab)``: for image anchor j the
    index of a tabular sample, and for tabular anchor j the index of an
    image sample. The matched index always has weight zero.
    """
    s = np.asarray(sim.data if isinstance(sim, Tensor) else sim, dtype=np.float64)
    if s.ndim != 2 or s.shape[0] != s.shape[1]:
        raise T.DimensionError(f"similarity matrix must be square, got {s.shape}")
    if s.shape[0] < 2:
        raise ContractError("hard-negative mining needs at least two pairs")
    neg_tab = _draw(negative_weights(s, temperature), rng)
    neg_img = _draw(negative_weights(s.T, temperature), rng)
    # the matched index has probability zero, but guard against cdf round-off
    n = s.shape[0]
    for idx in (neg_tab, neg_img):
        bad = idx == np.arange(n)
        idx[bad] = (idx[bad] + 1) % n
    return neg_tab, neg_img


def itm_loss(logits_pos, logits_neg):
    """Binary cross-entropy with target 1 for matched and 0 for mined pairs."""
    logits_pos, logits_neg = as_tensor(logits_pos), as_tensor(logits_neg)
    if logits_pos.shape != logits_neg.shape:
        raise ContractError(f"positive/negative counts differ: {logits_pos.shape} vs {logits_neg.shape}")
    logits = T.concatenate([logits_pos, logits_neg], axis=0)
    targets = np.concatenate([np.ones(logits_pos.shape), np.zeros(logits_neg.shape)])
    return T.bce_with_logits(logits, targets)


def total_loss(l_clip, l_itm):
    """Average of the contrastive and matching terms."""
    return (as_tensor(l_clip) + as_tensor(l_itm)) * 0.5


def clip_itm_loss(model, z_img, z_tab, config, neg_tab, neg_img):
    """Full pretraining objective given already-mined negative indices.

    ITM is evaluated once per negative direction so every call to
    :func:`itm_loss` sees one mined pair per matched pair.
    """
    l_clip, _ = clip_loss(z_img, z_tab, config)
    n = z_img.shape[0]
    img = T.concatenate([z_img, z_img, z_img[neg_img]], axis=0)
    tab = T.concatenate([z_tab, z_tab[neg_tab], z_tab], axis=0)
    logits = model.itm_logits(img, tab)
    pos, neg_a, neg_b = logits[:n], logits[n : 2 * n], logits[2 * n :]
    l_itm = (itm_loss(pos, neg_a) + itm_loss(pos, neg_b)) * 0.5
    return total_loss(l_clip, l_itm), l_clip, l_itm
