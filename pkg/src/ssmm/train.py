"""Optimization and run orchestration for pretraining and fine-tuning."""
import csv
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as T
from .data.augment import AugmentationConfig, augment_batch, corrupt_tabular
from .data.preprocessing import TabularPreprocessor
from .data.sampling import balanced_batches, plain_batches, stratified_split, strata_keys
from .metrics import roc_auc, youden_point
from .models import ModelConfig, MultimodalModel
from .nn import ConfigurationError
from .objectives import ClipConfig, clip_itm_loss, clip_loss, mine_hard_negatives, ntxent_loss
from .tensor import Tensor

MODES = ("clip-itm", "clip", "simclr", "scarf", "supervised")
MULTIMODAL = ("clip-itm", "clip", "supervised")


class ArchitectureMismatch(ValueError):
    pass


# -- schedule / optimizer / stopping ------------------------------------------
@dataclass
class LrSchedule:
    base: float
    warmup: int = 10
    total: int = 100

    def __post_init__(self):
        if not 0 < self.warmup < self.total:
            raise ConfigurationError(f"need 0 < warmup ({self.warmup}) < total epochs ({self.total})")


def lr_at(epoch, schedule):
    """Linear warmup over ``warmup`` epochs, then cosine decay to zero."""
    w, e = schedule.warmup, schedule.total
    if epoch < w:
        return schedule.base * (epoch + 1) / w
    return schedule.base * 0.5 * (1.0 + math.cos(math.pi * (epoch - w) / (e - w)))


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)
    t: int = 0

    @classmethod
    def for_params(cls, params, lr=1e-3, **kw):
        shapes = [np.shape(p.data if isinstance(p, Tensor) else p) for p in params]
        return cls(lr=lr, m=[np.zeros(s) for s in shapes], v=[np.zeros(s) for s in shapes], **kw)


def adam_step(params, grads, state, rate=None):
    """One bias-corrected Adam update, in place.

    ``params`` are Tensors (or arrays); a ``None`` gradient counts as zero.
    Returns ``(params, state)``.
    """
    if len(params) != len(state.m):
        raise ValueError(f"{len(params)} params but optimizer holds {len(state.m)} buffers")
    rate = state.lr if rate is None else rate
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.t
    c2 = 1.0 - b2**state.t
    for i, (p, g) in enumerate(zip(params, grads)):
        data = p.data if isinstance(p, Tensor) else p
        g = np.zeros_like(data) if g is None else np.asarray(g, dtype=np.float64)
        if g.shape != data.shape:
            raise ValueError(f"gradient {g.shape} does not match parameter {data.shape}")
        if state.weight_decay:
            g = g + state.weight_decay * data
        m, v = state.m[i], state.v[i]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        denom = np.sqrt(v / c2)
        denom += state.eps
        data -= (rate / c1) * m / denom
    return params, state


class EarlyStopping:
    """Stops once ``patience`` consecutive epochs fail to beat the best
    value by more than ``min_delta``, or after ``max_epochs``."""

    def __init__(self, min_delta=1e-4, patience=15, max_epochs=50):
        self.min_delta = min_delta
        self.patience = patience
        self.max_epochs = max_epochs
        self.best = math.inf
        self.best_epoch = -1
        self.bad_epochs = 0
        self.epochs = 0

    def update(self, value):
        """Record one epoch's monitored value; returns True when training should stop."""
        if value < self.best - self.min_delta:
            self.best, self.best_epoch, self.bad_epochs = value, self.epochs, 0
        else:
            self.bad_epochs += 1
        self.epochs += 1
        return self.bad_epochs >= self.patience or self.epochs >= self.max_epochs


# -- run configuration --------------------------------------------------------
@dataclass
class RunConfig:
    mode: str = "clip-itm"
    epochs: int = 100
    warmup: int = 10
    batch_size: int = 6
    lr: float = 1e-3
    weight_decay: float = 0.0
    seed: int = 0
    freeze_image: bool = False
    freeze_tabular: bool = False
    include_other_modality: bool = False
    temperature: float = 0.1
    lam: float = 0.5
    denominator: str = "standard"
    image_rate: float = 0.95
    corruption_rate: float = 0.3
    patience: int = 15
    min_delta: float = 1e-4
    eval_batch_size: int = 64

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigurationError(f"unknown mode {self.mode!r}; expected one of {MODES}")
        if self.batch_size < 2:
            raise ConfigurationError("batch_size must be at least 2")
        if self.epochs < 1:
            raise ConfigurationError("epochs must be positive")
        self.clip_config()

    @property
    def frozen(self):
        return self.freeze_image and self.freeze_tabular

    def clip_config(self):
        return ClipConfig(temperature=self.temperature, lam=self.lam, denominator=self.denominator)

    def augmentation(self):
        return AugmentationConfig(image_rate=self.image_rate, corruption_rate=self.corruption_rate)

    def to_dict(self):
        return asdict(self)


def uses_image(mode, include_other=False):
    return mode != "scarf" or include_other


def uses_tabular(mode, include_other=False):
    return mode != "simclr" or include_other


def classifier_sources(mode, include_other=False):
    if mode == "clip-itm":
        return ("image", "tabular", "cls")
    if mode in ("clip", "supervised"):
        return ("image", "tabular")
    if include_other:
        return ("image", "tabular")
    return ("image",) if mode == "simclr" else ("tabular",)


# -- prepared cohort ----------------------------------------------------------
SPLITS = ("pretrain_train", "pretrain_val", "finetune_train", "finetune_val", "test")


@dataclass
class PreparedData:
    """Model-ready arrays plus split indices into them."""

    subject_ids: np.ndarray
    volumes: np.ndarray  # [N, D, H, W] or None
    tabular: np.ndarray  # [N, F] one-hot/standardized or None
    labels: np.ndarray
    splits: dict
    marginals: np.ndarray = None  # rows to draw corruption values from
    blocks: list = None  # column slices of each tabular feature
    preprocessor: TabularPreprocessor = None

    def __post_init__(self):
        unknown = set(self.splits) - set(SPLITS)
        if unknown:
            raise ValueError(f"unknown split names {sorted(unknown)}")
        if self.marginals is None and self.tabular is not None:
            self.marginals = self.tabular[self.splits.get("pretrain_train", np.arange(len(self.labels)))]

    def split(self, name):
        if name not in self.splits or len(self.splits[name]) == 0:
            raise ValueError(f"split {name!r} is empty or missing")
        return self.splits[name]


def prepare_cohort(cohort, sizes=(1800, 200, 300, 100, 200), groups=("clinical", "brain_idp"), seed=0):
    """Stratified five-way split (label, sex, age tertile), then fit the
    tabular preprocessor on the pretraining-train rows only.

    ``sizes`` are relative proportions of the five splits in :data:`SPLITS`.
    """
    keys = strata_keys(cohort.labels, cohort.tabular["sex"], cohort.tabular["age"])
    ratios = np.asarray(sizes, dtype=float)
    parts = stratified_split(keys, ratios, np.random.default_rng([seed, 17]))
    splits = dict(zip(SPLITS, parts))
    pre = TabularPreprocessor(cohort.schema, groups).fit(cohort.tabular.iloc[splits["pretrain_train"]])
    X = pre.transform(cohort.tabular)
    return PreparedData(
        subject_ids=np.asarray(cohort.subject_ids, dtype=object),
        volumes=cohort.volumes,
        tabular=X,
        labels=np.asarray(cohort.labels, dtype=int),
        splits=splits,
        marginals=X[splits["pretrain_train"]],
        blocks=pre.blocks(),
        preprocessor=pre,
    )


def check_mode_data(mode, data, include_other=False):
    if uses_image(mode, include_other) and data.volumes is None:
        raise ConfigurationError(f"mode {mode!r} needs image volumes")
    if uses_tabular(mode, include_other) and data.tabular is None:
        raise ConfigurationError(f"mode {mode!r} needs tabular rows")


def _volumes(arr):
    return Tensor(np.asarray(arr, dtype=np.float64)[:, None])


def _eval_batches(idx, size):
    """Fixed consecutive batches; a trailing singleton joins the previous batch."""
    out = [idx[i : i + size] for i in range(0, len(idx), size)]
    if len(out) > 1 and len(out[-1]) < 2:
        out[-2] = np.concatenate([out[-2], out.pop()])
    return out


def _weighted_mean(values, weights):
    v, w = np.asarray(values, dtype=float), np.asarray(weights, dtype=float)
    return float(np.sum(v * w) / np.sum(w))


# -- pretraining --------------------------------------------------------------
@dataclass
class PretrainResult:
    model: MultimodalModel
    state: dict  # best-validation parameters
    history: list
    best_epoch: int


def pretrain_batch_loss(model, run, data, idx, rng):
    """Loss of one pretraining batch; returns (loss, parts dict)."""
    aug = run.augmentation()
    mode = run.mode
    if mode in ("clip-itm", "clip"):
        vols = _volumes(augment_batch(data.volumes[idx], aug, rng))
        rows = Tensor(corrupt_tabular(data.tabular[idx], data.marginals, aug.corruption_rate, rng, data.blocks))
        z_img = model.project_image(model.encode_image(vols))
        z_tab = model.project_tabular(model.encode_tabular(rows))
        if mode == "clip":
            loss, _ = clip_loss(z_img, z_tab, run.clip_config())
            return loss, {"clip": loss.item()}
        sim = z_img.data @ z_tab.data.T
        neg_tab, neg_img = mine_hard_negatives(sim, run.temperature, rng)
        loss, l_clip, l_itm = clip_itm_loss(model, z_img, z_tab, run.clip_config(), neg_tab, neg_img)
        return loss, {"clip": l_clip.item(), "itm": l_itm.item()}
    n = len(idx)
    if mode == "simclr":
        both = np.concatenate([augment_batch(data.volumes[idx], aug, rng), augment_batch(data.volumes[idx], aug, rng)])
        z = model.project_image(model.encode_image(_volumes(both)))
    elif mode == "scarf":
        orig = data.tabular[idx]
        corrupt = corrupt_tabular(orig, data.marginals, aug.corruption_rate, rng, data.blocks)
        z = model.project_tabular(model.encode_tabular(Tensor(np.concatenate([orig, corrupt]))))
    else:
        raise ConfigurationError("supervised mode has no pretraining stage")
    loss = ntxent_loss(z[:n], z[n:], run.temperature)
    return loss, {"ntxent": loss.item()}


def pretrain(run, data, model_config=None, log=None):
    """Self-supervised pretraining for ``run.epochs`` epochs (no early stop);
    the returned state is the parameter set with the lowest validation loss."""
    check_mode_data(run.mode, data)
    if run.mode == "supervised":
        raise ConfigurationError("supervised mode has no pretraining stage")
    cfg = model_config or ModelConfig(tabular_in=data.tabular.shape[1])
    model = MultimodalModel(cfg, seed=run.seed)
    params = model.parameters()
    opt = AdamState.for_params(params, lr=run.lr, weight_decay=run.weight_decay)
    sched = LrSchedule(run.lr, run.warmup, run.epochs)
    rng = np.random.default_rng([run.seed, 1])
    train_idx, val_idx = data.split("pretrain_train"), data.split("pretrain_val")
    history, best, best_state, best_epoch = [], math.inf, None, -1
    for epoch in range(run.epochs):
        rate = lr_at(epoch, sched)
        model.train()
        losses = []
        for b in plain_batches(len(train_idx), run.batch_size, rng):
            model.zero_grad()
            loss, _ = pretrain_batch_loss(model, run, data, train_idx[b], rng)
            loss.backward()
            adam_step(params, [p.grad for p in params], opt, rate)
            losses.append(loss.item())
        val, parts = evaluate_pretrain(model, run, data, val_idx)
        row = {"epoch": epoch, "train_loss": float(np.mean(losses)), "val_loss": val, "lr": rate}
        row.update({f"val_{k}": v for k, v in parts.items()})
        history.append(row)
        if val < best:
            best, best_state, best_epoch = val, model.state_dict(), epoch
        if log:
            log(f"pretrain[{run.mode}] epoch {epoch} train {row['train_loss']:.5f} val {val:.5f} lr {rate:.3g}")
    return PretrainResult(model, best_state, history, best_epoch)


def evaluate_pretrain(model, run, data, idx):
    """Validation objective on fixed batches with a fixed augmentation stream,
    so values are comparable across epochs."""
    model.eval()
    rng = np.random.default_rng([run.seed, 2])
    vals, sizes, parts = [], [], {}
    with T.no_grad():
        for b in _eval_batches(idx, run.batch_size):
            loss, p = pretrain_batch_loss(model, run, data, b, rng)
            vals.append(loss.item())
            sizes.append(len(b))
            for k, v in p.items():
                parts.setdefault(k, []).append(v)
    model.train()
    return _weighted_mean(vals, sizes), {k: _weighted_mean(v, sizes) for k, v in parts.items()}


# -- fine-tuning --------------------------------------------------------------
@dataclass
class FinetuneResult:
    model: MultimodalModel
    history: list
    best_epoch: int
    val_scores: np.ndarray
    val_curve: object
    val_auc: float
    threshold: float


def frozen_groups(run):
    groups = []
    if run.freeze_image:
        groups.append("image_encoder")
    if run.freeze_tabular:
        groups.append("tabular_encoder")
    if run.frozen:
        groups += ["image_projector", "tabular_projector", "interaction"]
    if run.mode in ("simclr", "scarf") and run.include_other_modality:
        # the other modality starts from random weights and is always trained
        other = "tabular_encoder" if run.mode == "simclr" else "image_encoder"
        groups = [g for g in groups if g != other]
    return groups


def check_architecture(cfg, data):
    if data.tabular is not None and data.tabular.shape[1] != cfg.tabular_in:
        raise ArchitectureMismatch(f"model expects {cfg.tabular_in} tabular columns, data has {data.tabular.shape[1]}")
    if data.volumes is not None and tuple(data.volumes.shape[1:]) != tuple(cfg.volume_shape):
        raise ArchitectureMismatch(f"model expects volumes {cfg.volume_shape}, data has {data.volumes.shape[1:]}")


def build_finetune_model(run, state, model_config):
    model = MultimodalModel(model_config, seed=run.seed)
    if state is not None:
        try:
            model.load_state_dict(state)
        except (KeyError, ValueError) as exc:
            raise ArchitectureMismatch(f"checkpoint does not fit the configured model: {exc}") from exc
    elif run.mode != "supervised":
        raise ConfigurationError(f"mode {run.mode!r} fine-tuning needs a pretrained checkpoint")
    model.attach_classifier(classifier_sources(run.mode, run.include_other_modality))
    return model


def _class_weights(labels):
    labels = np.asarray(labels)
    n, pos = labels.size, labels.sum()
    if pos == 0 or pos == n:
        return np.ones(n)
    return np.where(labels == 1, n / (2.0 * pos), n / (2.0 * (n - pos)))


def _inputs(model, data, idx, aug=None, rng=None):
    src = model.classifier.sources
    vols = rows = None
    if "image" in src or "cls" in src:
        v = data.volumes[idx]
        vols = _volumes(augment_batch(v, aug, rng) if aug else v)
    if "tabular" in src or "cls" in src:
        r = data.tabular[idx]
        if aug:
            r = corrupt_tabular(r, data.marginals, aug.corruption_rate, rng, data.blocks)
        rows = Tensor(r)
    return vols, rows


def predict_logits(model, data, idx, batch_size=64):
    model.eval()
    out = []
    with T.no_grad():
        for b in _eval_batches(np.asarray(idx), batch_size):
            vols, rows = _inputs(model, data, b)
            out.append(model.classify(vols, rows).data.ravel())
    return np.concatenate(out) if out else np.zeros(0)


def finetune(run, data, state=None, model_config=None, log=None):
    """Supervised fine-tuning with early stopping on class-balanced
    validation BCE; the best epoch's parameters are restored at the end."""
    check_mode_data(run.mode, data, run.include_other_modality)
    cfg = model_config or ModelConfig(tabular_in=data.tabular.shape[1])
    check_architecture(cfg, data)
    model = build_finetune_model(run, state, cfg)
    groups = model.module_groups()
    frozen = frozen_groups(run)
    frozen_params = {id(p) for g in frozen for p in groups[g].parameters()}
    for p in model.parameters():
        p.requires_grad = id(p) not in frozen_params
    params = [p for p in model.parameters() if p.requires_grad]
    opt = AdamState.for_params(params, lr=run.lr, weight_decay=run.weight_decay)
    aug = run.augmentation()
    rng = np.random.default_rng([run.seed, 3])
    tr, va = data.split("finetune_train"), data.split("finetune_val")
    y_tr, y_va = data.labels[tr], data.labels[va]
    w_va = _class_weights(y_va)
    stopper = EarlyStopping(run.min_delta, run.patience, run.epochs)
    history, best_state = [], model.state_dict()
    try:
        while True:
            model.train()
            losses = []
            for b in balanced_batches(y_tr, run.batch_size, rng):
                model.zero_grad()
                vols, rows = _inputs(model, data, tr[b], aug, rng)
                logits = T.reshape(model.classify(vols, rows), (len(b),))
                loss = T.bce_with_logits(logits, y_tr[b].astype(float))
                loss.backward()
                adam_step(params, [p.grad for p in params], opt)
                losses.append(loss.item())
            scores = predict_logits(model, data, va, run.eval_batch_size)
            val = float(T.bce_with_logits(Tensor(scores), y_va.astype(float), w_va).data)
            epoch = stopper.epochs
            history.append({"epoch": epoch, "train_loss": float(np.mean(losses)), "val_loss": val, "lr": run.lr})
            stop = stopper.update(val)
            if stopper.best_epoch == epoch:
                best_state = model.state_dict()
            if log:
                log(f"finetune[{run.mode}] epoch {epoch} train {history[-1]['train_loss']:.5f} val {val:.5f}")
            if stop:
                break
    finally:
        for p in model.parameters():
            p.requires_grad = True
    model.load_state_dict(best_state)
    val_scores = predict_logits(model, data, va, run.eval_batch_size)
    if y_va.min() == y_va.max():
        # no ROC on a single-class validation split; fall back to p = 0.5
        return FinetuneResult(model, history, stopper.best_epoch, val_scores, None, None, 0.0)
    auc, curve = roc_auc(val_scores, y_va)
    return FinetuneResult(model, history, stopper.best_epoch, val_scores, curve, auc, youden_point(curve))


def write_history(path, history):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "train_loss", "val_loss", "lr"])
        for row in history:
            w.writerow([row["epoch"], repr(row["train_loss"]), repr(row["val_loss"]), repr(row["lr"])])


def read_history(path):
    with open(path, newline="") as fh:
        return [
            {"epoch": int(r["epoch"]), "train_loss": float(r["train_loss"]), "val_loss": float(r["val_loss"]), "lr": float(r["lr"])}
            for r in csv.DictReader(fh)
        ]
