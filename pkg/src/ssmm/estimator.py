"""scikit-learn style wrappers around pretraining and fine-tuning.

Inputs are ``X = (volumes, rows)`` pairs: volumes [N, D, H, W] and
already-preprocessed tabular rows [N, F] (see
:class:`ssmm.data.TabularPreprocessor`). Either member may be ``None``
when the mode does not read that modality.
"""
import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .data.sampling import stratified_split
from .explain import embed
from .models import ModelConfig
from .train import PreparedData, RunConfig, finetune, predict_logits, pretrain, uses_image, uses_tabular


def check_volumes(volumes, name="volumes"):
    v = np.asarray(volumes)
    if v.ndim != 4:
        raise ValueError(f"{name} must be [N, D, H, W], got shape {v.shape}")
    if not np.issubdtype(v.dtype, np.number):
        raise ValueError(f"{name} must be numeric, got {v.dtype}")
    if not np.isfinite(v).all():
        raise ValueError(f"{name} contain NaN or infinite voxels")
    return v


def check_rows(rows, name="rows"):
    r = np.asarray(rows, dtype=float)
    if r.ndim != 2:
        raise ValueError(f"{name} must be [N, F], got shape {r.shape}")
    if not np.isfinite(r).all():
        raise ValueError(f"{name} contain NaN or infinite values; impute first")
    return r


def check_multimodal(X, need_image=True, need_tabular=True):
    """Validate an ``(volumes, rows)`` pair and return it as arrays."""
    if not isinstance(X, (tuple, list)) or len(X) != 2:
        raise ValueError("X must be a (volumes, rows) pair")
    vols, rows = X
    if need_image and vols is None:
        raise ValueError("this estimator needs image volumes")
    if need_tabular and rows is None:
        raise ValueError("this estimator needs tabular rows")
    vols = None if vols is None else check_volumes(vols)
    rows = None if rows is None else check_rows(rows)
    if vols is not None and rows is not None and len(vols) != len(rows):
        raise ValueError(f"volumes ({len(vols)}) and rows ({len(rows)}) differ in length")
    return vols, rows


def check_binary_labels(y, n):
    y = np.asarray(y)
    if y.shape != (n,):
        raise ValueError(f"y must have shape ({n},), got {y.shape}")
    if not set(np.unique(y).tolist()) <= {0, 1}:
        raise ValueError("y must contain only 0/1 labels")
    return y.astype(int)


def _n(vols, rows):
    return len(vols) if vols is not None else len(rows)


def _prepared(vols, rows, labels, splits, marginals=None, blocks=None):
    n = _n(vols, rows)
    return PreparedData(
        subject_ids=np.array([f"row{i}" for i in range(n)], dtype=object),
        volumes=vols,
        tabular=rows,
        labels=np.zeros(n, dtype=int) if labels is None else labels,
        splits=splits,
        marginals=marginals,
        blocks=blocks,
    )


def _model_config(model_config, vols, rows):
    d = dict(model_config or {})
    if rows is not None:
        d.setdefault("tabular_in", rows.shape[1])
    else:
        d.setdefault("tabular_in", 1)
    if vols is not None:
        d.setdefault("volume_shape", vols.shape[1:])
    return ModelConfig(**d)


class SSLPretrainer(BaseEstimator, TransformerMixin):
    """Self-supervised pretraining; ``transform`` returns the concatenated
    unit-norm image and tabular projections."""

    def __init__(
        self,
        mode="clip-itm",
        epochs=100,
        warmup=10,
        batch_size=6,
        lr=1e-3,
        temperature=0.1,
        lam=0.5,
        denominator="standard",
        val_fraction=0.1,
        model_config=None,
        seed=0,
    ):
        self.mode = mode
        self.epochs = epochs
        self.warmup = warmup
        self.batch_size = batch_size
        self.lr = lr
        self.temperature = temperature
        self.lam = lam
        self.denominator = denominator
        self.val_fraction = val_fraction
        self.model_config = model_config
        self.seed = seed

    def _run(self):
        return RunConfig(
            mode=self.mode,
            epochs=self.epochs,
            warmup=self.warmup,
            batch_size=self.batch_size,
            lr=self.lr,
            temperature=self.temperature,
            lam=self.lam,
            denominator=self.denominator,
            seed=self.seed,
        )

    def fit(self, X, y=None):
        run = self._run()
        vols, rows = check_multimodal(X, uses_image(run.mode), uses_tabular(run.mode))
        n = _n(vols, rows)
        rng = np.random.default_rng([self.seed, 5])
        tr, va = stratified_split(["all"] * n, (1.0 - self.val_fraction, self.val_fraction), rng)
        self.model_config_ = _model_config(self.model_config, vols, rows)
        data = _prepared(vols, rows, None, {"pretrain_train": tr, "pretrain_val": va})
        result = pretrain(run, data, self.model_config_)
        self.state_ = result.state
        self.history_ = result.history
        self.model_ = result.model
        self.model_.load_state_dict(result.state)
        return self

    def transform(self, X):
        check_is_fitted(self, "state_")
        vols, rows = check_multimodal(X)
        data = _prepared(vols, rows, None, {})
        z_img, z_tab = embed(self.model_, data, np.arange(_n(vols, rows)))
        return np.hstack([z_img, z_tab])


class MultimodalClassifier(BaseEstimator, ClassifierMixin):
    """Downstream classifier on top of an (optional) pretrained state.

    ``predict`` thresholds the logit at the Youden point of an internal,
    stratified validation split.
    """

    def __init__(
        self,
        mode="clip-itm",
        pretrained_state=None,
        frozen=False,
        include_other_modality=False,
        max_epochs=50,
        patience=15,
        min_delta=1e-4,
        batch_size=6,
        lr=1e-3,
        image_rate=0.80,
        corruption_rate=0.3,
        val_fraction=0.25,
        model_config=None,
        seed=0,
    ):
        self.mode = mode
        self.pretrained_state = pretrained_state
        self.frozen = frozen
        self.include_other_modality = include_other_modality
        self.max_epochs = max_epochs
        self.patience = patience
        self.min_delta = min_delta
        self.batch_size = batch_size
        self.lr = lr
        self.image_rate = image_rate
        self.corruption_rate = corruption_rate
        self.val_fraction = val_fraction
        self.model_config = model_config
        self.seed = seed

    def _run(self):
        return RunConfig(
            mode=self.mode,
            epochs=self.max_epochs,
            batch_size=self.batch_size,
            lr=self.lr,
            seed=self.seed,
            freeze_image=self.frozen,
            freeze_tabular=self.frozen,
            include_other_modality=self.include_other_modality,
            image_rate=self.image_rate,
            corruption_rate=self.corruption_rate,
            patience=self.patience,
            min_delta=self.min_delta,
        )

    def fit(self, X, y):
        run = self._run()
        inc = self.include_other_modality
        vols, rows = check_multimodal(X, uses_image(run.mode, inc), uses_tabular(run.mode, inc))
        y = check_binary_labels(y, _n(vols, rows))
        rng = np.random.default_rng([self.seed, 6])
        tr, va = stratified_split(y.tolist(), (1.0 - self.val_fraction, self.val_fraction), rng)
        self.model_config_ = _model_config(self.model_config, vols, rows)
        marg = None if rows is None else rows[tr]
        data = _prepared(vols, rows, y, {"finetune_train": tr, "finetune_val": va}, marginals=marg)
        result = finetune(run, data, self.pretrained_state, self.model_config_)
        self.model_ = result.model
        self.history_ = result.history
        self.threshold_ = result.threshold
        self.val_auc_ = result.val_auc
        self.classes_ = np.array([0, 1])
        return self

    def decision_function(self, X):
        check_is_fitted(self, "model_")
        vols, rows = check_multimodal(X, False, False)
        data = _prepared(vols, rows, None, {})
        return predict_logits(self.model_, data, np.arange(_n(vols, rows)))

    def predict_proba(self, X):
        z = self.decision_function(X)
        p = 1.0 / (1.0 + np.exp(-z))
        return np.column_stack([1.0 - p, p])

    def predict(self, X):
        return (self.decision_function(X) >= self.threshold_).astype(int)
