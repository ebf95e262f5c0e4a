"""ROC analysis, Youden operating point, classification metrics and
embedding-alignment diagnostics."""
import json
from dataclasses import asdict, dataclass

import numpy as np
from sklearn.model_selection import StratifiedKFold


class MetricsError(ValueError):
    pass


@dataclass
class RocCurve:
    thresholds: np.ndarray  # descending; thresholds[0] = +inf gives (0, 0)
    fpr: np.ndarray
    tpr: np.ndarray


def _check_binary(scores, labels):
    scores = np.asarray(scores, dtype=float).ravel()
    labels = np.asarray(labels).astype(int).ravel()
    if scores.shape != labels.shape:
        raise MetricsError(f"scores {scores.shape} and labels {labels.shape} differ")
    if not set(np.unique(labels)) <= {0, 1}:
        raise MetricsError("labels must be 0/1")
    if labels.min() == labels.max():
        raise MetricsError("ROC analysis needs both classes present")
    return scores, labels


def roc_curve(scores, labels):
    """Curve over unique score thresholds (predict positive when score >= t)."""
    scores, labels = _check_binary(scores, labels)
    order = np.argsort(-scores, kind="mergesort")
    s, y = scores[order], labels[order]
    distinct = np.r_[np.nonzero(np.diff(s))[0], s.size - 1]
    tps = np.cumsum(y)[distinct]
    fps = (distinct + 1) - tps
    p, n = y.sum(), y.size - y.sum()
    thresholds = np.r_[np.inf, s[distinct]]
    return RocCurve(thresholds, np.r_[0.0, fps / n], np.r_[0.0, tps / p])


def roc_auc(scores, labels):
    """Trapezoidal AUC over unique thresholds; equals the Mann-Whitney
    probability with ties counted 1/2. Returns ``(auc, curve)``."""
    curve = roc_curve(scores, labels)
    return float(np.trapezoid(curve.tpr, curve.fpr)), curve


def youden_point(curve):
    """Threshold maximizing sensitivity + specificity - 1.

    Ties resolve to the lowest threshold, which favours sensitivity.
    """
    j = curve.tpr - curve.fpr
    # distinct J values differ by at least 1/(P*N); the slack only absorbs round-off
    best = np.flatnonzero(j >= j.max() - 1e-12)
    k = best[np.argmin(curve.thresholds[best])]
    return float(curve.thresholds[k])


def youden_index(curve):
    return float((curve.tpr - curve.fpr).max())


@dataclass
class EvalReport:
    auc: float
    threshold: float
    balanced_accuracy: float
    f1: float
    sensitivity: float
    specificity: float
    tp: int
    fp: int
    tn: int
    fn: int

    def to_json(self, **kw):
        return json.dumps(asdict(self), **kw)


def classification_metrics(scores, labels, threshold):
    """Confusion-derived rates at a fixed threshold (positive if >= threshold)."""
    scores = np.asarray(scores, dtype=float).ravel()
    labels = np.asarray(labels).astype(int).ravel()
    pred = scores >= threshold
    tp = int(np.sum(pred & (labels == 1)))
    fp = int(np.sum(pred & (labels == 0)))
    tn = int(np.sum(~pred & (labels == 0)))
    fn = int(np.sum(~pred & (labels == 1)))
    sens = tp / (tp + fn) if tp + fn else 0.0
    spec = tn / (tn + fp) if tn + fp else 0.0
    prec = tp / (tp + fp) if tp + fp else 0.0
    f1 = 2 * prec * sens / (prec + sens) if prec + sens > 0 else 0.0
    return {
        "balanced_accuracy": (sens + spec) / 2.0,
        "f1": f1,
        "sensitivity": sens,
        "specificity": spec,
        "tp": tp,
        "fp": fp,
        "tn": tn,
        "fn": fn,
    }


def evaluate(test_scores, test_labels, val_scores, val_labels):
    """Report on the test split at the Youden threshold of the validation ROC."""
    _, val_curve = roc_auc(val_scores, val_labels)
    thr = youden_point(val_curve)
    auc, _ = roc_auc(test_scores, test_labels)
    m = classification_metrics(test_scores, test_labels, thr)
    return EvalReport(auc=auc, threshold=thr, **m)


def _lstsq_probe_accuracy(X, y, folds=5, seed=0):
    skf = StratifiedKFold(n_splits=folds, shuffle=True, random_state=seed)
    correct = 0
    for tr, te in skf.split(X, y):
        A = np.column_stack([X[tr], np.ones(len(tr))])
        coef, *_ = np.linalg.lstsq(A, 2.0 * y[tr] - 1.0, rcond=None)
        pred = np.column_stack([X[te], np.ones(len(te))]) @ coef >= 0
        correct += int(np.sum(pred == (y[te] == 1)))
    return correct / len(y)


def alignment_report(z_img, z_tab, pair_ids=None, folds=5, seed=0):
    """How well the two modalities share one embedding space.

    * matched / unmatched mean cosine and their gap,
    * cross-validated accuracy of a least-squares linear probe that tries
      to tell image-origin from tabular-origin vectors (0.5 = indistinguishable).
    """
    zi = np.asarray(z_img, dtype=float)
    zt = np.asarray(z_tab, dtype=float)
    if zi.shape != zt.shape:
        raise MetricsError(f"embedding shapes differ: {zi.shape} vs {zt.shape}")
    if pair_ids is not None:
        ids = list(pair_ids)
        if len(ids) != zi.shape[0] or len(set(ids)) != len(ids):
            raise MetricsError("pair_ids must be unique and match the row count")
    ni = zi / np.maximum(np.linalg.norm(zi, axis=1, keepdims=True), 1e-12)
    nt = zt / np.maximum(np.linalg.norm(zt, axis=1, keepdims=True), 1e-12)
    cos = ni @ nt.T
    n = cos.shape[0]
    matched = float(np.mean(np.diag(cos)))
    unmatched = float((cos.sum() - np.trace(cos)) / (n * n - n))
    X = np.vstack([zi, zt])
    y = np.r_[np.zeros(n, dtype=int), np.ones(n, dtype=int)]
    acc = _lstsq_probe_accuracy(X, y, folds, seed)
    return {
        "matched_mean_cos": matched,
        "unmatched_mean_cos": unmatched,
        "gap": matched - unmatched,
        "modality_probe_accuracy": acc,
    }
