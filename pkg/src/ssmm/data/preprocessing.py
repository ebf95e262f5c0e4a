"""Tabular preprocessing: z-score -> MICE imputation -> one-hot.

The transformers follow the scikit-learn estimator protocol so they can be
dropped into a ``Pipeline``; every statistic is learned in ``fit`` and only
read in ``transform``.
"""
import numpy as np
import pandas as pd
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .schema import DEFAULT_SCHEMA, TabularSchema

SIGMA_FLOOR = 1e-12


class ImputationError(ValueError):
    pass


# -- z-score -------------------------------------------------------------------
def fit_zscore(rows, schema):
    """Mean and population std of each continuous feature over recorded values."""
    stats = {}
    for name in schema.continuous:
        if name not in rows.columns:
            raise KeyError(f"unknown feature {name!r}")
        vals = pd.to_numeric(rows[name], errors="coerce").to_numpy(dtype=float)
        vals = vals[~np.isnan(vals)]
        if vals.size == 0:
            raise ImputationError(f"feature {name!r} has no recorded values")
        stats[name] = (float(vals.mean()), float(vals.std()))
    return stats


def apply_zscore(rows, stats):
    out = rows.copy()
    for name, (mu, sigma) in stats.items():
        if name not in out.columns:
            raise KeyError(f"unknown feature {name!r}")
        vals = pd.to_numeric(out[name], errors="coerce").to_numpy(dtype=float)
        if sigma < SIGMA_FLOOR:
            z = np.where(np.isnan(vals), np.nan, 0.0)
        else:
            z = (vals - mu) / sigma
        out[name] = z
    return out


class ZScoreScaler(BaseEstimator, TransformerMixin):
    """Standardize continuous schema columns; missing entries stay missing."""

    def __init__(self, schema=DEFAULT_SCHEMA):
        self.schema = schema

    def fit(self, X, y=None):
        self.stats_ = fit_zscore(X, self.schema)
        return self

    def transform(self, X):
        check_is_fitted(self, "stats_")
        return apply_zscore(X, self.stats_)


# -- MICE ----------------------------------------------------------------------
def _lstsq_fit(X, y):
    A = np.column_stack([X, np.ones(len(X))])
    coef, *_ = np.linalg.lstsq(A, y, rcond=None)
    return coef


def _predict(X, coef):
    return X @ coef[:-1] + coef[-1]


class MiceImputer(BaseEstimator, TransformerMixin):
    """Chained-equations imputation of a numeric matrix by least squares.

    ``fit`` runs the chained rounds on the training matrix and keeps the
    final per-column regressions; ``transform`` reuses those regressions
    (and training means for initialization) on new rows.
    """

    def __init__(self, max_rounds=10, tol=1e-6):
        self.max_rounds = max_rounds
        self.tol = tol

    def _check(self, X):
        X = np.array(X, dtype=float, copy=True)
        if X.ndim != 2:
            raise ValueError(f"expected a 2-D matrix, got shape {X.shape}")
        return X

    def fit(self, X, y=None, column_names=None):
        X = self._check(X)
        names = column_names or [f"column {j}" for j in range(X.shape[1])]
        missing = np.isnan(X)
        recorded = (~missing).sum(axis=0)
        for j in range(X.shape[1]):
            if recorded[j] == 0:
                raise ImputationError(f"{names[j]} has no recorded values")
            if recorded[j] < 2 and missing[:, j].any():
                raise ImputationError(f"{names[j]} needs at least two recorded values")
        self.means_ = np.nanmean(X, axis=0)
        filled, self.n_rounds_ = self._iterate(X, missing, fit=True)
        # regressions for every column so unseen missingness patterns work
        self.coefs_ = []
        for j in range(X.shape[1]):
            others = np.delete(np.arange(X.shape[1]), j)
            rows = ~missing[:, j]
            self.coefs_.append(_lstsq_fit(filled[rows][:, others], X[rows, j]))
        return self

    def _iterate(self, X, missing, fit):
        filled = np.where(missing, self.means_, X)
        incomplete = [j for j in range(X.shape[1]) if missing[:, j].any()]
        if not incomplete:
            return filled, 0
        rounds = 0
        for rounds in range(1, self.max_rounds + 1):
            change = 0.0
            for j in incomplete:
                others = np.delete(np.arange(X.shape[1]), j)
                rows = ~missing[:, j]
                if fit:
                    coef = _lstsq_fit(filled[rows][:, others], X[rows, j])
                else:
                    coef = self.coefs_[j]
                new = _predict(filled[missing[:, j]][:, others], coef)
                change = max(change, float(np.abs(new - filled[missing[:, j], j]).max()))
                filled[missing[:, j], j] = new
            if change < self.tol:
                break
        return filled, rounds

    def transform(self, X):
        check_is_fitted(self, "coefs_")
        X = self._check(X)
        filled, _ = self._iterate(X, np.isnan(X), fit=False)
        return filled


def mice_impute(matrix, max_rounds=10, tol=1e-6):
    """Impute a numeric matrix in place of its own statistics."""
    return MiceImputer(max_rounds, tol).fit_transform(matrix)


def mode_fill(rows, schema, modes=None):
    """Replace missing categorical entries by the most frequent level."""
    out = rows.copy()
    if modes is None:
        modes = {}
        for name in schema.categorical:
            counts = out[name].dropna().value_counts()
            if counts.empty:
                raise ImputationError(f"categorical feature {name!r} has no recorded values")
            # ties broken by the schema's level order
            levels = schema[name].levels
            best = max(levels, key=lambda lv: (counts.get(lv, 0), -levels.index(lv)))
            modes[name] = best
    for name, value in modes.items():
        out[name] = out[name].where(out[name].notna(), value)
    return out, modes


# -- one-hot -------------------------------------------------------------------
def one_hot(rows, schema):
    """Numeric matrix: continuous features as-is, categoricals one-hot in
    schema level order."""
    blocks = []
    for f in schema.features:
        if f.kind == "continuous":
            blocks.append(pd.to_numeric(rows[f.name]).to_numpy(dtype=float)[:, None])
        else:
            vals = rows[f.name].to_numpy()
            unknown = set(pd.unique(vals[pd.notna(vals)])) - set(f.levels)
            if unknown:
                raise ValueError(f"{f.name}: unknown levels {sorted(map(str, unknown))}")
            blocks.append(np.stack([(vals == lv).astype(float) for lv in f.levels], axis=1))
    return np.hstack(blocks) if blocks else np.zeros((len(rows), 0))


def feature_blocks(schema):
    """Column slices of each feature inside the one-hot matrix."""
    out, start = [], 0
    for f in schema.features:
        out.append(slice(start, start + f.width))
        start += f.width
    return out


class TabularPreprocessor(BaseEstimator, TransformerMixin):
    """Schema-driven pipeline: z-score, mode fill + MICE, one-hot.

    ``groups`` selects the feature groups fed to the model.
    """

    def __init__(self, schema=DEFAULT_SCHEMA, groups=("clinical", "brain_idp"), max_rounds=10, tol=1e-6):
        self.schema = schema
        self.groups = groups
        self.max_rounds = max_rounds
        self.tol = tol

    @property
    def active_schema(self):
        return self.schema.select_groups(tuple(self.groups))

    def fit(self, X, y=None):
        sch = self.active_schema
        self.scaler_ = ZScoreScaler(sch).fit(X)
        scaled = self.scaler_.transform(X)
        _, self.modes_ = mode_fill(scaled, sch)
        self.imputer_ = MiceImputer(self.max_rounds, self.tol).fit(
            scaled[sch.continuous].to_numpy(dtype=float), column_names=sch.continuous
        )
        self.train_matrix_ = self.transform(X)
        return self

    def transform(self, X):
        check_is_fitted(self, "imputer_")
        sch = self.active_schema
        scaled = self.scaler_.transform(X)
        filled, _ = mode_fill(scaled, sch, self.modes_)
        if sch.continuous:
            filled[sch.continuous] = self.imputer_.transform(filled[sch.continuous].to_numpy(dtype=float))
        return one_hot(filled, sch)

    @property
    def n_features_out(self):
        return self.active_schema.one_hot_width

    def get_feature_names_out(self, input_features=None):
        return np.asarray(self.active_schema.one_hot_columns(), dtype=object)

    def blocks(self):
        return feature_blocks(self.active_schema)

    def to_dict(self):
        check_is_fitted(self, "imputer_")
        return {
            "schema": self.schema.to_dict(),
            "groups": list(self.groups),
            "zscore": {k: list(v) for k, v in self.scaler_.stats_.items()},
            "modes": self.modes_,
            "mice_means": self.imputer_.means_.tolist(),
            "mice_coefs": [c.tolist() for c in self.imputer_.coefs_],
            "mice_rounds": self.imputer_.n_rounds_,
        }

    @classmethod
    def from_dict(cls, d, train_matrix=None):
        schema = TabularSchema.from_dict(d["schema"])
        pre = cls(schema, tuple(d["groups"]))
        pre.scaler_ = ZScoreScaler(pre.active_schema)
        pre.scaler_.stats_ = {k: tuple(v) for k, v in d["zscore"].items()}
        pre.modes_ = dict(d["modes"])
        pre.imputer_ = MiceImputer(pre.max_rounds, pre.tol)
        pre.imputer_.means_ = np.asarray(d["mice_means"], dtype=float)
        pre.imputer_.coefs_ = [np.asarray(c, dtype=float) for c in d["mice_coefs"]]
        pre.imputer_.n_rounds_ = d.get("mice_rounds", 0)
        pre.train_matrix_ = train_matrix
        return pre
