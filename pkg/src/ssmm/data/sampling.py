"""Stratified splitting and class-balanced batch streams."""
from dataclasses import dataclass

import numpy as np
import pandas as pd


@dataclass
class MultimodalBatch:
    subject_ids: list
    volumes: np.ndarray
    tabular: np.ndarray
    labels: np.ndarray = None

    def __post_init__(self):
        n = len(self.subject_ids)
        if self.volumes.shape[0] != n or self.tabular.shape[0] != n:
            raise ValueError("batch arrays must share the leading dimension")
        if self.labels is not None and len(self.labels) != n:
            raise ValueError("labels length differs from batch size")

    def __len__(self):
        return len(self.subject_ids)


def largest_remainder(n, ratios):
    """Integer allocation of ``n`` items proportional to ``ratios``."""
    r = np.asarray(ratios, dtype=float)
    if (r < 0).any() or r.sum() <= 0:
        raise ValueError(f"invalid ratios {ratios}")
    exact = n * r / r.sum()
    counts = np.floor(exact).astype(int)
    rest = n - counts.sum()
    # ties go to the earlier split
    order = sorted(range(len(r)), key=lambda i: (-(exact[i] - counts[i]), i))
    for i in order[:rest]:
        counts[i] += 1
    return counts


def age_bins(age, n_bins=3):
    """Quantile bins of recorded ages; missing ages get bin -1."""
    age = np.asarray(age, dtype=float)
    out = np.full(age.shape, -1, dtype=int)
    rec = ~np.isnan(age)
    if rec.any():
        edges = np.quantile(age[rec], np.linspace(0, 1, n_bins + 1)[1:-1])
        out[rec] = np.searchsorted(edges, age[rec], side="right")
    return out


def strata_keys(labels, sex, age, n_age_bins=3):
    sex = ["missing" if pd.isna(s) else str(s) for s in sex]
    bins = age_bins(age, n_age_bins)
    return [f"{int(y)}|{s}|{b}" for y, s, b in zip(labels, sex, bins)]


def stratified_split(keys, ratios=(0.6, 0.2, 0.2), rng=None):
    """Partition indices per stratum by largest-remainder rounding.

    Each stratum first receives the floor of its exact share per split.
    Leftover units go to the (stratum, split) cells with the largest
    remainders, subject to the overall split sizes also matching a
    largest-remainder allocation of the whole cohort. Every stratum is
    therefore within one subject of its target in every split, and small
    splits are not starved when strata are small.

    Returns one index array per ratio; the parts are disjoint and cover
    every index.
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    keys = list(keys)
    r = np.asarray(ratios, dtype=float)
    if (r < 0).any() or r.sum() <= 0:
        raise ValueError(f"invalid ratios {ratios}")
    r = r / r.sum()
    strata = sorted(set(keys))
    members = []
    for key in strata:
        m = np.array([i for i, k in enumerate(keys) if k == key])
        members.append(m[rng.permutation(len(m))])
    sizes = np.array([len(m) for m in members])
    exact = sizes[:, None] * r[None, :]
    counts = np.floor(exact).astype(int)
    left = sizes - counts.sum(axis=1)
    deficit = largest_remainder(len(keys), r) - counts.sum(axis=0)
    frac = exact - counts
    cells = sorted(np.ndindex(counts.shape), key=lambda c: (-frac[c], c))
    for s, k in cells:
        if left[s] > 0 and deficit[k] > 0:
            counts[s, k] += 1
            left[s] -= 1
            deficit[k] -= 1
    # rare leftovers the global targets could not absorb stay in their stratum
    for s, k in cells:
        if left[s] > 0 and counts[s, k] == np.floor(exact[s, k]):
            counts[s, k] += 1
            left[s] -= 1
    parts = [[] for _ in ratios]
    for m, row in zip(members, counts):
        start = 0
        for p, c in enumerate(row):
            parts[p].extend(m[start : start + c].tolist())
            start += c
    return tuple(np.array(sorted(p), dtype=int) for p in parts)


def balanced_batches(labels, batch_size, rng):
    """One epoch of batches, each with ``batch_size/2`` of each class.

    The epoch length is set by the majority class, which is covered once;
    the minority class is cycled through reshuffled permutations.
    """
    if batch_size % 2 or batch_size < 2:
        raise ValueError(f"balanced batches need an even batch size, got {batch_size}")
    labels = np.asarray(labels).astype(int)
    pos = np.nonzero(labels == 1)[0]
    neg = np.nonzero(labels == 0)[0]
    if pos.size == 0 or neg.size == 0:
        raise ValueError("balanced batches need both classes")
    half = batch_size // 2
    major, minor = (pos, neg) if pos.size >= neg.size else (neg, pos)
    n_batches = int(np.ceil(major.size / half))

    def stream(idx, count):
        out = []
        while len(out) < count:
            out.extend(idx[rng.permutation(idx.size)].tolist())
        return np.asarray(out[:count])

    maj = stream(major, n_batches * half)
    mino = stream(minor, n_batches * half)
    batches = []
    for b in range(n_batches):
        sel = np.concatenate([maj[b * half : (b + 1) * half], mino[b * half : (b + 1) * half]])
        batches.append(sel[rng.permutation(sel.size)])
    return batches


def plain_batches(n, batch_size, rng, drop_last=True):
    order = rng.permutation(n)
    stop = (n // batch_size) * batch_size if drop_last else n
    return [order[i : i + batch_size] for i in range(0, stop, batch_size)]
