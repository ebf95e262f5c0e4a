"""End-to-end acceptance criteria, one test per criterion.

Each test appends a PASS/FAIL line that is echoed in the terminal summary.
Criteria 5-7 share one set of desk-scale runs (three cohort seeds, three
pretraining pipelines), computed once per session.
"""
import math
import time

import numpy as np
import pytest
from conftest import ACCEPTANCE_LINES
from oracles import auc_pairs, clip_loss_loops, youden_scan

from ssmm import objectives as L
from ssmm.checkpoint import dumps, load_checkpoint, loads, save_checkpoint
from ssmm.checkpoint import CheckpointError
from ssmm.data import (
    AugmentationConfig,
    SyntheticConfig,
    augment_image,
    balanced_batches,
    corrupt_tabular,
    generate_synthetic,
    mice_impute,
)
from ssmm.data.preprocessing import ZScoreScaler
from ssmm.data.schema import Feature, TabularSchema
from ssmm.explain import embed, gradcam
from ssmm.gradcheck import TOLERANCE, run_suite
from ssmm.metrics import alignment_report, evaluate, roc_auc, youden_point
from ssmm.objectives import ClipConfig
from ssmm.train import RunConfig, finetune, predict_logits, prepare_cohort, pretrain

SEEDS = (0, 1, 2)
PIPELINES = ("clip-itm", "simclr", "scarf")
DESK_PRETRAIN = dict(epochs=5, warmup=1, batch_size=32, lr=1e-3)
DESK_FINETUNE = dict(epochs=50, batch_size=16, lr=1e-3, patience=5, image_rate=0.8)


def report(number, ok, detail):
    ACCEPTANCE_LINES.append(f"criterion {number}: {'PASS' if ok else 'FAIL'}  {detail}")
    print(ACCEPTANCE_LINES[-1])


# -- 1. gradient checks ----------------------------------------------------------
def test_c1_finite_difference_suite():
    start = time.perf_counter()
    results = run_suite(seed=0, repeats=3)
    worst = max(results, key=lambda r: r.max_rel_error)
    elapsed = time.perf_counter() - start
    ok = len(results) >= 100 and worst.max_rel_error < TOLERANCE and elapsed < 120
    report(1, ok, f"{len(results)} cases, worst {worst.name} rel_err={worst.max_rel_error:.2e}, {elapsed:.0f}s")
    assert ok


# -- 2. loss oracles ---------------------------------------------------------------
def test_c2_loss_oracles():
    eye = np.eye(2)
    std = L.clip_loss(eye, eye, ClipConfig(temperature=1.0, lam=0.5))[0].item()
    lit = L.clip_loss(eye, eye, ClipConfig(temperature=1.0, lam=0.5, denominator="literal"))[0].item()
    errs = [abs(std - math.log(1 + math.exp(-1))), abs(lit + 1.0)]
    rng = np.random.default_rng(0)
    for _ in range(50):
        n, d = rng.integers(2, 9), rng.integers(2, 6)
        zi = rng.normal(size=(n, d))
        zt = rng.normal(size=(n, d))
        zi /= np.linalg.norm(zi, axis=1, keepdims=True)
        zt /= np.linalg.norm(zt, axis=1, keepdims=True)
        tau, lam = rng.uniform(0.05, 1.0), rng.uniform(0.0, 1.0)
        for literal in (False, True):
            cfg = ClipConfig(temperature=tau, lam=lam, denominator="literal" if literal else "standard")
            got = L.clip_loss(zi, zt, cfg)[0].item()
            errs.append(abs(got - clip_loss_loops(zi.tolist(), zt.tolist(), tau, lam, literal)))
    errs.append(abs(L.itm_loss(np.zeros(4), np.zeros(4)).item() - math.log(2)))
    errs.append(abs(L.total_loss(0.4, 0.6).item() - 0.5))
    worst = max(errs)
    report(2, worst < 1e-12, f"{len(errs)} oracle comparisons, max |diff| {worst:.1e}")
    assert worst < 1e-12


# -- 3. hard-negative mining distribution ---------------------------------------
def test_c3_mining_distribution():
    s = np.array([[1.0, 0.9, 0.1], [0.9, 1.0, 0.1], [0.1, 0.1, 1.0]])
    tau = 0.1
    expected = L.negative_weights(s, tau)
    rng = np.random.default_rng(0)
    draws = 100_000
    counts = np.zeros((3, 3))
    for _ in range(draws):
        nt, _ = L.mine_hard_negatives(s, tau, rng)
        counts[np.arange(3), nt] += 1
    freq = counts / draws
    dev = np.abs(freq - expected).max()
    matched = int(np.trace(counts))
    ok = dev <= 0.002 and matched == 0
    report(3, ok, f"max |freq - weight| {dev:.4f} over {draws} draws, matched picks {matched}")
    assert ok


# -- 4. metric oracles -------------------------------------------------------------
def test_c4_metric_oracles():
    rng = np.random.default_rng(0)
    worst_auc, youden_bad = 0.0, 0
    for _ in range(1000):
        n = int(rng.integers(2, 51))
        labels = rng.integers(0, 2, size=n)
        labels[:2] = [0, 1]
        scores = np.round(rng.normal(size=n), int(rng.integers(0, 3)))  # rounding forces ties
        auc, curve = roc_auc(scores, labels)
        worst_auc = max(worst_auc, abs(auc - auc_pairs(scores.tolist(), labels.tolist())))
        _, thr = youden_scan(scores, labels.tolist())
        youden_bad += youden_point(curve) != thr
    fixture = roc_auc([0.1, 0.4, 0.35, 0.8], [0, 0, 1, 1])[0]
    ok = worst_auc < 1e-12 and youden_bad == 0 and fixture == 0.75
    report(4, ok, f"max AUC diff {worst_auc:.1e}, Youden mismatches {youden_bad}, fixture AUC {fixture}")
    assert ok


# -- 5-7. desk-scale runs ----------------------------------------------------------
@pytest.fixture(scope="session")
def desk_runs():
    out = {"auc": {}, "seconds": 0.0}
    start = time.perf_counter()
    for seed in SEEDS:
        cohort = generate_synthetic(SyntheticConfig(n_subjects=2600, seed=seed))
        data = prepare_cohort(cohort, seed=seed)
        te, va = data.split("test"), data.split("finetune_val")
        for mode in PIPELINES:
            pre = pretrain(RunConfig(mode=mode, seed=seed, **DESK_PRETRAIN), data)
            ft = finetune(RunConfig(mode=mode, seed=seed, **DESK_FINETUNE), data, pre.state)
            rep = evaluate(predict_logits(ft.model, data, te), data.labels[te], ft.val_scores, data.labels[va])
            out["auc"][seed, mode] = rep.auc
            if seed == 0:
                pre.model.load_state_dict(pre.state)
                out[mode] = (pre.model, ft)
        if seed == 0:
            out["cohort"], out["data"] = cohort, data
    out["seconds"] = time.perf_counter() - start
    return out


@pytest.mark.slow
def test_c5_planted_signal_superiority(desk_runs):
    mean = {m: np.mean([desk_runs["auc"][s, m] for s in SEEDS]) for m in PIPELINES}
    margin = min(mean["clip-itm"] - mean["simclr"], mean["clip-itm"] - mean["scarf"])
    minutes = desk_runs["seconds"] / 60
    ok = mean["clip-itm"] >= 0.85 and margin >= 0.03 and minutes < 30
    detail = ", ".join(f"{m} {mean[m]:.3f}" for m in PIPELINES)
    report(5, ok, f"mean test AUC {detail}; margin {margin:.3f}; {minutes:.1f} min")
    assert ok


def _alignment(desk_runs, mode):
    model = desk_runs[mode][0]
    data = desk_runs["data"]
    z_img, z_tab = embed(model, data, data.split("pretrain_val"))
    return alignment_report(z_img, z_tab)


@pytest.mark.slow
def test_c6_embedding_alignment(desk_runs):
    mm = _alignment(desk_runs, "clip-itm")
    uni = _alignment(desk_runs, "scarf")
    ok = mm["gap"] >= 0.2 and mm["modality_probe_accuracy"] <= 0.75 and uni["modality_probe_accuracy"] >= 0.95
    report(
        6,
        ok,
        f"clip-itm gap {mm['gap']:.3f} probe {mm['modality_probe_accuracy']:.3f}; "
        f"scarf probe {uni['modality_probe_accuracy']:.3f}",
    )
    assert ok


@pytest.mark.slow
def test_c7_gradcam_localization(desk_runs):
    cohort, data = desk_runs["cohort"], desk_runs["data"]
    ft = desk_runs["clip-itm"][1]
    te = data.split("test")
    scores = predict_logits(ft.model, data, te)
    tp = te[(scores >= ft.threshold) & (data.labels[te] == 1)]
    inside, outside = [], []
    for i, hm in zip(tp, gradcam(ft.model, data.volumes[tp], data.tabular[tp])):
        mask = cohort.blob_mask(i)
        inside.append(hm.values[mask].mean())
        outside.append(hm.values[~mask].mean())
    ratio = np.mean(inside) / np.mean(outside)
    report(7, ratio >= 2.0, f"{len(tp)} true positives, inside/outside {ratio:.2f}")
    assert ratio >= 2.0


# -- 8. reproducibility and persistence ----------------------------------------
def test_c8_reproducibility_and_persistence(tmp_path, small_data, tiny_cfg):
    run = RunConfig(mode="clip-itm", epochs=2, warmup=1, batch_size=8, seed=0, patience=2)
    a = pretrain(run, small_data, tiny_cfg)
    b = pretrain(run, small_data, tiny_cfg)
    same_ckpt = dumps(a.state) == dumps(b.state) and a.history == b.history
    ft_a = finetune(run, small_data, a.state, tiny_cfg)
    ft_b = finetune(run, small_data, b.state, tiny_cfg)
    te = small_data.split("test")
    same_report = (
        ft_a.threshold == ft_b.threshold
        and ft_a.val_scores.tobytes() == ft_b.val_scores.tobytes()
        and predict_logits(ft_a.model, small_data, te).tobytes() == predict_logits(ft_b.model, small_data, te).tobytes()
    )

    save_checkpoint(tmp_path / "a.ckpt", a.state)
    back = load_checkpoint(tmp_path / "a.ckpt")
    round_trip = list(back) == list(a.state) and all(back[k].tobytes() == a.state[k].tobytes() for k in back)
    raw = bytearray((tmp_path / "a.ckpt").read_bytes())
    raw[len(raw) // 2] ^= 0x01
    try:
        loads(bytes(raw))
        crc_caught = False
    except CheckpointError:
        crc_caught = True

    frozen = RunConfig(mode="clip-itm", epochs=2, batch_size=8, seed=0, patience=2,
                       freeze_image=True, freeze_tabular=True)
    ft = finetune(frozen, small_data, a.state, tiny_cfg)
    enc = ("image_encoder.", "tabular_encoder.", "image_projector.", "tabular_projector.", "interaction.")
    after = ft.model.state_dict()
    frozen_ok = all(after[k].tobytes() == v.tobytes() for k, v in a.state.items() if k.startswith(enc))

    ok = same_ckpt and same_report and round_trip and crc_caught and frozen_ok
    report(8, ok, f"rerun checkpoint {same_ckpt}, report {same_report}, round trip {round_trip}, "
                  f"CRC {crc_caught}, frozen encoders {frozen_ok}")
    assert ok


# -- 9. preprocessing properties ------------------------------------------------
def test_c9_preprocessing_properties():
    X = np.array([[1.0, 2.0], [2.0, 4.0], [3.0, np.nan], [4.0, 8.0], [5.0, 10.0]])
    mice_val = mice_impute(X)[2, 1]
    mice_ok = abs(mice_val - 6.0) < 1e-6

    import pandas as pd

    vals = np.array([1.0, 4.0, np.nan, 7.0, 2.5, np.nan])
    schema = TabularSchema((Feature("a"),))
    mu, sd = ZScoreScaler(schema).fit(pd.DataFrame({"a": vals})).stats_["a"]
    obs = vals[~np.isnan(vals)]
    z_ok = mu == obs.mean() and sd == obs.std()

    rng = np.random.default_rng(0)
    v = rng.normal(size=(8, 8, 8))
    trials = 10_000
    same = sum(np.array_equal(augment_image(v, AugmentationConfig(image_rate=0.95), rng), v) for _ in range(trials))
    aug_dev = abs(same / trials - 0.05)
    rows = np.zeros((10_000, 10))
    marg = rng.uniform(1.0, 2.0, size=(50, 10))
    corr_dev = abs((corrupt_tabular(rows, marg, 0.3, rng) != 0).mean() - 0.3)
    rates_ok = aug_dev < 0.01 and corr_dev < 0.005

    labels = np.r_[np.ones(37), np.zeros(163)].astype(int)
    batches = balanced_batches(labels, 16, rng)
    balanced = all(len(b) == 16 and labels[b].sum() == 8 for b in batches)

    ok = mice_ok and z_ok and rates_ok and balanced
    report(9, ok, f"MICE {mice_val:.9f}, z-score ignores NaN {z_ok}, augmentation dev {aug_dev:.4f}, "
                  f"corruption dev {corr_dev:.4f}, {len(batches)} balanced batches {balanced}")
    assert ok
