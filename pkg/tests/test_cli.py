import json
import os

import numpy as np
import pytest

from ssmm import config as C
from ssmm.checkpoint import load_checkpoint
from ssmm.cli import main
from ssmm.explain import read_embeddings, read_pgm

SMALL = {
    "data": {"n_subjects": 64, "volume_shape": [12, 12, 12], "splits": [32, 8, 12, 6, 6]},
    "model": {
        "widths": [2, 4],
        "strides": [1, 2],
        "image_dim": 8,
        "tabular_hidden": [8],
        "tabular_dim": 8,
        "projection_dim": 8,
        "d_model": 8,
        "n_heads": 2,
        "n_layers": 1,
        "ffn_hidden": 16,
    },
    "pretrain": {"epochs": 2, "warmup": 1, "batch_size": 8},
    "finetune": {"max_epochs": 2, "patience": 2, "batch_size": 8},
    "eval": {"n_heatmaps": 2},
}


def run(*argv):
    return main([str(a) for a in argv])


@pytest.fixture(scope="module")
def recipe(tmp_path_factory):
    """gen-data -> preprocess -> pretrain -> finetune on the small config."""
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "small.json"
    cfg.write_text(json.dumps(SMALL))
    d = {k: root / k for k in ("gen", "prep", "pre", "ft")}
    assert run("gen-data", "--config", cfg, "--seed", 3, "--out", d["gen"]) == 0
    assert run("preprocess", "--config", cfg, "--data", d["gen"] / "cohort", "--out", d["prep"]) == 0
    assert run("pretrain", "--config", cfg, "--prep", d["prep"], "--out", d["pre"]) == 0
    ft = ("finetune", "--config", cfg, "--prep", d["prep"], "--checkpoint", d["pre"] / "pretrain.ssmm")
    assert run(*ft, "--trainable", "--out", d["ft"]) == 0
    d["cfg"] = cfg
    d["root"] = root
    return d


def test_outputs_written(recipe):
    for sub in ("gen", "prep", "pre", "ft"):
        assert (recipe[sub] / "config.json").exists()
        log = (recipe[sub] / "run.log").read_text().splitlines()
        assert log and "INFO" in log[0] and log[0][:4].isdigit()
    assert (recipe["gen"] / "cohort" / "volumes.vol").exists()
    for f in ("prep.json", "splits.csv", "tabular_processed.csv"):
        assert (recipe["prep"] / f).exists()
    side = json.loads((recipe["pre"] / "pretrain.json").read_text())
    assert side["mode"] == "clip-itm" and side["model"]["tabular_in"] > 0
    assert len((recipe["pre"] / "history.csv").read_text().splitlines()) == 3
    report = json.loads((recipe["ft"] / "report.json").read_text())
    assert 0.0 <= report["auc"] <= 1.0


def test_resolved_config_recorded(recipe):
    saved = json.loads((recipe["pre"] / "config.json").read_text())
    assert saved == C.load(str(recipe["cfg"]))


def test_rerun_is_bit_identical(recipe):
    out = recipe["root"] / "pre2"
    assert run("pretrain", "--config", recipe["cfg"], "--prep", recipe["prep"], "--out", out) == 0
    assert (out / "pretrain.ssmm").read_bytes() == (recipe["pre"] / "pretrain.ssmm").read_bytes()
    out = recipe["root"] / "ft2"
    ck = recipe["pre"] / "pretrain.ssmm"
    assert run("finetune", "--config", recipe["cfg"], "--prep", recipe["prep"], "--checkpoint", ck, "--trainable", "--out", out) == 0
    assert (out / "finetune.ssmm").read_bytes() == (recipe["ft"] / "finetune.ssmm").read_bytes()
    assert (out / "report.json").read_bytes() == (recipe["ft"] / "report.json").read_bytes()


def test_frozen_finetune_keeps_encoder_tensors(recipe):
    out = recipe["root"] / "frozen"
    ck = recipe["pre"] / "pretrain.ssmm"
    assert run("finetune", "--config", recipe["cfg"], "--prep", recipe["prep"], "--checkpoint", ck, "--frozen", "--out", out) == 0
    before, after = load_checkpoint(ck), load_checkpoint(out / "finetune.ssmm")
    enc = [k for k in before if k.startswith(("image_encoder.", "tabular_encoder."))]
    assert enc and all(before[k].tobytes() == after[k].tobytes() for k in enc)


def test_evaluate_gradcam_embeddings(recipe):
    ck = recipe["ft"] / "finetune.ssmm"
    base = ("--config", recipe["cfg"], "--prep", recipe["prep"], "--checkpoint", ck)
    ev, gc, em = (recipe["root"] / n for n in ("ev", "gc", "em"))
    assert run("evaluate", *base, "--out", ev) == 0
    assert json.loads((ev / "report.json").read_text()) == json.loads((recipe["ft"] / "report.json").read_text())
    align = json.loads((ev / "alignment.json").read_text())
    assert {"gap", "modality_probe_accuracy"} <= set(align)

    assert run("gradcam", *base, "--out", gc) == 0
    metas = sorted(gc.glob("*.json"))
    metas = [m for m in metas if m.name != "config.json"]
    assert 1 <= len(metas) <= 2
    prefix = metas[0].stem
    img = read_pgm(gc / f"{prefix}_axial_heatmap.pgm")
    assert img.shape == (12, 12)
    assert set(json.loads(metas[0].read_text())["slices"]) == {"axial", "coronal", "sagittal"}

    assert run("export-embeddings", *base, "--out", em) == 0
    ids, modality, values = read_embeddings(em / "embeddings.csv")
    assert len(ids) == 2 * 8 and values.shape[1] == 8
    assert modality.count("image") == modality.count("tabular") == 8
    np.testing.assert_allclose(np.linalg.norm(values, axis=1), 1.0, atol=1e-10)


def test_supervised_without_checkpoint(recipe):
    out = recipe["root"] / "sup"
    assert run("finetune", "--config", recipe["cfg"], "--prep", recipe["prep"], "--mode", "supervised", "--out", out) == 0


def test_error_exit_codes(recipe, tmp_path, capsys):
    # write-once outputs
    assert run("gen-data", "--config", recipe["cfg"], "--out", recipe["gen"]) == 1
    # unknown key and bad type are both reported
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"pretrain": {"epochs": "ten", "bogus": 1}}))
    assert run("gen-data", "--config", bad, "--out", tmp_path / "o1") == 1
    err = capsys.readouterr().err
    assert "pretrain.epochs" in err and "pretrain.bogus" in err
    assert run("gen-data", "--config", tmp_path / "missing.json", "--out", tmp_path / "o2") == 1
    assert run("no-such-command") == 1
    # ssl fine-tuning without a checkpoint
    assert run("finetune", "--config", recipe["cfg"], "--prep", recipe["prep"], "--mode", "clip", "--out", tmp_path / "o3") == 1
    # a pretrain checkpoint has no classifier to evaluate
    ck = recipe["pre"] / "pretrain.ssmm"
    assert run("evaluate", "--config", recipe["cfg"], "--prep", recipe["prep"], "--checkpoint", ck, "--out", tmp_path / "o4") == 1


def test_corrupted_checkpoint_rejected(recipe, tmp_path):
    ck = tmp_path / "pretrain.ssmm"
    raw = bytearray((recipe["pre"] / "pretrain.ssmm").read_bytes())
    raw[100] ^= 0x01
    ck.write_bytes(bytes(raw))
    (tmp_path / "pretrain.json").write_bytes((recipe["pre"] / "pretrain.json").read_bytes())
    args = ("finetune", "--config", recipe["cfg"], "--prep", recipe["prep"], "--checkpoint", ck)
    assert run(*args, "--out", tmp_path / "o") == 1


def test_architecture_mismatch_rejected(recipe, tmp_path):
    other = dict(SMALL, model=dict(SMALL["model"], image_dim=6))
    cfg = tmp_path / "other.json"
    cfg.write_text(json.dumps(other))
    side = json.loads((recipe["pre"] / "pretrain.json").read_text())
    side["model"]["image_dim"] = 6
    ck = tmp_path / "pretrain.ssmm"
    ck.write_bytes((recipe["pre"] / "pretrain.ssmm").read_bytes())
    (tmp_path / "pretrain.json").write_text(json.dumps(side))
    assert run("finetune", "--config", cfg, "--prep", recipe["prep"], "--checkpoint", ck, "--out", tmp_path / "o") == 1


def test_config_validation():
    with pytest.raises(C.ConfigError) as exc:
        C.resolve({"data": {"groups": ["clinical", "genes"]}, "finetune": {"batch_size": 5}})
    text = str(exc.value)
    assert "data.groups" in text and "finetune.batch_size" in text
    with pytest.raises(C.ConfigError):
        C.resolve({"pretrain": {"warmup": 10, "epochs": 10}})
    with pytest.raises(C.ConfigError):
        C.resolve({"model": {"d_model": 10, "n_heads": 4}})
    for name in ("desk", "full"):
        C.load(name)


@pytest.mark.slow
def test_desk_recipe_end_to_end(tmp_path):
    """Default desk config: gen-data -> preprocess -> pretrain -> finetune -> evaluate."""
    d = {k: tmp_path / k for k in ("gen", "prep", "pre", "ft", "ev")}
    assert run("gen-data", "--out", d["gen"]) == 0
    assert run("preprocess", "--data", d["gen"] / "cohort", "--out", d["prep"]) == 0
    assert run("pretrain", "--prep", d["prep"], "--mode", "clip-itm", "--out", d["pre"]) == 0
    assert run("finetune", "--prep", d["prep"], "--checkpoint", d["pre"] / "pretrain.ssmm", "--trainable", "--out", d["ft"]) == 0
    assert run("evaluate", "--prep", d["prep"], "--checkpoint", d["ft"] / "finetune.ssmm", "--out", d["ev"]) == 0
    auc = json.loads((d["ev"] / "report.json").read_text())["auc"]
    print(f"desk recipe test AUC {auc:.4f}")
    assert auc >= 0.85
