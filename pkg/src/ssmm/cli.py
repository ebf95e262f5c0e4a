"""Command-line entry point: ``ssmm <subcommand> --config C --seed S --out DIR``.

Exit status: 0 success, 1 invalid input or configuration, 2 runtime failure.
"""
import argparse
import csv
import json
import logging
import os
import sys

import numpy as np

from . import config as C
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .data import generate_synthetic, read_cohort, write_cohort
from .data.preprocessing import TabularPreprocessor
from .explain import embed, export_embeddings, export_heatmap, gradcam
from .metrics import alignment_report, evaluate
from .models import MultimodalModel
from .nn import ConfigurationError
from .train import (
    SPLITS,
    ArchitectureMismatch,
    PreparedData,
    RunConfig,
    finetune,
    predict_logits,
    prepare_cohort,
    pretrain,
    write_history,
)

log = logging.getLogger("ssmm")


class UsageError(ValueError):
    pass


# -- plumbing -----------------------------------------------------------------
def _open_out(out):
    if os.path.isdir(out) and os.listdir(out):
        raise UsageError(f"--out {out!r} already has content; outputs are write-once")
    os.makedirs(out, exist_ok=True)


def _setup_log(out):
    for h in list(log.handlers):
        log.removeHandler(h)
        h.close()
    handler = logging.FileHandler(os.path.join(out, "run.log"))
    handler.setFormatter(logging.Formatter("%(asctime)s %(levelname)s %(message)s", "%Y-%m-%dT%H:%M:%S%z"))
    log.addHandler(handler)
    log.setLevel(logging.INFO)
    log.propagate = False


def _write_json(path, obj):
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _read_json(path):
    with open(path) as fh:
        return json.load(fh)


def _require(path, what):
    if not path or not os.path.exists(path):
        raise UsageError(f"{what} not found: {path!r}")
    return path


def _sidecar(ckpt):
    return os.path.splitext(ckpt)[0] + ".json"


def load_prepared(prep_dir):
    meta = _read_json(os.path.join(_require(prep_dir, "--prep directory"), "prep.json"))
    cohort = read_cohort(_require(meta["data_dir"], "cohort directory"))
    pos = {sid: i for i, sid in enumerate(cohort.subject_ids)}
    parts = {name: [] for name in SPLITS}
    with open(os.path.join(prep_dir, "splits.csv"), newline="") as fh:
        for row in csv.DictReader(fh):
            parts[row["split"]].append(pos[row["subject_id"]])
    splits = {k: np.array(sorted(v), dtype=int) for k, v in parts.items()}
    pre = TabularPreprocessor.from_dict(meta["preprocessor"])
    X = pre.transform(cohort.tabular)
    pre.train_matrix_ = X[splits["pretrain_train"]]
    data = PreparedData(
        subject_ids=np.asarray(cohort.subject_ids, dtype=object),
        volumes=cohort.volumes,
        tabular=X,
        labels=cohort.labels,
        splits=splits,
        marginals=pre.train_matrix_,
        blocks=pre.blocks(),
        preprocessor=pre,
    )
    return data, cohort


def load_model(ckpt):
    meta = _read_json(_require(_sidecar(_require(ckpt, "checkpoint")), "checkpoint sidecar"))
    model_doc = dict(meta["model"])
    tab_in = model_doc.pop("tabular_in")
    shape = model_doc.pop("volume_shape")
    cfg = C.model_cfg({"model": model_doc}, tab_in, shape)
    model = MultimodalModel(cfg, seed=0)
    if meta.get("classifier_sources"):
        model.attach_classifier(tuple(meta["classifier_sources"]))
    try:
        model.load_state_dict(load_checkpoint(ckpt))
    except (KeyError, ValueError) as exc:
        if isinstance(exc, CheckpointError):
            raise
        raise ArchitectureMismatch(f"{ckpt}: tensors do not match the recorded architecture: {exc}") from exc
    return model, meta


def _save_model(model, path, meta):
    save_checkpoint(path, model.state_dict())
    _write_json(_sidecar(path), meta)


def _model_cfg(cfg, data):
    return C.model_cfg(cfg, data.tabular.shape[1], data.volumes.shape[1:])


# -- subcommands --------------------------------------------------------------
def cmd_gen_data(args, cfg):
    cohort = generate_synthetic(C.data_cfg(cfg, args.seed))
    write_cohort(cohort, os.path.join(args.out, "cohort"))
    log.info("generated %d subjects (prevalence %.3f)", len(cohort.labels), float(np.mean(cohort.labels)))


def cmd_preprocess(args, cfg):
    data_dir = os.path.abspath(_require(args.data, "--data cohort directory"))
    groups = tuple(cfg["data"]["groups"])
    cohort = read_cohort(data_dir)
    data = prepare_cohort(cohort, tuple(cfg["data"]["splits"]), groups, seed=args.seed)
    _write_json(
        os.path.join(args.out, "prep.json"),
        {"data_dir": data_dir, "seed": args.seed, "preprocessor": data.preprocessor.to_dict()},
    )
    with open(os.path.join(args.out, "splits.csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["subject_id", "split"])
        for name in SPLITS:
            for i in data.splits[name]:
                w.writerow([data.subject_ids[i], name])
    with open(os.path.join(args.out, "tabular_processed.csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["subject_id"] + list(data.preprocessor.get_feature_names_out()))
        for sid, row in zip(data.subject_ids, data.tabular):
            w.writerow([sid] + [repr(float(v)) for v in row])
    log.info("splits %s", {k: len(v) for k, v in data.splits.items()})


def cmd_pretrain(args, cfg):
    data, _ = load_prepared(args.prep)
    p = dict(cfg["pretrain"])
    if args.mode:
        p["mode"] = args.mode
    run = RunConfig(seed=args.seed, **p)
    mcfg = _model_cfg(cfg, data)
    result = pretrain(run, data, mcfg, log=log.info)
    model = result.model
    model.load_state_dict(result.state)
    _save_model(
        model,
        os.path.join(args.out, "pretrain.ssmm"),
        {"kind": "pretrain", "mode": run.mode, "best_epoch": result.best_epoch, "model": mcfg.to_dict()},
    )
    write_history(os.path.join(args.out, "history.csv"), result.history)


def _finetune_run(args, cfg, mode):
    f = dict(cfg["finetune"])
    frozen = f.pop("frozen")
    if args.frozen is not None:
        frozen = args.frozen
    return RunConfig(
        mode=mode,
        epochs=f.pop("max_epochs"),
        seed=args.seed,
        freeze_image=frozen,
        freeze_tabular=frozen,
        temperature=cfg["pretrain"]["temperature"],
        lam=cfg["pretrain"]["lam"],
        denominator=cfg["pretrain"]["denominator"],
        **f,
    )


def _report(model, data):
    va, te = data.split("finetune_val"), data.split("test")
    return evaluate(
        predict_logits(model, data, te), data.labels[te], predict_logits(model, data, va), data.labels[va]
    )


def cmd_finetune(args, cfg):
    data, _ = load_prepared(args.prep)
    state, mode = None, args.mode
    if args.checkpoint:
        pre_model, meta = load_model(args.checkpoint)
        state = pre_model.state_dict()
        mode = mode or meta["mode"]
        mcfg = pre_model.config
    else:
        mcfg = _model_cfg(cfg, data)
    if mode is None:
        raise UsageError("finetune needs --checkpoint or --mode supervised")
    if state is None and mode != "supervised":
        raise UsageError(f"mode {mode!r} needs a pretrained --checkpoint")
    run = _finetune_run(args, cfg, mode)
    result = finetune(run, data, state, mcfg, log=log.info)
    _save_model(
        result.model,
        os.path.join(args.out, "finetune.ssmm"),
        {
            "kind": "finetune",
            "mode": mode,
            "frozen": run.frozen,
            "classifier_sources": list(result.model.classifier.sources),
            "best_epoch": result.best_epoch,
            "model": mcfg.to_dict(),
        },
    )
    write_history(os.path.join(args.out, "history.csv"), result.history)
    report = _report(result.model, data)
    _write_json(os.path.join(args.out, "report.json"), json.loads(report.to_json()))
    log.info("test auc %.4f", report.auc)
    print(report.to_json(sort_keys=True))


def cmd_evaluate(args, cfg):
    data, _ = load_prepared(args.prep)
    model, meta = load_model(args.checkpoint)
    if model.classifier is None:
        raise UsageError("evaluate needs a fine-tuned checkpoint")
    report = _report(model, data)
    _write_json(os.path.join(args.out, "report.json"), json.loads(report.to_json()))
    idx = data.split(cfg["eval"]["embedding_split"])
    z_img, z_tab = embed(model, data, idx)
    align = alignment_report(z_img, z_tab, list(data.subject_ids[idx]), cfg["eval"]["alignment_folds"])
    _write_json(os.path.join(args.out, "alignment.json"), align)
    log.info("test auc %.4f", report.auc)
    print(report.to_json(sort_keys=True))


def cmd_gradcam(args, cfg):
    data, _ = load_prepared(args.prep)
    model, _ = load_model(args.checkpoint)
    if model.classifier is None:
        raise UsageError("gradcam needs a fine-tuned checkpoint")
    te = data.split("test")
    picks = te[data.labels[te] == 1][: cfg["eval"]["n_heatmaps"]]
    layer = cfg["eval"]["gradcam_layer"]
    rows = data.tabular[picks]
    maps = gradcam(model, data.volumes[picks], rows, layer)
    for i, hm in zip(picks, maps):
        export_heatmap(hm, data.volumes[i], args.out, prefix=str(data.subject_ids[i]))
    log.info("wrote %d heatmaps", len(maps))


def cmd_export_embeddings(args, cfg):
    data, _ = load_prepared(args.prep)
    model, _ = load_model(args.checkpoint)
    export_embeddings(model, data, os.path.join(args.out, "embeddings.csv"), cfg["eval"]["embedding_split"])


def cmd_gradcheck(args, cfg):
    from .gradcheck import TOLERANCE, run_suite

    results = run_suite(seed=args.seed, log=log.info)
    worst = max(r.max_rel_error for r in results)
    with open(os.path.join(args.out, "gradcheck.csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["case", "max_rel_error", "entries"])
        for r in results:
            w.writerow([r.name, repr(r.max_rel_error), r.entries])
    print(f"{len(results)} cases, max relative error {worst:.3e}")
    if worst >= TOLERANCE:
        raise RuntimeError(f"gradient check failed: max relative error {worst:.3e} >= {TOLERANCE}")


COMMANDS = {
    "gen-data": cmd_gen_data,
    "preprocess": cmd_preprocess,
    "pretrain": cmd_pretrain,
    "finetune": cmd_finetune,
    "evaluate": cmd_evaluate,
    "gradcam": cmd_gradcam,
    "export-embeddings": cmd_export_embeddings,
    "gradcheck": cmd_gradcheck,
}


def build_parser():
    parser = argparse.ArgumentParser(prog="ssmm", description="Multimodal self-supervised pretraining toolkit.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", default="desk", help="JSON config path, or bundled 'desk' / 'full'")
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--out", required=True)
        if name == "preprocess":
            p.add_argument("--data", required=True, help="cohort directory written by gen-data")
        if name in ("pretrain", "finetune", "evaluate", "gradcam", "export-embeddings"):
            p.add_argument("--prep", required=True, help="directory written by preprocess")
        if name in ("finetune", "evaluate", "gradcam", "export-embeddings"):
            p.add_argument("--checkpoint", required=name != "finetune")
        if name == "pretrain":
            p.add_argument("--mode", choices=("clip-itm", "clip", "simclr", "scarf"))
        if name == "finetune":
            p.add_argument("--mode", choices=("clip-itm", "clip", "simclr", "scarf", "supervised"))
            g = p.add_mutually_exclusive_group()
            g.add_argument("--frozen", dest="frozen", action="store_true", default=None)
            g.add_argument("--trainable", dest="frozen", action="store_false")
    return parser


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 0 if exc.code == 0 else 1
    try:
        cfg = C.load(args.config)
        _open_out(args.out)
    except (C.ConfigError, UsageError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    _setup_log(args.out)
    with open(os.path.join(args.out, "config.json"), "w") as fh:
        fh.write(C.dumps(cfg))
    log.info("ssmm %s seed=%d config=%s", args.command, args.seed, args.config)
    try:
        COMMANDS[args.command](args, cfg)
    except (C.ConfigError, UsageError, ConfigurationError, ArchitectureMismatch, CheckpointError) as exc:
        log.error("%s", exc)
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001 - report any runtime failure as exit 2
        log.exception("runtime failure")
        print(f"runtime failure: {exc}", file=sys.stderr)
        return 2
    log.info("done")
    return 0


if __name__ == "__main__":
    sys.exit(main())
