"""Strict JSON run configuration with sections data / model / pretrain /
finetune / eval. Unknown keys and ill-typed values are collected and
reported together."""
import json
import os
from dataclasses import fields
from importlib import resources

from .data.schema import GROUPS
from .data.synthetic import SyntheticConfig
from .models import ModelConfig


class ConfigError(ValueError):
    def __init__(self, problems):
        self.problems = list(problems)
        super().__init__("invalid configuration:\n  " + "\n  ".join(self.problems))


def _dataclass_defaults(cls, skip=()):
    return {f.name: f.default for f in fields(cls) if f.name not in skip}


DEFAULTS = {
    "data": {
        **_dataclass_defaults(SyntheticConfig, skip=("seed",)),
        "splits": [1800, 200, 300, 100, 200],
        "groups": ["clinical", "brain_idp"],
    },
    # input sizes come from the data: tabular width after preprocessing and
    # data.volume_shape
    "model": _dataclass_defaults(ModelConfig, skip=("tabular_in", "volume_shape")),
    "pretrain": {
        "mode": "clip-itm",
        "epochs": 100,
        "warmup": 10,
        "batch_size": 6,
        "lr": 1e-3,
        "weight_decay": 0.0,
        "temperature": 0.1,
        "lam": 0.5,
        "denominator": "standard",
        "image_rate": 0.95,
        "corruption_rate": 0.3,
    },
    "finetune": {
        "max_epochs": 50,
        "patience": 15,
        "min_delta": 1e-4,
        "batch_size": 6,
        "lr": 1e-3,
        "weight_decay": 0.0,
        "image_rate": 0.80,
        "corruption_rate": 0.3,
        "frozen": False,
        "include_other_modality": False,
    },
    "eval": {
        "gradcam_layer": None,
        "n_heatmaps": 4,
        "embedding_split": "pretrain_val",
        "alignment_folds": 5,
    },
}

CHOICES = {
    ("pretrain", "mode"): ("clip-itm", "clip", "simclr", "scarf"),
    ("pretrain", "denominator"): ("standard", "literal"),
    ("eval", "embedding_split"): ("pretrain_train", "pretrain_val", "finetune_train", "finetune_val", "test"),
}


def _to_tuples(v):
    return tuple(_to_tuples(x) for x in v) if isinstance(v, list) else v


def _check_value(path, default, value):
    if default is None:
        return []
    if isinstance(default, bool):
        ok = isinstance(value, bool)
        kind = "a boolean"
    elif isinstance(default, int):
        ok = isinstance(value, int) and not isinstance(value, bool)
        kind = "an integer"
    elif isinstance(default, float):
        ok = isinstance(value, (int, float)) and not isinstance(value, bool)
        kind = "a number"
    elif isinstance(default, str):
        ok = isinstance(value, str)
        kind = "a string"
    elif isinstance(default, (tuple, list)):
        ok, kind = isinstance(value, list), "a list"
        if ok and default and isinstance(default[0], str):
            ok, kind = all(isinstance(x, str) for x in value), "a list of strings"
        elif ok and default:
            ok = all(isinstance(x, (int, float)) and not isinstance(x, bool) for x in value)
            kind = "a list of numbers"
    else:
        ok, kind = True, ""
    return [] if ok else [f"{'.'.join(path)}: expected {kind}, got {value!r}"]


def resolve(doc):
    """Merge a user document over the defaults; raise :class:`ConfigError`
    listing every problem found."""
    problems = []
    if not isinstance(doc, dict):
        raise ConfigError([f"top level must be a JSON object, got {type(doc).__name__}"])
    out = json.loads(json.dumps(DEFAULTS))
    for section, body in doc.items():
        if section not in DEFAULTS:
            problems.append(f"{section}: unknown section (expected one of {sorted(DEFAULTS)})")
            continue
        if not isinstance(body, dict):
            problems.append(f"{section}: must be an object")
            continue
        for key, value in body.items():
            if key not in DEFAULTS[section]:
                problems.append(f"{section}.{key}: unknown key")
                continue
            errs = _check_value((section, key), DEFAULTS[section][key], value)
            choices = CHOICES.get((section, key))
            if not errs and choices and value not in choices:
                errs = [f"{section}.{key}: must be one of {list(choices)}, got {value!r}"]
            problems += errs
            if not errs:
                out[section][key] = value
    if not problems:
        problems += _semantic_checks(out)
    if problems:
        raise ConfigError(problems)
    return out


def _semantic_checks(cfg):
    problems = []
    try:
        data_cfg(cfg, seed=0)
    except (ValueError, TypeError) as exc:
        problems.append(f"data: {exc}")
    try:
        model_cfg(cfg, tabular_in=1)
    except (ValueError, TypeError) as exc:
        problems.append(f"model: {exc}")
    p = cfg["pretrain"]
    if not 0 < p["warmup"] < p["epochs"]:
        problems.append(f"pretrain.warmup: need 0 < warmup < epochs, got {p['warmup']} / {p['epochs']}")
    for section in ("pretrain", "finetune"):
        if cfg[section]["batch_size"] < 2:
            problems.append(f"{section}.batch_size: must be at least 2")
    if cfg["finetune"]["batch_size"] % 2:
        problems.append("finetune.batch_size: balanced batches need an even size")
    if len(cfg["data"]["splits"]) != 5 or any(s < 0 for s in cfg["data"]["splits"]):
        problems.append("data.splits: need five non-negative sizes (pretrain train/val, finetune train/val, test)")
    groups = cfg["data"]["groups"]
    unknown = sorted(set(groups) - set(GROUPS))
    if unknown or not groups:
        problems.append(f"data.groups: need a non-empty subset of {list(GROUPS)}, got {groups}")
    return problems


def data_cfg(cfg, seed):
    d = {k: _to_tuples(v) for k, v in cfg["data"].items() if k not in ("splits", "groups")}
    return SyntheticConfig(seed=seed, **d)


def model_cfg(cfg, tabular_in, volume_shape=None):
    shape = volume_shape if volume_shape is not None else cfg["data"]["volume_shape"]
    return ModelConfig(
        tabular_in=tabular_in, volume_shape=tuple(shape), **{k: _to_tuples(v) for k, v in cfg["model"].items()}
    )


BUNDLED = ("desk", "full")


def load(path_or_name):
    """Read a config file, or a bundled one by name (``desk``, ``full``)."""
    if path_or_name in BUNDLED and not os.path.exists(path_or_name):
        text = resources.files("ssmm").joinpath("configs", f"{path_or_name}.json").read_text()
        source = f"bundled:{path_or_name}"
    else:
        try:
            with open(path_or_name) as fh:
                text = fh.read()
        except OSError as exc:
            raise ConfigError([f"cannot read config {path_or_name!r}: {exc.strerror}"]) from None
        source = path_or_name
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError([f"{source}: invalid JSON ({exc.msg} at line {exc.lineno})"]) from None
    return resolve(doc)


def dumps(cfg):
    return json.dumps(cfg, indent=2, sort_keys=True) + "\n"
