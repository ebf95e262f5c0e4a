"""GradCAM heatmaps for the image path, slice selection, and file exports."""
import csv
import json
import os
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .ops3d import trilinear_resize
from .tensor import Tensor

PLANES = {"axial": 0, "coronal": 1, "sagittal": 2}


@dataclass
class HeatmapVolume:
    values: np.ndarray  # [D, H, W] in [0, 1]
    layer: str
    predicted_class: int
    logit: float


def cam_from_gradients(activation, gradient, out_shape):
    """Channel-weighted, rectified, min-max normalized, upsampled map.

    ``activation`` and ``gradient`` are [C, d, h, w] for one sample.
    """
    a = np.asarray(activation, dtype=float)
    g = np.asarray(gradient, dtype=float)
    if a.ndim != 4 or a.shape != g.shape:
        raise T.DimensionError(f"expected matching [C,d,h,w] activation/gradient, got {a.shape} and {g.shape}")
    weights = g.mean(axis=(1, 2, 3))
    cam = np.maximum(np.tensordot(weights, a, axes=1), 0.0)
    lo, hi = cam.min(), cam.max()
    # a flat map carries no localisation; report zeros rather than 0.5
    cam = (cam - lo) / (hi - lo) if hi > lo else np.zeros_like(cam)
    return np.clip(trilinear_resize(cam, out_shape), 0.0, 1.0)


def default_layer(model):
    return f"stage{len(model.image_encoder.stages) - 1}"


def gradcam(model, volumes, rows=None, layer=None):
    """GradCAM w.r.t. the positive-class logit of the attached classifier.

    ``volumes`` is [D,H,W] (returns one :class:`HeatmapVolume`) or
    [N,D,H,W] (returns a list). ``rows`` are the matching preprocessed
    tabular rows when the classifier also reads tabular features.
    """
    if model.classifier is None:
        raise RuntimeError("gradcam needs a model with an attached classifier")
    if "image" not in model.classifier.sources and "cls" not in model.classifier.sources:
        raise ValueError("classifier has no image path to explain")
    layer = layer or default_layer(model)
    vols = np.asarray(volumes, dtype=np.float64)
    single = vols.ndim == 3
    vols = vols[None] if single else vols
    n = vols.shape[0]
    x = Tensor(vols[:, None], requires_grad=True)
    r = None if rows is None else Tensor(np.atleast_2d(np.asarray(rows, dtype=float)))
    model.eval()
    logits = model.classify(x, r, keep_activations=True)
    acts = model.image_encoder.activations
    if layer not in acts:
        raise ValueError(f"layer {layer!r} has no spatial activations; choose from {sorted(acts)}")
    act = acts[layer]
    if act.ndim != 5:
        raise ValueError(f"layer {layer!r} output {act.shape} is not spatial")
    # samples are independent, so one backward of the summed logits
    # yields every sample's own gradient
    T.tsum(logits).backward()
    grad = act.grad if act.grad is not None else np.zeros(act.shape)
    out = []
    for i in range(n):
        values = cam_from_gradients(act.data[i], grad[i], vols.shape[1:])
        z = float(logits.data[i, 0])
        out.append(HeatmapVolume(values, layer, int(z >= 0.0), z))
    model.zero_grad()
    return out[0] if single else out


def most_informative_slice(heatmap, plane):
    """Index of the slice with the largest summed activation (ties -> lowest)."""
    values = heatmap.values if isinstance(heatmap, HeatmapVolume) else np.asarray(heatmap)
    if plane not in PLANES:
        raise ValueError(f"unknown plane {plane!r}; expected one of {sorted(PLANES)}")
    axis = PLANES[plane]
    sums = values.sum(axis=tuple(a for a in range(3) if a != axis))
    return int(np.argmax(sums))


def take_slice(volume, plane, index):
    return np.take(np.asarray(volume), index, axis=PLANES[plane])


def quantize(values):
    return np.round(np.clip(values, 0.0, 1.0) * 255.0).astype(np.uint8)


def write_pgm(path, image):
    img = np.asarray(image)
    if img.dtype != np.uint8 or img.ndim != 2:
        raise ValueError("PGM export expects a 2-D uint8 image")
    with open(path, "wb") as fh:
        fh.write(f"P5\n{img.shape[1]} {img.shape[0]}\n255\n".encode("ascii"))
        fh.write(img.tobytes())


def read_pgm(path):
    with open(path, "rb") as fh:
        buf = fh.read()
    fields, pos = [], 0
    while len(fields) < 4:
        while buf[pos : pos + 1].isspace():
            pos += 1
        start = pos
        while not buf[pos : pos + 1].isspace():
            pos += 1
        fields.append(buf[start:pos])
    if fields[0] != b"P5" or int(fields[3]) != 255:
        raise ValueError(f"{path}: not an 8-bit binary PGM")
    w, h = int(fields[1]), int(fields[2])
    return np.frombuffer(buf, dtype=np.uint8, count=w * h, offset=pos + 1).reshape(h, w)


def _unit(volume):
    v = np.asarray(volume, dtype=float)
    lo, hi = v.min(), v.max()
    return (v - lo) / (hi - lo) if hi > lo else np.zeros_like(v)


def export_heatmap(heatmap, volume, out_dir, prefix="heatmap"):
    """Write the most informative slice of every plane as PGM pairs
    (underlay, heatmap) plus a JSON sidecar; returns the sidecar dict."""
    os.makedirs(out_dir, exist_ok=True)
    under = _unit(volume)
    meta = {"layer": heatmap.layer, "logit": heatmap.logit, "predicted_class": heatmap.predicted_class, "slices": {}}
    for plane in PLANES:
        idx = most_informative_slice(heatmap, plane)
        meta["slices"][plane] = idx
        write_pgm(os.path.join(out_dir, f"{prefix}_{plane}_underlay.pgm"), quantize(take_slice(under, plane, idx)))
        write_pgm(os.path.join(out_dir, f"{prefix}_{plane}_heatmap.pgm"), quantize(take_slice(heatmap.values, plane, idx)))
    with open(os.path.join(out_dir, f"{prefix}.json"), "w") as fh:
        json.dump(meta, fh, indent=2)
    return meta


def embed(model, data, idx, batch_size=64):
    """Projected (unit-norm) image and tabular embeddings for ``idx``."""
    model.eval()
    zi, zt = [], []
    idx = np.asarray(idx)
    with T.no_grad():
        for s in range(0, len(idx), batch_size):
            b = idx[s : s + batch_size]
            vols = Tensor(np.asarray(data.volumes[b], dtype=np.float64)[:, None])
            zi.append(model.project_image(model.encode_image(vols)).data)
            zt.append(model.project_tabular(model.encode_tabular(Tensor(data.tabular[b]))).data)
    return np.concatenate(zi), np.concatenate(zt)


def export_embeddings(model, data, out_path, split="pretrain_val", batch_size=64):
    """CSV of validation-split projections, one row per subject and modality."""
    idx = data.split(split)
    z_img, z_tab = embed(model, data, idx, batch_size)
    ids = data.subject_ids[idx]
    dim = z_img.shape[1]
    with open(out_path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["subject_id", "modality"] + [f"e{k}" for k in range(dim)])
        for tag, z in (("image", z_img), ("tabular", z_tab)):
            for sid, row in zip(ids, z):
                w.writerow([sid, tag] + [repr(float(v)) for v in row])
    return ids, z_img, z_tab


def read_embeddings(path):
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    header, body = rows[0], rows[1:]
    ids = [r[0] for r in body]
    modality = [r[1] for r in body]
    values = np.array([[float(v) for v in r[2:]] for r in body]) if body else np.zeros((0, len(header) - 2))
    return ids, modality, values
