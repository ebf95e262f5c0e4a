"""On-disk cohort layout.

``tabular.csv``  header = schema names, empty cell = missing
``labels.csv``   subject_id,label (row order matches tabular.csv)
``volumes.vol``  "VOL1" then per volume: u32 id length, id bytes,
                 3 x u32 dims, f32 voxels (little-endian, row-major D,H,W)
``schema.json``  feature declarations
``geometry.csv`` planted blob geometry and latents (ground truth)
"""
import json
import os
import struct

import numpy as np
import pandas as pd

from .schema import TabularSchema
from .synthetic import Cohort

VOL_MAGIC = b"VOL1"


class FormatError(ValueError):
    pass


def write_volumes(path, subject_ids, volumes):
    with open(path, "wb") as fh:
        fh.write(VOL_MAGIC)
        for sid, vol in zip(subject_ids, volumes):
            raw = sid.encode("utf-8")
            vol = np.asarray(vol)
            if vol.ndim != 3:
                raise FormatError(f"{sid}: volume must be 3-D, got {vol.shape}")
            fh.write(struct.pack("<I", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<3I", *vol.shape))
            fh.write(np.ascontiguousarray(vol, dtype="<f4").tobytes())


def read_volumes(path):
    with open(path, "rb") as fh:
        buf = fh.read()
    if buf[:4] != VOL_MAGIC:
        raise FormatError(f"{path}: bad magic {buf[:4]!r}")
    pos = 4
    ids, vols = [], []
    while pos < len(buf):
        if pos + 4 > len(buf):
            raise FormatError(f"{path}: truncated record header at byte {pos}")
        (n,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        sid = buf[pos : pos + n].decode("utf-8")
        pos += n
        dims = struct.unpack_from("<3I", buf, pos)
        pos += 12
        count = int(np.prod(dims))
        end = pos + 4 * count
        if end > len(buf):
            raise FormatError(f"{path}: truncated voxels for {sid}")
        vols.append(np.frombuffer(buf, dtype="<f4", count=count, offset=pos).reshape(dims))
        ids.append(sid)
        pos = end
    return ids, (np.stack(vols).astype(np.float32) if vols else np.zeros((0, 0, 0, 0), np.float32))


def write_cohort(cohort, out_dir):
    os.makedirs(out_dir, exist_ok=True)
    cohort.tabular.to_csv(os.path.join(out_dir, "tabular.csv"), index=False, na_rep="", float_format="%.17g")
    pd.DataFrame({"subject_id": cohort.subject_ids, "label": cohort.labels}).to_csv(
        os.path.join(out_dir, "labels.csv"), index=False
    )
    write_volumes(os.path.join(out_dir, "volumes.vol"), cohort.subject_ids, cohort.volumes)
    with open(os.path.join(out_dir, "schema.json"), "w") as fh:
        json.dump(cohort.schema.to_dict(), fh, indent=2)
    if cohort.blob_centers is not None:
        geo = {"subject_id": cohort.subject_ids}
        for a in range(3):
            geo[f"center{a}"] = cohort.blob_centers[:, a]
        for a in range(3):
            geo[f"radius{a}"] = cohort.blob_radii[:, a]
        if cohort.latents is not None:
            for k in range(cohort.latents.shape[1]):
                geo[f"latent{k}"] = cohort.latents[:, k]
        pd.DataFrame(geo).to_csv(os.path.join(out_dir, "geometry.csv"), index=False, float_format="%.17g")


def read_cohort(in_dir):
    with open(os.path.join(in_dir, "schema.json")) as fh:
        schema = TabularSchema.from_dict(json.load(fh))
    dtypes = {f.name: (float if f.kind == "continuous" else object) for f in schema.features}
    tab = pd.read_csv(os.path.join(in_dir, "tabular.csv"), dtype=dtypes, keep_default_na=False, na_values=[""], float_precision="round_trip")
    if list(tab.columns) != schema.names:
        raise FormatError(f"tabular.csv header {list(tab.columns)} does not match schema {schema.names}")
    labels = pd.read_csv(os.path.join(in_dir, "labels.csv"), dtype={"subject_id": str})
    ids, vols = read_volumes(os.path.join(in_dir, "volumes.vol"))
    if ids != labels["subject_id"].tolist():
        raise FormatError("volume ids do not match labels.csv order")
    centers = radii = latents = None
    geo_path = os.path.join(in_dir, "geometry.csv")
    if os.path.exists(geo_path):
        geo = pd.read_csv(geo_path, dtype={"subject_id": str}, float_precision="round_trip")
        centers = geo[[f"center{a}" for a in range(3)]].to_numpy()
        radii = geo[[f"radius{a}" for a in range(3)]].to_numpy()
        lat_cols = [c for c in geo.columns if c.startswith("latent")]
        latents = geo[lat_cols].to_numpy() if lat_cols else None
    return Cohort(ids, vols, tab, labels["label"].to_numpy(dtype=int), schema, latents, centers, radii)
