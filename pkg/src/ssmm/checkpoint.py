"""Named-tensor archive.

Layout (little-endian)::

    b"SSMM"  u32 version  u32 count
    count x { u32 name_len, name (UTF-8), u8 dtype (0=f32, 1=f64),
              u32 rank, rank x u64 dims, raw data }
    u32 CRC32 of every preceding byte
"""
import struct
import zlib
from collections import OrderedDict

import numpy as np

MAGIC = b"SSMM"
VERSION = 1
DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
TAGS = {"f32": 0, "f64": 1}


class CheckpointError(ValueError):
    pass


def dumps(tensors, dtype="f64"):
    if dtype not in TAGS:
        raise CheckpointError(f"unsupported dtype {dtype!r}")
    tag = TAGS[dtype]
    parts = [MAGIC, struct.pack("<II", VERSION, len(tensors))]
    for name, arr in tensors.items():
        arr = np.array(arr, dtype=DTYPES[tag], order="C")  # keeps 0-d shapes
        raw = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<BI", tag, arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(arr.tobytes())
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF)


def loads(buf):
    if len(buf) < 16 or buf[:4] != MAGIC:
        raise CheckpointError("not an SSMM checkpoint (bad magic)")
    body, (crc,) = buf[:-4], struct.unpack("<I", buf[-4:])
    if zlib.crc32(body) & 0xFFFFFFFF != crc:
        raise CheckpointError("checkpoint CRC mismatch (file corrupted)")
    version, count = struct.unpack_from("<II", body, 4)
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version} (reader supports {VERSION})")
    pos = 12
    out = OrderedDict()
    for _ in range(count):
        (n,) = struct.unpack_from("<I", body, pos)
        pos += 4
        name = body[pos : pos + n].decode("utf-8")
        pos += n
        tag, rank = struct.unpack_from("<BI", body, pos)
        pos += 5
        if tag not in DTYPES:
            raise CheckpointError(f"unknown dtype tag {tag} for {name!r} in format version {version}")
        shape = struct.unpack_from(f"<{rank}Q", body, pos)
        pos += 8 * rank
        dt = DTYPES[tag]
        size = int(np.prod(shape)) * dt.itemsize
        out[name] = np.frombuffer(body, dtype=dt, count=int(np.prod(shape)), offset=pos).reshape(shape).copy()
        pos += size
    if pos != len(body):
        raise CheckpointError("trailing bytes after last tensor")
    return out


def save_checkpoint(path, tensors, dtype="f64"):
    data = dumps(tensors, dtype)
    with open(path, "wb") as fh:
        fh.write(data)
    return data


def load_checkpoint(path):
    with open(path, "rb") as fh:
        return loads(fh.read())
