import struct
import zlib
from collections import OrderedDict

import numpy as np
import pytest

from ssmm.checkpoint import CheckpointError, dumps, load_checkpoint, loads, save_checkpoint


@pytest.fixture
def tensors():
    rng = np.random.default_rng(0)
    return OrderedDict([("a.weight", rng.normal(size=(3, 4))), ("b", np.array(2.5)), ("c", rng.normal(size=(2, 1, 3)))])


def reseal(body):
    return body + struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF)


def test_round_trip_bit_exact(tmp_path, tensors):
    p = tmp_path / "m.ssmm"
    raw = save_checkpoint(p, tensors)
    back = load_checkpoint(p)
    assert list(back) == list(tensors)
    for k in tensors:
        assert back[k].shape == tensors[k].shape
        assert back[k].tobytes() == tensors[k].tobytes()
    assert dumps(back) == raw


def test_float32_storage(tensors):
    back = loads(dumps(tensors, "f32"))
    assert back["a.weight"].dtype == np.float32
    np.testing.assert_array_equal(back["a.weight"], tensors["a.weight"].astype(np.float32))


def test_corrupted_byte_fails_crc(tensors):
    buf = bytearray(dumps(tensors))
    buf[40] ^= 0xFF
    with pytest.raises(CheckpointError, match="CRC"):
        loads(bytes(buf))


def test_bad_magic_and_version(tensors):
    buf = dumps(tensors)
    with pytest.raises(CheckpointError, match="magic"):
        loads(b"XXXX" + buf[4:])
    body = bytearray(buf[:-4])
    body[4:8] = struct.pack("<I", 9)
    with pytest.raises(CheckpointError, match="version 9"):
        loads(reseal(bytes(body)))


def test_unknown_dtype_tag_is_versioned_error():
    body = bytearray(dumps({"w": np.zeros(2)})[:-4])
    body[12 + 4 + 1] = 7  # tag byte after the one-char name
    with pytest.raises(CheckpointError, match=r"unknown dtype tag 7 .* version 1"):
        loads(reseal(bytes(body)))


def test_trailing_bytes():
    body = dumps({"w": np.zeros(2)})[:-4] + b"\0"
    with pytest.raises(CheckpointError, match="trailing"):
        loads(reseal(body))
