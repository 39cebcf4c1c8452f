import struct

import numpy as np
import pytest

from conftest import random_adapted, tiny_config
from r3mem import checkpoint as ck


@pytest.fixture
def params():
    return random_adapted(tiny_config(), seed=8, up_std=0.1)


def test_roundtrip(params, tmp_path):
    path = tmp_path / "m.ckpt"
    ck.save(path, params, {"seed": "3"})
    back, meta = ck.load(path)
    assert back.cfg == params.cfg
    assert meta == {"seed": "3"}
    assert sorted(back.tensors) == sorted(params.tensors)
    for k, t in params.tensors.items():
        assert np.array_equal(back[k].data, t.data)
    assert back.base_hash() == params.base_hash()


def test_frozen_flags_restored(params):
    back, _ = ck.loads(ck.dumps(params))
    assert all(not back[k].requires_grad for k in back.base_names())
    assert all(back[k].requires_grad for k in back.trainable_names())


def test_bytes_deterministic(params):
    assert ck.dumps(params) == ck.dumps(params.copy())


def test_header_layout(params):
    blob = ck.dumps(params)
    assert blob[:4] == b"R3M1"
    version, clen = struct.unpack_from("<II", blob, 4)
    assert version == 1
    text = blob[12 : 12 + clen].decode()
    assert "d_model=16\n" in text
    (nlen,) = struct.unpack_from("<I", blob, 12 + clen)
    first = blob[16 + clen : 16 + clen + nlen].decode()
    assert first == sorted(params.tensors)[0]


def test_64bit_model_stored_as_f32():
    p = random_adapted(tiny_config(precision=64), seed=1)
    back, _ = ck.loads(ck.dumps(p))
    assert back.cfg.precision == 64
    assert back["mem.theta"].dtype == np.float64
    np.testing.assert_array_equal(back["mem.theta"].data, p["mem.theta"].data.astype(np.float32))


def test_bad_magic(params):
    with pytest.raises(ck.CheckpointFormatError):
        ck.loads(b"XXXX" + ck.dumps(params)[4:])


def test_bad_version(params):
    blob = bytearray(ck.dumps(params))
    blob[4:8] = struct.pack("<I", 9)
    with pytest.raises(ck.CheckpointFormatError):
        ck.loads(bytes(blob))


def test_truncated(params):
    with pytest.raises(ck.CheckpointFormatError):
        ck.loads(ck.dumps(params)[:-10])
