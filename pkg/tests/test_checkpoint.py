import struct

import numpy as np
import pytest
from helpers import tiny_task
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from mtnet.checkpoint import (BadMagicError, CorruptError, TruncatedError, VersionError, crc64, decode, encode,
                              load_checkpoint, restore_model, restore_rng, save_checkpoint)
from mtnet.training import OptimizerState, train_loop


def test_crc64_check_value():
    # standard check value of CRC-64/XZ
    assert crc64(b"123456789") == 0x995DC9BBDF1939FA
    assert crc64(b"") == 0


@given(hnp.arrays(np.float64, hnp.array_shapes(min_dims=2, max_dims=2, max_side=5),
                  elements=st.floats(allow_nan=True, allow_infinity=True)))
def test_encode_decode_bitwise(arr):
    ck = decode(encode({"k": [1, 2]}, {"a": arr, "b.c": np.zeros((1, 3))}))
    assert ck.meta == {"k": [1, 2]}
    assert ck.tensors["a"].tobytes() == np.ascontiguousarray(arr).tobytes()
    assert ck.tensors["b.c"].shape == (1, 3)


def test_header_layout():
    data = encode({}, {"w": np.array([[1.5]])})
    assert data[:4] == b"MTNC"
    assert struct.unpack("<I", data[4:8]) == (1,)
    (blob_len,) = struct.unpack("<Q", data[8:16])
    assert data[16:16 + blob_len] == b"{}"
    assert struct.unpack("<d", data[-16:-8]) == (1.5,)


def test_model_round_trip(tmp_path):
    _, model, _ = tiny_task()
    save_checkpoint(model, tmp_path / "m.ckpt", vocab_tokens=["t0"])
    ck = load_checkpoint(tmp_path / "m.ckpt")
    back = restore_model(ck)
    assert back.config == model.config
    assert ck.meta["vocab"] == ["t0"]
    for (n1, a), (n2, b) in zip(model.named_parameters(), back.named_parameters()):
        assert n1 == n2 and a.data.tobytes() == b.data.tobytes()


def test_error_kinds(tmp_path):
    good = encode({"x": 1}, {"w": np.ones((2, 2))})
    with pytest.raises(TruncatedError, match="values of tensor 'w'"):
        decode(good[:40 + 8])
    for cut in (2, 10, len(good) - 3):
        with pytest.raises(TruncatedError):
            decode(good[:cut])
    with pytest.raises(BadMagicError):
        decode(b"XXXX" + good[4:])
    bumped = good[:4] + struct.pack("<I", 2) + good[8:]
    with pytest.raises(VersionError) as info:
        decode(bumped)
    assert info.value.expected == 1 and info.value.found == 2
    assert "1" in str(info.value) and "2" in str(info.value)
    flipped = bytearray(good)
    flipped[-12] ^= 0x01
    with pytest.raises(CorruptError, match="checksum"):
        decode(bytes(flipped))
    with pytest.raises(CorruptError):
        decode(good + b"\0")
    with pytest.raises(FileNotFoundError):
        load_checkpoint(tmp_path / "missing.ckpt")


def test_restore_rejects_wrong_shapes():
    _, model, _ = tiny_task()
    tensors = {n: t.data for n, t in model.named_parameters()}
    name = next(iter(tensors))
    tensors[name] = np.zeros((1, 1))
    ck = decode(encode({"config": model.config.to_dict()}, tensors))
    with pytest.raises(CorruptError, match=name):
        restore_model(ck)


def test_resume_reproduces_training(tmp_path):
    # reference: two uninterrupted epochs
    config, model, batches = tiny_task()
    full = train_loop(model, batches, epochs=2)
    final = {n: p.data.copy() for n, p in model.named_parameters()}

    # one epoch, checkpoint, restore, one more epoch
    config, model, batches = tiny_task()
    first = train_loop(model, batches, epochs=1)
    save_checkpoint(model, tmp_path / "last.ckpt", optimizer=first.optimizer, rng=first.rng)
    ck = load_checkpoint(tmp_path / "last.ckpt")
    resumed = restore_model(ck)
    second = train_loop(resumed, batches, epochs=1, optimizer=OptimizerState.from_checkpoint(ck),
                        rng=restore_rng(ck))
    assert first.losses + second.losses == full.losses
    for n, p in resumed.named_parameters():
        assert p.data.tobytes() == final[n].tobytes()
