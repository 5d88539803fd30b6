from __future__ import annotations

import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from phasezoo.checkpoint import (CheckpointCorruptError, CheckpointFormatError, load_checkpoint, quantize,
                                 save_checkpoint, to_bytes)
from phasezoo.nn import ModelSpec, build_model


def _model():
    return build_model(ModelSpec(2, 5, 2, 3, seed=11))


def test_header_layout(tmp_path):
    params = _model()
    blob = to_bytes(params)
    magic, version, count = struct.unpack_from("<4sIQ", blob)
    assert (magic, version, count) == (b"PZOO", 1, len(params))
    assert len(blob) == 16 + 4 * len(params)


def test_roundtrip_equals_float32_quantization(tmp_path):
    params = _model()
    save_checkpoint(tmp_path / "c", params)
    back = load_checkpoint(tmp_path / "c")
    assert back.layout == params.layout
    assert np.array_equal(back.values, quantize(params).values)


def test_reload_is_a_fixed_point(tmp_path):
    save_checkpoint(tmp_path / "a", _model())
    once = load_checkpoint(tmp_path / "a")
    save_checkpoint(tmp_path / "b", once)
    assert (tmp_path / "a" / "model.bin").read_bytes() == (tmp_path / "b" / "model.bin").read_bytes()
    assert np.array_equal(load_checkpoint(tmp_path / "b").values, once.values)


SMALL = ModelSpec(1, 2, 1, 2)  # 10 parameters


@settings(max_examples=40, deadline=None)
@given(st.lists(st.floats(width=32, allow_nan=False, allow_infinity=False), min_size=10, max_size=10))
def test_float32_values_roundtrip_bit_exact(tmp_path_factory, values):
    params = build_model(SMALL).with_values(np.array(values, dtype=np.float64))
    d = tmp_path_factory.mktemp("rt")
    save_checkpoint(d, params)
    assert load_checkpoint(d).values.tobytes() == params.values.tobytes()


def test_bad_magic_and_version(tmp_path):
    save_checkpoint(tmp_path, _model())
    blob = bytearray((tmp_path / "model.bin").read_bytes())
    (tmp_path / "model.bin").write_bytes(b"NOPE" + bytes(blob[4:]))
    with pytest.raises(CheckpointFormatError):
        load_checkpoint(tmp_path)
    blob[4:8] = struct.pack("<I", 2)
    (tmp_path / "model.bin").write_bytes(bytes(blob))
    with pytest.raises(CheckpointFormatError):
        load_checkpoint(tmp_path)


def test_truncated_file(tmp_path):
    save_checkpoint(tmp_path, _model())
    blob = (tmp_path / "model.bin").read_bytes()
    (tmp_path / "model.bin").write_bytes(blob[:-4])
    with pytest.raises(CheckpointCorruptError):
        load_checkpoint(tmp_path)
    (tmp_path / "model.bin").write_bytes(blob[:10])
    with pytest.raises(CheckpointCorruptError):
        load_checkpoint(tmp_path)


def test_count_mismatch_with_sidecar(tmp_path):
    save_checkpoint(tmp_path, _model())
    blob = bytearray((tmp_path / "model.bin").read_bytes())
    blob[8:16] = struct.pack("<Q", 7)
    (tmp_path / "model.bin").write_bytes(bytes(blob))
    with pytest.raises(CheckpointCorruptError):
        load_checkpoint(tmp_path)
