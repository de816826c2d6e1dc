"""Binary checkpoint format: bit-exact round trips and corruption guards."""

import struct

import numpy as np
import pytest

from cdd.checkpoint import (
    MAGIC,
    VERSION,
    CheckpointError,
    deserialize_model,
    load_checkpoint,
    save_checkpoint,
    serialize_model,
)
from cdd.model import Arch, apply_freeze, init_adapted

ARCH = Arch(data_dim=2, cond_dim=4, hidden=(8, 8), n_encoder=1, time_freqs=2)


def _model(freeze="adapter_only"):
    m = apply_freeze(init_adapted(ARCH, seed=0), freeze)
    m.params["gate.mu"] = np.array(0.3)  # exercise a nonzero scalar tensor
    return m


def test_round_trip_is_bit_exact():
    m = _model()
    loaded, h = deserialize_model(serialize_model(m, config_hash="deadbeef01234567"))
    assert h == "deadbeef01234567"
    assert loaded.arch == m.arch
    assert loaded.freeze_mask == m.freeze_mask
    assert sorted(loaded.params) == sorted(m.params)
    for name in m.params:
        assert loaded.params[name].dtype == np.float64
        assert loaded.params[name].shape == m.params[name].shape
        assert np.array_equal(loaded.params[name], m.params[name]), name


def test_file_round_trip_and_independence(tmp_path):
    m = _model()
    path = tmp_path / "model.cddk"
    save_checkpoint(m, path, config_hash="h")
    loaded, _ = load_checkpoint(path)
    loaded.params["backbone.out.bias"] += 1.0  # loaded tensors are private copies
    again, _ = load_checkpoint(path)
    assert np.array_equal(again.params["backbone.out.bias"],
                          m.params["backbone.out.bias"])


def test_per_layer_gate_arch_round_trips():
    arch = Arch(data_dim=2, cond_dim=3, hidden=(8, 8), n_encoder=2,
                time_freqs=2, per_layer_gate=True)
    m = init_adapted(arch, seed=1)
    loaded, _ = deserialize_model(serialize_model(m))
    assert loaded.arch == arch
    assert "gate.mu0" in loaded.params and "gate.mu1" in loaded.params


def test_wrong_magic_names_expected_bytes():
    blob = serialize_model(_model())
    with pytest.raises(CheckpointError, match="CDDK"):
        deserialize_model(b"XXXX" + blob[4:])


def test_wrong_version_is_rejected():
    blob = serialize_model(_model())
    bad = blob[:4] + struct.pack("<I", VERSION + 1) + blob[8:]
    with pytest.raises(CheckpointError, match="version"):
        deserialize_model(bad)


def test_truncation_reports_offset_everywhere():
    blob = serialize_model(_model(), config_hash="abc")
    for cut in (2, 6, 11, 40, len(blob) // 2, len(blob) - 1):
        with pytest.raises(CheckpointError, match="offset"):
            deserialize_model(blob[:cut])


def test_trailing_bytes_are_rejected():
    blob = serialize_model(_model())
    with pytest.raises(CheckpointError, match="trailing"):
        deserialize_model(blob + b"\x00")


def test_non_finite_tensors_refuse_to_save():
    m = _model()
    m.params["backbone.out.bias"][0] = np.nan
    with pytest.raises(CheckpointError, match="non-finite"):
        serialize_model(m)


def test_magic_constant_is_public():
    assert MAGIC == b"CDDK" and serialize_model(_model()).startswith(b"CDDK")


def test_missing_tensor_is_detected():
    m = _model()
    del m.params["cond.embed.bias"]
    blob = serialize_model(m)  # serializer writes whatever it is given
    with pytest.raises(CheckpointError, match="cond.embed.bias: missing"):
        deserialize_model(blob)


def test_shape_mismatch_is_detected():
    m = _model()
    m.params["backbone.out.bias"] = np.zeros(5)
    with pytest.raises(CheckpointError, match="backbone.out.bias"):
        deserialize_model(serialize_model(m))


def test_empty_freeze_mask_round_trips():
    m = init_adapted(ARCH, seed=2)
    loaded, h = deserialize_model(serialize_model(m))
    assert loaded.freeze_mask == frozenset() and h == ""
