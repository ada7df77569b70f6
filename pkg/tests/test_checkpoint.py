"""Checkpoint file format: exact round-trips and corruption handling."""

import dataclasses

import numpy as np
import pytest

from cxrnet.checkpoint import (
    MAGIC,
    CheckpointError,
    load_checkpoint,
    save_checkpoint,
)
from cxrnet.network import DenseNetConfig, build_network

CFG = DenseNetConfig(4, 2, (1, 1), 0.5, 2, 1, 16, 2)


def saved(tmp_path, **kwargs):
    net = build_network(CFG, seed=42)
    net.buffers["final_bn.running_mean"][:] = np.arange(5, dtype=np.float32)
    path = tmp_path / "net.bin"
    save_checkpoint(net, 7, 0.34567891, path, **kwargs)
    return net, path


def test_round_trip_is_bit_exact(tmp_path):
    net, path = saved(tmp_path, extra={"norm_mode": "per_image"})
    ck = load_checkpoint(path)
    assert ck.network.config == CFG
    assert ck.meta.epoch == 7
    assert ck.meta.val_loss == 0.34567891  # repr round-trip, not approximate
    assert ck.meta.seed == 42
    assert ck.meta.extra == {"norm_mode": "per_image"}
    for name, t in net.params.items():
        np.testing.assert_array_equal(ck.network.params[name].data, t.data)
    for name, a in net.buffers.items():
        np.testing.assert_array_equal(ck.network.buffers[name], a)


def test_save_load_save_produces_identical_bytes(tmp_path):
    _, path = saved(tmp_path)
    ck = load_checkpoint(path)
    path2 = tmp_path / "again.bin"
    save_checkpoint(ck.network, ck.meta.epoch, ck.meta.val_loss, path2, extra=ck.meta.extra)
    assert path.read_bytes() == path2.read_bytes()


def test_expected_config_accepts_match(tmp_path):
    _, path = saved(tmp_path)
    ck = load_checkpoint(path, expected_config=CFG)
    assert ck.network.config == CFG


def test_expected_config_mismatch_names_first_parameter(tmp_path):
    _, path = saved(tmp_path)
    other = dataclasses.replace(CFG, init_features=8)
    with pytest.raises(CheckpointError, match="stem.conv.weight"):
        load_checkpoint(path, expected_config=other)


def test_mismatch_on_extra_layers_names_missing_parameter(tmp_path):
    _, path = saved(tmp_path)
    other = dataclasses.replace(CFG, block_layers=(2, 1))
    with pytest.raises(CheckpointError, match="block1.layer2"):
        load_checkpoint(path, expected_config=other)


def test_bad_magic(tmp_path):
    _, path = saved(tmp_path)
    raw = bytearray(path.read_bytes())
    raw[:6] = b"NOTCKP"
    path.write_bytes(bytes(raw))
    with pytest.raises(CheckpointError, match="magic"):
        load_checkpoint(path)


def test_unsupported_version(tmp_path):
    _, path = saved(tmp_path)
    raw = bytearray(path.read_bytes())
    raw[6:8] = (2).to_bytes(2, "little")
    path.write_bytes(bytes(raw))
    with pytest.raises(CheckpointError, match="version 2"):
        load_checkpoint(path)


@pytest.mark.parametrize("keep", [0, 5, 7, 40, 200])
def test_truncation_at_any_point(tmp_path, keep):
    _, path = saved(tmp_path)
    path.write_bytes(path.read_bytes()[:keep])
    with pytest.raises(CheckpointError):
        load_checkpoint(path)


def test_trailing_bytes_rejected(tmp_path):
    _, path = saved(tmp_path)
    path.write_bytes(path.read_bytes() + b"\x00")
    with pytest.raises(CheckpointError, match="trailing"):
        load_checkpoint(path)


def test_missing_file_raises_oserror(tmp_path):
    with pytest.raises(OSError):
        load_checkpoint(tmp_path / "absent.bin")


def test_metadata_key_with_equals_rejected(tmp_path):
    net = build_network(CFG)
    with pytest.raises(CheckpointError):
        save_checkpoint(net, 1, 0.5, tmp_path / "x.bin", extra={"a=b": "c"})
