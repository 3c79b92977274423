import struct

import pytest
import torch

from rxnlm.checkpoint import (MAGIC, CheckpointError, config_hash, file_digest, load_checkpoint,
                              save_checkpoint)


def test_round_trip_and_digest(tmp_path):
    tensors = {"b": torch.arange(6, dtype=torch.float32).reshape(2, 3), "a": torch.tensor([1.5])}
    cfg = {"d_model": 8, "name": "x"}
    digest = save_checkpoint(tmp_path / "m.ck", cfg, tensors, {"note": 1})
    assert digest == file_digest(tmp_path / "m.ck")
    cfg2, back, extra = load_checkpoint(tmp_path / "m.ck")
    assert cfg2 == cfg and extra == {"note": 1}
    assert all(torch.equal(back[k], tensors[k]) for k in tensors)


def test_layout_is_little_endian_and_self_describing(tmp_path):
    save_checkpoint(tmp_path / "m.ck", {"k": 1}, {"w": torch.tensor([1.0, -2.0])})
    raw = (tmp_path / "m.ck").read_bytes()
    assert raw[:8] == MAGIC
    (n,) = struct.unpack("<I", raw[8:12])
    assert struct.unpack("<2f", raw[12 + n:]) == (1.0, -2.0)


def test_saving_twice_gives_identical_bytes(tmp_path):
    t = {"w": torch.randn(4, 4)}
    assert save_checkpoint(tmp_path / "a", {"x": 1}, t) == save_checkpoint(tmp_path / "b", {"x": 1}, t)


def test_config_hash_is_order_free():
    assert config_hash({"a": 1, "b": 2}) == config_hash({"b": 2, "a": 1}) != config_hash({"a": 2, "b": 2})


def test_rejects_foreign_files(tmp_path):
    (tmp_path / "x").write_bytes(b"not a checkpoint")
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "x")
