import struct

import pytest
import torch

from auxlatent.checkpoint import CheckpointError, load_checkpoint, save_checkpoint


def _forward(model, tasks):
    ids = torch.tensor([model.vocab.encode(tasks[0].question)])
    img = torch.as_tensor([tasks[0].question_raster], dtype=torch.float64)
    return model(ids, img)[0]


def test_round_trip_is_bit_identical(tiny_model, small_tasks, tmp_path):
    tiny_model.completed_stage = 2
    p = tmp_path / "m.lgeo"
    save_checkpoint(tiny_model, p, {"note": "x"})
    model, header = load_checkpoint(p)
    assert header["meta"] == {"note": "x"} and model.completed_stage == 2
    assert torch.equal(_forward(tiny_model, small_tasks), _forward(model, small_tasks))
    save_checkpoint(model, tmp_path / "again.lgeo", {"note": "x"})
    assert p.read_bytes() == (tmp_path / "again.lgeo").read_bytes()


def test_bad_magic(tmp_path):
    p = tmp_path / "junk.lgeo"
    p.write_bytes(b"NOPE!" + bytes(20))
    with pytest.raises(CheckpointError, match="magic"):
        load_checkpoint(p)


def test_version_mismatch(tiny_model, tmp_path):
    p = tmp_path / "m.lgeo"
    save_checkpoint(tiny_model, p)
    data = bytearray(p.read_bytes())
    data[5:9] = struct.pack("<I", 2)
    p.write_bytes(bytes(data))
    with pytest.raises(CheckpointError, match="version 2"):
        load_checkpoint(p)


def test_shape_mismatch(tiny_model, tmp_path):
    p = tmp_path / "m.lgeo"
    save_checkpoint(tiny_model, p)
    data = p.read_bytes()
    assert b'"d_vis": 8' in data
    p.write_bytes(data.replace(b'"d_vis": 8', b'"d_vis": 9', 1))
    with pytest.raises(CheckpointError, match="shape mismatch"):
        load_checkpoint(p)


def test_truncated_file(tiny_model, tmp_path):
    p = tmp_path / "m.lgeo"
    save_checkpoint(tiny_model, p)
    p.write_bytes(p.read_bytes()[:-40])
    with pytest.raises(CheckpointError):
        load_checkpoint(p)
