import struct

import numpy as np
import pytest

from med2n.checkpoint import MAGIC, encode, load_checkpoint, read_checkpoint, save_checkpoint
from med2n.errors import CheckpointError, MissingPrerequisiteError
from med2n.trainer import new_bundle, stage_rng, train_student_step


def test_round_trip_is_byte_identical(tmp_path, smoke_cfg, smoke_bench):
    b = new_bundle("student", smoke_cfg.train, smoke_bench)
    b.gates.logits.data[:] = np.random.default_rng(0).standard_normal(b.gates.logits.shape)
    b.net.blocks[1].bn.running_var[:] = 3.5
    rng = stage_rng(0, "student")
    rng.random(5)
    path = save_checkpoint(tmp_path / "s.ckpt", b, {"stage": "student"}, rng.bit_generator.state)
    back, manifest = load_checkpoint(path, smoke_cfg.train, smoke_bench)
    assert back.role == "student"
    for k, v in b.named_arrays().items():
        assert back.named_arrays()[k].tobytes() == v.tobytes()
    restored = np.random.default_rng()
    restored.bit_generator.state = manifest["rng_state"]
    np.testing.assert_array_equal(restored.random(3), rng.random(3))
    assert encode(back, {"stage": "student"}, manifest["rng_state"]) == path.read_bytes()


def test_optimizer_state_survives(tmp_path, smoke_cfg, smoke_bench):
    from med2n.data import sample_episode
    pre = new_bundle("st_teacher", smoke_cfg.train, smoke_bench).freeze()
    tt = new_bundle("tt_teacher", smoke_cfg.train, smoke_bench).freeze()
    s = new_bundle("student", smoke_cfg.train, smoke_bench)
    rng = np.random.default_rng(0)
    src = sample_episode(smoke_bench.source_train, 5, 1, 2, rng)
    tgt = sample_episode(smoke_bench.target_aux, 5, 1, 2, rng)
    train_student_step(s, pre, tt, src, tgt, smoke_cfg.train, rng)
    back, _ = load_checkpoint(save_checkpoint(tmp_path / "s.ckpt", s), smoke_cfg.train, smoke_bench)
    assert back.optimizer.state.step == 1
    np.testing.assert_array_equal(back.optimizer.state.m[0], s.optimizer.state.m[0])


def test_header_layout(tmp_path, smoke_cfg, smoke_bench):
    raw = encode(new_bundle("m_base", smoke_cfg.train, smoke_bench))
    magic, version, n = struct.unpack_from("<8sIQ", raw)
    assert magic == MAGIC and version == 1 and len(raw) > 20 + n


def test_missing_and_corrupt(tmp_path, smoke_cfg, smoke_bench):
    with pytest.raises(MissingPrerequisiteError):
        read_checkpoint(tmp_path / "absent.ckpt")
    bad = tmp_path / "bad.ckpt"
    bad.write_bytes(b"NOTACKPT" + b"\0" * 20)
    with pytest.raises(CheckpointError, match="magic"):
        read_checkpoint(bad)
    raw = bytearray(encode(new_bundle("m_base", smoke_cfg.train, smoke_bench)))
    struct.pack_into("<I", raw, 8, 99)
    bad.write_bytes(bytes(raw))
    with pytest.raises(CheckpointError, match="version 99"):
        read_checkpoint(bad)
    good = encode(new_bundle("m_base", smoke_cfg.train, smoke_bench))
    bad.write_bytes(good[:-8])
    with pytest.raises(CheckpointError, match="truncated"):
        read_checkpoint(bad)


def test_architecture_comes_from_manifest(tmp_path, smoke_cfg, smoke_bench):
    import dataclasses
    b = new_bundle("student", smoke_cfg.train, smoke_bench)
    path = save_checkpoint(tmp_path / "s.ckpt", b)
    other = dataclasses.replace(smoke_cfg.train, channels=(2, 2, 2, 2), decompose_depth=1)
    back, _ = load_checkpoint(path, other, smoke_bench)
    assert back.net.gated_filter_count == b.net.gated_filter_count
