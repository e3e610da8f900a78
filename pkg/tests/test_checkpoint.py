"""Checkpoint serialization and parameter-averaging tests."""

import numpy as np
import pytest

from dustlab.nnet.checkpoint import (
    CheckpointFormatError,
    average_checkpoints,
    load_checkpoint,
    save_checkpoint,
)
from dustlab.nnet.model import ModelConfig, init_params

CFG = ModelConfig(input_dim=4, vocab_size=6, n_blocks=2, d_model=8, n_heads=2, ff_dim=16)


def test_round_trip_preserves_config_and_values(tmp_path):
    params = init_params(CFG, seed=21)
    path = tmp_path / "model.ckpt"
    save_checkpoint(path, params)
    loaded = load_checkpoint(path)
    assert loaded.config == params.config
    assert set(loaded.tensors) == set(params.tensors)
    for k, v in params.tensors.items():
        # storage is float32, so values round trip through one downcast
        np.testing.assert_array_equal(loaded.tensors[k], v.astype(np.float32).astype(np.float64))
        assert loaded.tensors[k].dtype == np.float64


def test_second_save_is_byte_identical(tmp_path):
    params = init_params(CFG, seed=21)
    p1 = tmp_path / "a.ckpt"
    p2 = tmp_path / "b.ckpt"
    save_checkpoint(p1, params)
    save_checkpoint(p2, load_checkpoint(p1))
    assert p1.read_bytes() == p2.read_bytes()


def test_truncated_file_rejected(tmp_path):
    params = init_params(CFG, seed=3)
    path = tmp_path / "model.ckpt"
    save_checkpoint(path, params)
    data = path.read_bytes()
    path.write_bytes(data[: len(data) - 7])
    with pytest.raises(CheckpointFormatError):
        load_checkpoint(path)


def test_bad_magic_rejected(tmp_path):
    params = init_params(CFG, seed=3)
    path = tmp_path / "model.ckpt"
    save_checkpoint(path, params)
    data = bytearray(path.read_bytes())
    data[:4] = b"XXXX"
    path.write_bytes(bytes(data))
    with pytest.raises(CheckpointFormatError):
        load_checkpoint(path)


def test_trailing_garbage_rejected(tmp_path):
    params = init_params(CFG, seed=3)
    path = tmp_path / "model.ckpt"
    save_checkpoint(path, params)
    path.write_bytes(path.read_bytes() + b"\x00\x01")
    with pytest.raises(CheckpointFormatError):
        load_checkpoint(path)


def test_average_of_single_is_identity():
    params = init_params(CFG, seed=4)
    avg = average_checkpoints([params])
    for k, v in params.tensors.items():
        np.testing.assert_array_equal(avg.tensors[k], v)


def test_average_of_opposites_is_zero():
    a = init_params(CFG, seed=5)
    b = a.copy()
    for k in b.tensors:
        b.tensors[k] = -b.tensors[k]
    avg = average_checkpoints([a, b])
    for k in avg.tensors:
        np.testing.assert_allclose(avg.tensors[k], 0.0, atol=1e-300)


def test_average_matches_mean_oracle():
    sets = [init_params(CFG, seed=s) for s in (6, 7, 8)]
    avg = average_checkpoints(sets)
    for k in avg.tensors:
        oracle = np.mean([p.tensors[k] for p in sets], axis=0)
        np.testing.assert_allclose(avg.tensors[k], oracle, rtol=0, atol=1e-15)


def test_average_rejects_mismatched_tensor_sets():
    a = init_params(CFG, seed=1)
    b = init_params(CFG, seed=2)
    del b.tensors["out.b"]
    with pytest.raises(ValueError):
        average_checkpoints([a, b])


def test_average_rejects_mismatched_shapes():
    a = init_params(CFG, seed=1)
    b = init_params(CFG, seed=2)
    b.tensors["out.b"] = np.zeros(3)
    with pytest.raises(ValueError):
        average_checkpoints([a, b])


def test_average_rejects_empty():
    with pytest.raises(ValueError):
        average_checkpoints([])
