import numpy as np
import pytest

from prunelora import checkpoint, init_weights
from prunelora.checkpoint import CheckpointError


def test_model_roundtrip_bit_exact(toy_config, toy_weights, tmp_path):
    path = tmp_path / "model.ckpt"
    checkpoint.save_model(path, toy_weights)
    loaded, manifest = checkpoint.load_model(path)
    assert manifest["kind"] == "model"
    assert manifest["merged_adapters"] is False
    assert loaded.config == toy_config
    assert loaded.head_index_map == toy_weights.head_index_map
    for (name_a, a), (name_b, b) in zip(toy_weights.named_tensors(),
                                        loaded.named_tensors()):
        assert name_a == name_b
        assert np.array_equal(a.data, b.data)


def test_save_is_byte_deterministic(toy_weights, tmp_path):
    p1, p2 = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
    checkpoint.save_model(p1, toy_weights)
    checkpoint.save_model(p2, toy_weights)
    assert p1.read_bytes() == p2.read_bytes()
    assert checkpoint.file_digest(p1) == checkpoint.file_digest(p2)


def test_digest_changes_with_content(toy_config, tmp_path):
    p1, p2 = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
    checkpoint.save_model(p1, init_weights(toy_config, seed=0))
    checkpoint.save_model(p2, init_weights(toy_config, seed=1))
    assert checkpoint.file_digest(p1) != checkpoint.file_digest(p2)


def test_bad_magic_rejected(tmp_path):
    path = tmp_path / "junk.ckpt"
    path.write_bytes(b"nope" + b"\x00" * 64)
    with pytest.raises(CheckpointError, match="bad magic"):
        checkpoint.read_checkpoint(path)


def test_shape_mismatch_rejected(toy_weights, tmp_path):
    path = tmp_path / "model.ckpt"
    arrays = dict(toy_weights.named_tensors())
    named = [(n, t.data) for n, t in arrays.items()]
    # corrupt one matrix's shape (flatten the token embedding)
    named[0] = (named[0][0], named[0][1].reshape(-1))
    checkpoint.write_checkpoint(path, {
        "kind": "model",
        "config": toy_weights.config.to_dict(),
        "head_index_map": toy_weights.head_index_map,
        "merged_adapters": False,
    }, named)
    with pytest.raises(CheckpointError, match="shape"):
        checkpoint.load_model(path)


def test_missing_tensor_rejected(toy_weights, tmp_path):
    path = tmp_path / "model.ckpt"
    named = [(n, t.data) for n, t in toy_weights.named_tensors()][:-1]
    checkpoint.write_checkpoint(path, {
        "kind": "model",
        "config": toy_weights.config.to_dict(),
        "head_index_map": toy_weights.head_index_map,
        "merged_adapters": False,
    }, named)
    with pytest.raises(CheckpointError, match="missing"):
        checkpoint.load_model(path)


def test_sliced_model_roundtrip(toy_weights, tmp_path):
    from prunelora import PrunePlan, apply_slice_prune

    keep = np.ones((4, 4), dtype=bool)
    keep[0, 1] = keep[2, :] = False
    plan = PrunePlan(keep=keep, keep_count=int(keep.sum()))
    sliced = apply_slice_prune(toy_weights, plan)
    path = tmp_path / "pruned.ckpt"
    checkpoint.save_model(path, sliced)
    loaded, _ = checkpoint.load_model(path)
    assert loaded.head_index_map == sliced.head_index_map
    assert loaded.blocks[2].wq.data.shape == (64, 0)
    assert np.array_equal(loaded.blocks[0].wq.data, sliced.blocks[0].wq.data)
