"""Versioned checkpoint container: JSON manifest + raw little-endian f64 arrays.

Layout: 4-byte magic, uint32 format version, uint64 manifest length, the
manifest as canonical JSON (sorted keys, no whitespace), then each array's
bytes at the offsets recorded in the manifest. Writers emit tensors in a
fixed name order and canonical JSON, so identical inputs produce identical
bytes.
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

from .autograd import Tensor

MAGIC = b"PLCK"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


def _canonical_json(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode("utf-8")


def write_checkpoint(path, header: dict, named_arrays) -> None:
    """Write `named_arrays` (iterable of (name, ndarray)) under `header`."""
    tensors = []
    blobs = []
    offset = 0
    for name, arr in named_arrays:
        raw = np.ascontiguousarray(arr, dtype="<f8").tobytes()
        tensors.append({
            "name": name,
            "shape": list(arr.shape),
            "offset": offset,
            "size": len(raw),
        })
        blobs.append(raw)
        offset += len(raw)
    manifest = dict(header)
    manifest["tensors"] = tensors
    payload = _canonical_json(manifest)
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", FORMAT_VERSION))
        f.write(struct.pack("<Q", len(payload)))
        f.write(payload)
        for raw in blobs:
            f.write(raw)


def read_checkpoint(path):
    """Return (manifest, {name: ndarray})."""
    data = Path(path).read_bytes()
    if data[:4] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    (version,) = struct.unpack("<I", data[4:8])
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported format version {version}")
    (mlen,) = struct.unpack("<Q", data[8:16])
    manifest = json.loads(data[16 : 16 + mlen].decode("utf-8"))
    base = 16 + mlen
    arrays = {}
    for entry in manifest["tensors"]:
        start = base + entry["offset"]
        raw = data[start : start + entry["size"]]
        arr = np.frombuffer(raw, dtype="<f8").astype(np.float64)
        arrays[entry["name"]] = arr.reshape(entry["shape"])
    return manifest, arrays


def file_digest(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


# ---------------------------------------------------------------------------
# model checkpoints


def expected_model_shapes(config, head_index_map) -> dict:
    """Every tensor name -> shape implied by config + kept heads."""
    d, d_f, d_h = config.hidden, config.ffn_dim, config.head_dim
    shapes = {
        "embeddings.token": (config.vocab_size, d),
        "embeddings.position": (config.max_positions, d),
        "embeddings.type": (config.type_vocab, d),
        "embeddings.ln_gamma": (d,),
        "embeddings.ln_beta": (d,),
        "pooler.w": (d, d),
        "pooler.b": (d,),
    }
    for l in range(config.num_layers):
        width = len(head_index_map[l]) * d_h
        shapes[f"block{l}.wq"] = (d, width)
        shapes[f"block{l}.bq"] = (width,)
        shapes[f"block{l}.wk"] = (d, width)
        shapes[f"block{l}.bk"] = (width,)
        shapes[f"block{l}.wv"] = (d, width)
        shapes[f"block{l}.bv"] = (width,)
        shapes[f"block{l}.wo"] = (width, d)
        shapes[f"block{l}.bo"] = (d,)
        shapes[f"block{l}.w_up"] = (d, d_f)
        shapes[f"block{l}.b_up"] = (d_f,)
        shapes[f"block{l}.w_down"] = (d_f, d)
        shapes[f"block{l}.b_down"] = (d,)
        for part in ("ln1_gamma", "ln1_beta", "ln2_gamma", "ln2_beta"):
            shapes[f"block{l}.{part}"] = (d,)
    if config.num_classes > 0:
        shapes["classifier.w"] = (d, config.num_classes)
        shapes["classifier.b"] = (config.num_classes,)
    return shapes


def save_model(path, weights, merged_adapters: bool = False) -> None:
    header = {
        "kind": "model",
        "config": weights.config.to_dict(),
        "head_index_map": weights.head_index_map,
        "merged_adapters": merged_adapters,
    }
    write_checkpoint(path, header, ((n, t.data) for n, t in weights.named_tensors()))


def load_model(path):
    """Load a model checkpoint; returns (TransformerWeights, manifest)."""
    from .model import Block, ModelConfig, TransformerWeights

    manifest, arrays = read_checkpoint(path)
    if manifest.get("kind") != "model":
        raise CheckpointError(f"{path}: expected a model checkpoint")
    config = ModelConfig.from_dict(manifest["config"])
    head_index_map = [list(map(int, row)) for row in manifest["head_index_map"]]
    if len(head_index_map) != config.num_layers:
        raise CheckpointError(f"{path}: head_index_map has wrong number of blocks")

    shapes = expected_model_shapes(config, head_index_map)
    if set(arrays) != set(shapes):
        missing = sorted(set(shapes) - set(arrays))
        extra = sorted(set(arrays) - set(shapes))
        raise CheckpointError(
            f"{path}: tensor set mismatch (missing {missing}, unexpected {extra})"
        )
    for name, shape in shapes.items():
        if tuple(arrays[name].shape) != shape:
            raise CheckpointError(
                f"{path}: {name} has shape {arrays[name].shape}, expected {shape}"
            )

    def t(name):
        return Tensor(arrays[name])

    blocks = []
    for l in range(config.num_layers):
        blocks.append(Block(**{
            part: t(f"block{l}.{part}")
            for part in ("wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo",
                         "w_up", "b_up", "w_down", "b_down",
                         "ln1_gamma", "ln1_beta", "ln2_gamma", "ln2_beta")
        }))
    weights = TransformerWeights(
        config=config,
        tok_emb=t("embeddings.token"),
        pos_emb=t("embeddings.position"),
        type_emb=t("embeddings.type"),
        emb_ln_gamma=t("embeddings.ln_gamma"),
        emb_ln_beta=t("embeddings.ln_beta"),
        blocks=blocks,
        pooler_w=t("pooler.w"),
        pooler_b=t("pooler.b"),
        classifier_w=t("classifier.w") if config.num_classes > 0 else None,
        classifier_b=t("classifier.b") if config.num_classes > 0 else None,
        head_index_map=head_index_map,
    )
    return weights, manifest
