"""Importance-oriented structured head pruning.

Two numerically equivalent modes. Mask mode zeroes the pruned heads'
Q/K/V column slices (weights and biases) and the matching output-projection
row slices, keeping all shapes; slice mode physically removes those slices
and records which original heads survive. Logits must agree between modes
for any plan, including blocks that lose every head.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .autograd import Tensor
from .model import HeadMask, TransformerWeights


@dataclass
class PrunePlan:
    keep: np.ndarray          # (L, H) bool, True = head survives
    keep_count: int
    source_map_digest: str = ""

    def __post_init__(self):
        self.keep = np.asarray(self.keep, dtype=bool)
        if int(self.keep.sum()) != self.keep_count:
            raise ValueError(
                f"plan keeps {int(self.keep.sum())} heads, expected {self.keep_count}"
            )

    def kept_per_block(self) -> list[int]:
        return [int(row.sum()) for row in self.keep]

    def kept_indices(self, layer: int) -> list[int]:
        return [int(i) for i in np.flatnonzero(self.keep[layer])]

    def pruned_count(self) -> int:
        return int(self.keep.size) - self.keep_count

    def to_dict(self) -> dict:
        return {
            "keep": self.keep.astype(int).tolist(),
            "keep_count": self.keep_count,
            "source_map_digest": self.source_map_digest,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PrunePlan":
        return cls(
            keep=np.asarray(d["keep"], dtype=bool),
            keep_count=int(d["keep_count"]),
            source_map_digest=d.get("source_map_digest", ""),
        )

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as f:
            json.dump(self.to_dict(), f, sort_keys=True, indent=2)
            f.write("\n")

    @classmethod
    def load(cls, path) -> "PrunePlan":
        with open(path, encoding="utf-8") as f:
            return cls.from_dict(json.load(f))


def select_heads(importance, keep_count: int, digest: str | None = None) -> PrunePlan:
    """Keep the `keep_count` highest-importance heads.

    Ties break toward keeping the lower (layer, head) index. `importance`
    is an ImportanceMap or a bare (L, H) score matrix.
    """
    if hasattr(importance, "final"):
        final = importance.final
        if digest is None:
            digest = importance.digest()
    else:
        final = np.asarray(importance, dtype=np.float64)
    num_layers, num_heads = final.shape
    total = num_layers * num_heads
    if not (0 <= keep_count <= total):
        raise ValueError(f"keep_count {keep_count} out of range [0, {total}]")

    order = sorted(
        ((l, h) for l in range(num_layers) for h in range(num_heads)),
        key=lambda lh: (-final[lh], lh[0], lh[1]),
    )
    keep = np.zeros((num_layers, num_heads), dtype=bool)
    for l, h in order[:keep_count]:
        keep[l, h] = True
    return PrunePlan(keep=keep, keep_count=keep_count,
                     source_map_digest=digest or "")


def _slice_bounds(weights: TransformerWeights, layer: int, orig_head: int):
    """Column range of `orig_head` inside the (possibly sliced) block."""
    kept = weights.head_index_map[layer]
    if orig_head not in kept:
        return None
    j = kept.index(orig_head)
    d_h = weights.config.head_dim
    return j * d_h, (j + 1) * d_h


def apply_mask_prune(weights: TransformerWeights, plan: PrunePlan):
    """Zero pruned heads' weight slices; returns (weights', mask).

    Shapes are unchanged. The returned mask has 0 at pruned heads and 1
    elsewhere (gradients disabled; this is an inference artifact).
    """
    cfg = weights.config
    if plan.keep.shape != (cfg.num_layers, cfg.num_heads):
        raise ValueError(
            f"plan shape {plan.keep.shape} != ({cfg.num_layers}, {cfg.num_heads})"
        )
    out = weights.clone()
    xi = np.ones((cfg.num_layers, cfg.num_heads))
    for l, blk in enumerate(out.blocks):
        for h in range(cfg.num_heads):
            if plan.keep[l, h]:
                continue
            xi[l, h] = 0.0
            bounds = _slice_bounds(out, l, h)
            if bounds is None:
                continue  # already sliced away
            lo, hi = bounds
            for w, b in ((blk.wq, blk.bq), (blk.wk, blk.bk), (blk.wv, blk.bv)):
                w.data[:, lo:hi] = 0.0
                b.data[lo:hi] = 0.0
            blk.wo.data[lo:hi, :] = 0.0
    return out, HeadMask(Tensor(xi, requires_grad=False))


def apply_slice_prune(weights: TransformerWeights, plan: PrunePlan) -> TransformerWeights:
    """Physically remove pruned heads' slices; records kept original indices.

    Q/K/V lose the pruned column slices (weights and biases together, so
    masked and sliced forwards stay equivalent); the output projection
    loses the matching rows but keeps its bias whole. Kept heads preserve
    their original order. Re-applying the same plan is a no-op.
    """
    cfg = weights.config
    if plan.keep.shape != (cfg.num_layers, cfg.num_heads):
        raise ValueError(
            f"plan shape {plan.keep.shape} != ({cfg.num_layers}, {cfg.num_heads})"
        )
    out = weights.clone()
    for l, blk in enumerate(out.blocks):
        requested = plan.kept_indices(l)
        # heads must already exist in this block (supports re-slicing)
        new_kept = [h for h in weights.head_index_map[l] if h in requested]
        missing = [h for h in requested if h not in weights.head_index_map[l]]
        if missing:
            raise ValueError(
                f"block {l}: plan keeps heads {missing} already pruned away"
            )
        cols = []
        for h in new_kept:
            lo, hi = _slice_bounds(weights, l, h)
            cols.extend(range(lo, hi))
        cols = np.asarray(cols, dtype=np.int64)
        for name in ("wq", "wk", "wv"):
            w = getattr(blk, name)
            w.data = w.data[:, cols].copy() if cols.size else w.data[:, :0].copy()
        for name in ("bq", "bk", "bv"):
            b = getattr(blk, name)
            b.data = b.data[cols].copy() if cols.size else b.data[:0].copy()
        blk.wo.data = (blk.wo.data[cols, :].copy() if cols.size
                       else blk.wo.data[:0, :].copy())
        out.head_index_map[l] = new_kept
    return out
