"""Closed-form parameter, FLOPs and weight-memory accounting.

Counts are exact integer arithmetic over the model geometry, never a walk
over materialized arrays (tests cross-check against such walks). FLOPs use
the 1 MAC = 2 FLOPs convention; per-element costs of non-matmul ops are
fixed documented constants (softmax 5/element over the score matrices,
layernorm 8/element, embedding 2 adds/element).

Externally reported figures for the bert-base-uncased setup these formulas
mirror are kept here for side-by-side reporting; the closed-form counts
intentionally differ where the slicing arithmetic says so.
"""

from __future__ import annotations

from dataclasses import dataclass

from .lora import RankPlan
from .model import ModelConfig
from .pruning import PrunePlan

# reported reference figures for the unpruned/pruned bert-base setup
REPORTED_FULL_PARAMS = "109.48 M"
REPORTED_PRUNED_PARAMS = "101.29 M"
REPORTED_LORA_TRAINABLE = "259.6 K"
REPORTED_PRUNE_LORA_TRAINABLE = "308.7 K"
REPORTED_FULL_MEMORY_MB = 418.7

SOFTMAX_FLOPS_PER_CELL = 5
LAYERNORM_FLOPS_PER_CELL = 8
EMBEDDING_FLOPS_PER_CELL = 2


def per_head_params(config: ModelConfig) -> int:
    """Parameters removed by pruning one head: Q/K/V slices (weight+bias)
    plus the output-projection row slice."""
    d, d_h = config.hidden, config.head_dim
    return 3 * (d * d_h + d_h) + d_h * d


def _normalize_kept(config: ModelConfig, prune_plan):
    """-> (kept_per_block list | None, total kept heads)."""
    full = [config.num_heads] * config.num_layers
    if prune_plan is None:
        return full, config.num_layers * config.num_heads
    if isinstance(prune_plan, PrunePlan):
        kept = prune_plan.kept_per_block()
        return kept, sum(kept)
    if isinstance(prune_plan, int):
        total = config.num_layers * config.num_heads
        if not (0 <= prune_plan <= total):
            raise ValueError(f"keep_count {prune_plan} out of range [0, {total}]")
        return None, prune_plan
    kept = [int(k) for k in prune_plan]
    if len(kept) != config.num_layers:
        raise ValueError(
            f"kept-per-block covers {len(kept)} blocks, model has "
            f"{config.num_layers}"
        )
    return kept, sum(kept)


def _normalize_ranks(config: ModelConfig, rank_plan):
    if rank_plan is None:
        return None
    ranks = rank_plan.block_rank if isinstance(rank_plan, RankPlan) else rank_plan
    ranks = [int(r) for r in ranks]
    if len(ranks) != config.num_layers:
        raise ValueError(
            f"rank plan covers {len(ranks)} blocks, model has {config.num_layers}"
        )
    return ranks


@dataclass
class ParamReport:
    total_params: int
    trainable_params: int
    trainable_fraction: float
    components: dict
    forward_flops_per_token: int
    weight_bytes_f64: int
    weight_bytes_f32: int

    def to_dict(self) -> dict:
        return {
            "total_params": self.total_params,
            "trainable_params": self.trainable_params,
            "trainable_fraction": self.trainable_fraction,
            "components": self.components,
            "forward_flops_per_token": self.forward_flops_per_token,
            "weight_bytes_f64": self.weight_bytes_f64,
            "weight_bytes_f32": self.weight_bytes_f32,
        }


def count_params(
    config: ModelConfig,
    prune_plan=None,
    rank_plan=None,
    seq_len: int = 128,
) -> ParamReport:
    """Exact parameter accounting for (config, prune plan, rank plan).

    `prune_plan` may be a PrunePlan, a kept-heads-per-block list, a bare
    keep count (per-block breakdown then collapses to aggregate lines), or
    None. `rank_plan` (RankPlan or per-block rank list) adds adapter
    counts and switches `trainable_params` to the adapter freeze policy:
    LayerNorms + adapters + classifier. Without one, everything trains.
    """
    d, d_f, d_h = config.hidden, config.ffn_dim, config.head_dim
    kept, kept_total = _normalize_kept(config, prune_plan)
    ranks = _normalize_ranks(config, rank_plan)
    if ranks is not None and kept is None and kept_total != config.num_layers * config.num_heads:
        raise ValueError(
            "adapter counts on a pruned model need the per-block plan, "
            "not a bare keep count"
        )

    components: dict = {}
    components["embeddings"] = (
        config.vocab_size * d + config.max_positions * d
        + config.type_vocab * d + 2 * d
    )
    ffn = d * d_f + d_f + d_f * d + d
    if kept is not None:
        for l, k in enumerate(kept):
            w = k * d_h
            components[f"block{l}.mha"] = 3 * (d * w + w) + w * d + d
            components[f"block{l}.ffn"] = ffn
            components[f"block{l}.layernorm"] = 4 * d
    else:
        w_total = kept_total * d_h
        components["blocks.mha"] = (
            3 * (d * w_total + w_total) + w_total * d + config.num_layers * d
        )
        components["blocks.ffn"] = config.num_layers * ffn
        components["blocks.layernorm"] = config.num_layers * 4 * d
    components["pooler"] = d * d + d
    components["classifier"] = (
        d * config.num_classes + config.num_classes if config.num_classes else 0
    )

    adapter_params = 0
    if ranks is not None:
        widths = [k * d_h for k in kept] if kept is not None \
            else [d] * config.num_layers
        # per block: Q/K/V are in=d,out=w; O is in=w,out=d -> 4*r*(d+w)
        adapter_params = sum(
            4 * r * (d + w) for r, w in zip(ranks, widths)
        )
        components["adapters"] = adapter_params

    total = sum(components.values())
    layernorm_total = 2 * d + config.num_layers * 4 * d
    if ranks is not None:
        trainable = layernorm_total + adapter_params + components["classifier"]
    else:
        trainable = total

    flops = estimate_flops(config, prune_plan, seq_len)
    return ParamReport(
        total_params=total,
        trainable_params=trainable,
        trainable_fraction=trainable / total,
        components=components,
        forward_flops_per_token=flops.total_flops // seq_len,
        weight_bytes_f64=total * 8,
        weight_bytes_f32=total * 4,
    )


@dataclass
class FlopsReport:
    seq_len: int
    mha_matmul_flops: int
    ffn_matmul_flops: int
    head_matmul_flops: int
    embedding_flops: int
    layernorm_flops: int
    softmax_flops: int
    other_flops: int

    @property
    def matmul_flops(self) -> int:
        return self.mha_matmul_flops + self.ffn_matmul_flops + self.head_matmul_flops

    @property
    def total_flops(self) -> int:
        return (self.matmul_flops + self.embedding_flops + self.layernorm_flops
                + self.softmax_flops + self.other_flops)

    def to_dict(self) -> dict:
        return {
            "seq_len": self.seq_len,
            "matmul_flops": self.matmul_flops,
            "mha_matmul_flops": self.mha_matmul_flops,
            "ffn_matmul_flops": self.ffn_matmul_flops,
            "head_matmul_flops": self.head_matmul_flops,
            "embedding_flops": self.embedding_flops,
            "layernorm_flops": self.layernorm_flops,
            "softmax_flops": self.softmax_flops,
            "other_flops": self.other_flops,
            "total_flops": self.total_flops,
        }


def estimate_flops(config: ModelConfig, prune_plan=None, seq_len: int = 128) -> FlopsReport:
    """Analytic single-example forward cost at the given sequence length.

    Matmul terms mirror the forward pass exactly (the instrumented engine
    counter reproduces them to the FLOP); MHA cost is linear in the kept
    head count of each block. Attention is computed over the full padded
    length, which is what the forward pass does too.
    """
    if seq_len < 1:
        raise ValueError("seq_len must be >= 1")
    d, d_f, d_h = config.hidden, config.ffn_dim, config.head_dim
    s, num_layers, classes = seq_len, config.num_layers, config.num_classes
    _, kept_total = _normalize_kept(config, prune_plan)
    w_total = kept_total * d_h  # sum of per-block projection widths

    # MACs: Q/K/V projections, scores, attention*V, output projection
    mha_macs = 4 * s * d * w_total + 2 * s * s * w_total
    ffn_macs = num_layers * 2 * s * d * d_f
    head_macs = d * d + d * classes

    score_cells = s * s * kept_total
    ln_cells = (2 * num_layers + 1) * s * d
    other = (
        3 * s * w_total            # Q/K/V bias adds
        + num_layers * s * d       # output-projection bias
        + 2 * score_cells          # score scaling + padding bias add
        + num_layers * (s * d_f + s * d)  # FFN biases
        + num_layers * s * d_f     # relu
        + 2 * num_layers * s * d   # residual adds
        + d + d                    # pooler bias + tanh
        + classes                  # classifier bias
    )
    return FlopsReport(
        seq_len=s,
        mha_matmul_flops=2 * mha_macs,
        ffn_matmul_flops=2 * ffn_macs,
        head_matmul_flops=2 * head_macs,
        embedding_flops=EMBEDDING_FLOPS_PER_CELL * s * d,
        layernorm_flops=LAYERNORM_FLOPS_PER_CELL * ln_cells,
        softmax_flops=SOFTMAX_FLOPS_PER_CELL * score_cells,
        other_flops=other,
    )


# ---------------------------------------------------------------------------
# presentation


def human_count(n: int) -> str:
    if n >= 1_000_000:
        return f"{n / 1e6:.2f} M"
    if n >= 1_000:
        return f"{n / 1e3:.1f} K"
    return str(n)


def format_report_table(rows) -> str:
    """Aligned text table; rows are (name, ParamReport) pairs."""
    header = ["", "Model Param", "Trainable Param", "Proportion", "Memory (f32)"]
    table = [header]
    for name, rep in rows:
        table.append([
            name,
            human_count(rep.total_params),
            human_count(rep.trainable_params),
            f"{100 * rep.trainable_fraction:.2f}%",
            f"{rep.weight_bytes_f32 / 2**20:.1f} MB",
        ])
    widths = [max(len(r[i]) for r in table) for i in range(len(header))]
    lines = []
    for r in table:
        lines.append("  ".join(cell.ljust(w) for cell, w in zip(r, widths)).rstrip())
    return "\n".join(lines) + "\n"
