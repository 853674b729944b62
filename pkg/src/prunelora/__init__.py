"""Desk-scale transformer lab: head-importance pruning + rank-varied adapters.

Pipeline: estimate per-head importance from head-mask gradients, prune the
least important heads (masked or physically sliced, numerically
equivalent), attach rank-varied low-rank adapters to the surviving
projections, train under a LayerNorm+adapter freeze policy, merge the
adapters back exactly, and account for every parameter, FLOP and weight
byte in closed form.
"""

from .accounting import ParamReport, count_params, estimate_flops
from .autograd import Tensor, backward, no_grad
from .data import SyntheticTaskSpec, TokenBatch, generate, ingest_tsv
from .importance import ImportanceMap, block_importance, estimate_importance
from .lora import LoraAdapters, RankPlan, init_adapters, make_rank_plan, merge_adapters
from .model import HeadMask, ModelConfig, TransformerWeights, forward, init_weights
from .pruning import PrunePlan, apply_mask_prune, apply_slice_prune, select_heads
from .training import TrainConfig, TrainReport, freeze_policy, run_regime, train

__version__ = "0.1.0"

__all__ = [
    "HeadMask",
    "ImportanceMap",
    "LoraAdapters",
    "ModelConfig",
    "ParamReport",
    "PrunePlan",
    "RankPlan",
    "SyntheticTaskSpec",
    "Tensor",
    "TokenBatch",
    "TrainConfig",
    "TrainReport",
    "TransformerWeights",
    "apply_mask_prune",
    "apply_slice_prune",
    "backward",
    "block_importance",
    "count_params",
    "estimate_flops",
    "estimate_importance",
    "forward",
    "freeze_policy",
    "generate",
    "ingest_tsv",
    "init_adapters",
    "init_weights",
    "make_rank_plan",
    "merge_adapters",
    "no_grad",
    "run_regime",
    "select_heads",
    "train",
]
