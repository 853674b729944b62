"""Fine-tuning harness: freeze policies, AdamW, and the regime pipelines.

Three regimes. `full_finetune` trains every weight. `lora` freezes the
base model and trains LayerNorms, adapters and the classifier head.
`prune_lora` first estimates head importance, slice-prunes to the keep
count, assigns rank-varied adapters from block importance, then trains
under the same freeze policy.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import autograd as ag
from .data import TokenBatch, batches
from .importance import (
    DEFAULT_EPSILON,
    DEFAULT_SAMPLE_SIZE,
    ImportanceMap,
    block_importance,
    estimate_importance,
)
from .lora import LoraAdapters, RankPlan, init_adapters, make_rank_plan
from .model import ModelConfig, TransformerWeights, forward, init_weights
from .pruning import PrunePlan, apply_slice_prune, select_heads

REGIMES = ("full_finetune", "lora", "prune_lora")


class TrainingDiverged(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    regime: str = "full_finetune"
    epochs: int = 30
    learning_rate: float = 2e-5
    weight_decay: float = 0.01
    batch_size: int = 32
    seed: int = 0
    eval_every: int = 1
    # prune_lora knobs
    keep_count: int | None = None
    n_high: int = 4
    rank_high: int = 8
    rank_low: int = 4
    importance_sample_size: int = DEFAULT_SAMPLE_SIZE
    importance_epsilon: float = DEFAULT_EPSILON

    def __post_init__(self):
        if self.regime not in REGIMES:
            raise ValueError(f"unknown regime {self.regime!r}, want one of {REGIMES}")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.eval_every < 1:
            raise ValueError("eval_every must be >= 1")

    def to_dict(self) -> dict:
        return {
            "regime": self.regime, "epochs": self.epochs,
            "learning_rate": self.learning_rate,
            "weight_decay": self.weight_decay, "batch_size": self.batch_size,
            "seed": self.seed, "eval_every": self.eval_every,
            "keep_count": self.keep_count, "n_high": self.n_high,
            "rank_high": self.rank_high, "rank_low": self.rank_low,
            "importance_sample_size": self.importance_sample_size,
            "importance_epsilon": self.importance_epsilon,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**d)


@dataclass
class TrainReport:
    regime: str
    epochs: int
    step_count: int
    train_loss: list[float]
    eval_epochs: list[int]
    eval_accuracy: list[float]
    final_accuracy: float
    trainable_params: int
    total_params: int
    epoch_seconds: list[float] = field(default_factory=list)

    def to_dict(self, include_timing: bool = False) -> dict:
        d = {
            "regime": self.regime,
            "epochs": self.epochs,
            "step_count": self.step_count,
            "train_loss": self.train_loss,
            "eval_epochs": self.eval_epochs,
            "eval_accuracy": self.eval_accuracy,
            "final_accuracy": self.final_accuracy,
            "trainable_params": self.trainable_params,
            "total_params": self.total_params,
        }
        if include_timing:
            d["epoch_seconds"] = self.epoch_seconds
        return d

    def timing_dict(self) -> dict:
        secs = self.epoch_seconds
        return {
            "epoch_seconds": secs,
            "mean_epoch_seconds": float(np.mean(secs)) if secs else 0.0,
        }


def freeze_policy(
    weights: TransformerWeights,
    adapters: LoraAdapters | None,
    regime: str,
) -> list:
    """Set requires_grad over all tensors; returns the trainable list.

    Adapter regimes train every LayerNorm (embedding one included), all
    adapter matrices, and the classifier head; everything else is frozen.
    A frozen random classifier could not learn any task, so the head stays
    trainable in every regime.
    """
    if regime not in REGIMES:
        raise ValueError(f"unknown regime {regime!r}")
    if (adapters is None) == (regime != "full_finetune"):
        raise ValueError(f"regime {regime!r} and adapters presence disagree")

    if regime == "full_finetune":
        weights.set_requires_grad(True)
        return weights.all_tensors()

    weights.set_requires_grad(False)
    trainable = list(weights.layernorm_tensors())
    if weights.classifier_w is not None:
        trainable += [weights.classifier_w, weights.classifier_b]
    trainable += adapters.all_tensors()
    for t in trainable:
        t.requires_grad = True
    return trainable


class AdamW:
    """Adam with decoupled weight decay applied before the moment update."""

    def __init__(self, params, lr, weight_decay=0.0,
                 beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        self.lr = lr
        self.weight_decay = weight_decay
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self):
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad
            if g is None:
                continue
            if self.weight_decay:
                p.data -= self.lr * self.weight_decay * p.data
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            p.data -= self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)

    def zero_grad(self):
        for p in self.params:
            p.grad = None


def evaluate(
    weights: TransformerWeights,
    data: TokenBatch,
    adapters: LoraAdapters | None = None,
    batch_size: int = 32,
):
    """(accuracy, mean loss) over the dataset, no gradient recording."""
    correct = 0
    loss_sum = 0.0
    with ag.no_grad():
        for batch in batches(data, batch_size):
            logits = forward(weights, batch, adapters=adapters)
            pred = logits.data.argmax(axis=-1)
            correct += int((pred == batch.labels).sum())
            loss = ag.cross_entropy(logits, batch.labels)
            loss_sum += float(loss.data) * batch.size
    return correct / data.size, loss_sum / data.size


def predict(
    weights: TransformerWeights,
    data: TokenBatch,
    adapters: LoraAdapters | None = None,
    batch_size: int = 32,
) -> np.ndarray:
    """Logits over the dataset, no gradient recording."""
    outs = []
    with ag.no_grad():
        for batch in batches(data, batch_size):
            outs.append(forward(weights, batch, adapters=adapters).data)
    return np.concatenate(outs, axis=0)


def train(
    weights: TransformerWeights,
    config: TrainConfig,
    train_data: TokenBatch,
    eval_data: TokenBatch,
    adapters: LoraAdapters | None = None,
    log=print,
) -> TrainReport:
    """Run the training loop under the caller's freeze flags.

    Trainables are exactly the tensors whose requires_grad is set (see
    freeze_policy). Aborts with TrainingDiverged if the loss goes
    non-finite.
    """
    all_tensors = weights.all_tensors() + (adapters.all_tensors() if adapters else [])
    trainable = [t for t in all_tensors if t.requires_grad]
    opt = AdamW(trainable, lr=config.learning_rate,
                weight_decay=config.weight_decay)
    rng = np.random.default_rng(config.seed)

    eval_epochs, eval_acc = [0], []
    train_loss: list[float] = []
    epoch_seconds: list[float] = []
    steps = 0
    epoch = 0
    try:
        acc, _ = evaluate(weights, eval_data, adapters, config.batch_size)
        eval_acc.append(acc)
        if log:
            log(f"[{config.regime}] initial eval acc {acc:.4f}")

        for epoch in range(1, config.epochs + 1):
            t0 = time.perf_counter()
            perm = rng.permutation(train_data.size)
            shuffled = TokenBatch(
                train_data.token_ids[perm],
                train_data.attention_mask[perm],
                train_data.labels[perm],
            )
            losses = []
            for batch in batches(shuffled, config.batch_size):
                loss = ag.cross_entropy(
                    forward(weights, batch, adapters=adapters), batch.labels
                )
                ag.backward(loss)
                opt.step()
                opt.zero_grad()
                losses.append(float(loss.data))
                steps += 1
            epoch_seconds.append(time.perf_counter() - t0)
            train_loss.append(float(np.mean(losses)))
            if epoch % config.eval_every == 0 or epoch == config.epochs:
                acc, _ = evaluate(weights, eval_data, adapters,
                                  config.batch_size)
                eval_epochs.append(epoch)
                eval_acc.append(acc)
                if log:
                    log(f"[{config.regime}] epoch {epoch} "
                        f"loss {train_loss[-1]:.4f} eval acc {acc:.4f}")
    except ValueError as e:
        if "non-finite" in str(e):
            raise TrainingDiverged(
                f"model state went non-finite at epoch {epoch} step {steps}"
            ) from e
        raise

    return TrainReport(
        regime=config.regime,
        epochs=config.epochs,
        step_count=steps,
        train_loss=train_loss,
        eval_epochs=eval_epochs,
        eval_accuracy=eval_acc,
        final_accuracy=eval_acc[-1],
        trainable_params=sum(t.data.size for t in trainable),
        total_params=(weights.num_params()
                      + (adapters.num_params() if adapters else 0)),
        epoch_seconds=epoch_seconds,
    )


@dataclass
class RegimeArtifacts:
    weights: TransformerWeights
    adapters: LoraAdapters | None
    importance_map: ImportanceMap | None
    prune_plan: PrunePlan | None
    rank_plan: RankPlan | None


def run_regime(
    model_config: ModelConfig,
    config: TrainConfig,
    train_data: TokenBatch,
    eval_data: TokenBatch,
    log=print,
):
    """Build the regime's model state, train it, return (report, artifacts).

    prune_lora: importance -> select heads -> slice prune -> rank plan ->
    inject adapters -> train. lora: same without the pruning step.
    """
    weights = init_weights(model_config, seed=config.seed)
    imap = prune_plan = rank_plan = adapters = None

    if config.regime in ("lora", "prune_lora"):
        sample = train_data.slice(
            0, min(config.importance_sample_size, train_data.size)
        )
        imap = estimate_importance(
            weights, sample, batch_size=config.batch_size,
            epsilon=config.importance_epsilon,
        )
        if config.regime == "prune_lora":
            total = model_config.num_layers * model_config.num_heads
            keep = config.keep_count if config.keep_count is not None else total
            prune_plan = select_heads(imap, keep)
            weights = apply_slice_prune(weights, prune_plan)
        rank_plan = make_rank_plan(
            block_importance(imap), config.n_high,
            config.rank_high, config.rank_low,
        )
        adapters = init_adapters(weights, rank_plan, seed=config.seed)

    freeze_policy(weights, adapters, config.regime)
    report = train(weights, config, train_data, eval_data, adapters, log=log)
    return report, RegimeArtifacts(
        weights=weights,
        adapters=adapters,
        importance_map=imap,
        prune_plan=prune_plan,
        rank_plan=rank_plan,
    )
