"""Command-line surface: importance | prune | train | merge | eval | report.

One flat JSON config file drives every command; --seed and --out override
its seed and output directory. All outputs are deterministic functions of
the config (timing sidecars excepted, and marked as such by filename).
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import dataclass
from pathlib import Path


from . import accounting, checkpoint, importance, lora, pruning, training
from .data import SyntheticTaskSpec, generate, ingest_tsv, save_vocab
from .model import ModelConfig, init_weights
from .training import TrainConfig

MODEL_PRESETS = {
    "toy": ModelConfig.toy,
    "reference": ModelConfig.reference,
}


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    seed: int
    model: ModelConfig
    task: SyntheticTaskSpec | None
    tsv_train: str | None
    tsv_eval: str | None
    importance_sample_size: int
    importance_batch_size: int
    importance_epsilon: float
    keep_count: int | None
    n_high: int
    rank_high: int
    rank_low: int
    train: TrainConfig
    out_dir: str | None


def _model_from_config(raw: dict | str | None) -> ModelConfig:
    if raw is None:
        return ModelConfig.toy()
    if isinstance(raw, str):
        raw = {"preset": raw}
    raw = dict(raw)
    preset = raw.pop("preset", None)
    if preset is not None:
        if preset not in MODEL_PRESETS:
            raise ConfigError(f"unknown model preset {preset!r}")
        return MODEL_PRESETS[preset](**raw)
    return ModelConfig(**raw)


def load_run_config(path, seed_override=None, out_override=None) -> RunConfig:
    try:
        with open(path, encoding="utf-8") as f:
            raw = json.load(f)
    except (OSError, json.JSONDecodeError) as e:
        raise ConfigError(f"cannot read config {path}: {e}")

    seed = int(raw.get("seed", 0)) if seed_override is None else int(seed_override)
    model = _model_from_config(raw.get("model"))

    task = None
    tsv_train = tsv_eval = None
    if "task" in raw and raw["task"] is not None:
        tdict = dict(raw["task"])
        tdict.setdefault("seed", seed)
        tdict.setdefault("vocab_size", model.vocab_size)
        tdict.setdefault("num_classes", model.num_classes)
        task = SyntheticTaskSpec(**tdict)
        if task.vocab_size > model.vocab_size:
            raise ConfigError("task vocab_size exceeds model vocab_size")
    elif "tsv" in raw and raw["tsv"] is not None:
        tsv_train = raw["tsv"].get("train")
        tsv_eval = raw["tsv"].get("eval")
        if not tsv_train or not tsv_eval:
            raise ConfigError("tsv config needs both 'train' and 'eval' paths")
        for p in (tsv_train, tsv_eval):
            if not Path(p).exists():
                raise ConfigError(f"tsv file does not exist: {p}")
    # data-less configs are fine for report/prune/merge

    imp = raw.get("importance", {})
    prune_raw = raw.get("prune", {})
    rank = raw.get("rank", {})
    tr = dict(raw.get("train", {}))
    tr.setdefault("seed", seed)
    # prune/rank/importance knobs live in their own sections
    for key in ("keep_count", "n_high", "rank_high", "rank_low",
                "importance_sample_size", "importance_epsilon"):
        tr.pop(key, None)
    keep_count = prune_raw.get("keep_count")
    train_cfg = TrainConfig(
        keep_count=keep_count,
        n_high=int(rank.get("n_high", 4)),
        rank_high=int(rank.get("rank_high", 8)),
        rank_low=int(rank.get("rank_low", 4)),
        importance_sample_size=int(
            imp.get("sample_size", importance.DEFAULT_SAMPLE_SIZE)
        ),
        importance_epsilon=float(imp.get("epsilon", importance.DEFAULT_EPSILON)),
        **tr,
    )
    return RunConfig(
        seed=seed,
        model=model,
        task=task,
        tsv_train=tsv_train,
        tsv_eval=tsv_eval,
        importance_sample_size=train_cfg.importance_sample_size,
        importance_batch_size=int(imp.get("batch_size", 32)),
        importance_epsilon=train_cfg.importance_epsilon,
        keep_count=keep_count,
        n_high=train_cfg.n_high,
        rank_high=train_cfg.rank_high,
        rank_low=train_cfg.rank_low,
        train=train_cfg,
        out_dir=out_override or raw.get("out_dir"),
    )


def load_datasets(rc: RunConfig, out_dir: Path | None = None):
    """(train, eval) TokenBatches from the task spec or TSV files."""
    if rc.task is None and rc.tsv_train is None:
        raise ConfigError("config needs either a 'task' or a 'tsv' section")
    if rc.task is not None:
        return generate(rc.task)
    train, vocab = ingest_tsv(rc.tsv_train, max_len=rc.model.max_positions)
    eval_, _ = ingest_tsv(rc.tsv_eval, vocab=vocab, max_len=rc.model.max_positions)
    if train.token_ids.max() >= rc.model.vocab_size:
        raise ConfigError(
            f"TSV vocabulary ({int(train.token_ids.max()) + 1} ids) exceeds "
            f"model vocab_size {rc.model.vocab_size}"
        )
    if out_dir is not None:
        save_vocab(out_dir / "vocab.tsv", vocab)
    return train, eval_


def _write_json(path, obj) -> None:
    with open(path, "w", encoding="utf-8") as f:
        json.dump(obj, f, sort_keys=True, indent=2)
        f.write("\n")


def _outdir(args, rc: RunConfig | None = None) -> Path:
    out = args.out or (rc.out_dir if rc else None)
    if not out:
        raise ConfigError("no output directory: pass --out or set out_dir")
    path = Path(out)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _load_model_checkpoint(path):
    weights, manifest = checkpoint.load_model(path)
    return weights, manifest, checkpoint.file_digest(path)


# ---------------------------------------------------------------------------
# commands


def cmd_importance(args) -> int:
    rc = load_run_config(args.config, args.seed, args.out)
    out = _outdir(args, rc)
    if args.checkpoint:
        weights, _, model_digest = _load_model_checkpoint(args.checkpoint)
    else:
        weights = init_weights(rc.model, seed=rc.seed)
        ckpt_path = out / "model.ckpt"
        checkpoint.save_model(ckpt_path, weights)
        model_digest = checkpoint.file_digest(ckpt_path)
    train_data, _ = load_datasets(rc, out)
    sample = train_data.slice(0, min(rc.importance_sample_size, train_data.size))

    imap = importance.estimate_importance(
        weights, sample,
        batch_size=rc.importance_batch_size,
        epsilon=rc.importance_epsilon,
    )
    importance.export_importance(imap, out / "importance.csv", out / "importance.ppm")
    with open(out / "importance_raw.csv", "w", encoding="utf-8") as f:
        f.write(importance.matrix_to_csv(imap.raw))
    _write_json(out / "importance_meta.json", {
        "digest": imap.digest(),
        "model_digest": model_digest,
        "token_count": imap.token_count,
        "sample_size": imap.sample_size,
        "epsilon": imap.epsilon,
        "shape": list(imap.shape),
    })
    print(f"importance map written to {out / 'importance.csv'} "
          f"(sample {imap.sample_size}, tokens {imap.token_count})")
    return 0


def cmd_prune(args) -> int:
    rc = load_run_config(args.config, args.seed, args.out)
    out = _outdir(args, rc)
    if rc.keep_count is None:
        raise ConfigError("config has no prune.keep_count")
    weights, _, model_digest = _load_model_checkpoint(args.checkpoint)

    imp_csv = Path(args.importance)
    meta_path = imp_csv.with_name("importance_meta.json")
    if not meta_path.exists():
        raise ConfigError(f"missing metadata next to importance map: {meta_path}")
    with open(meta_path, encoding="utf-8") as f:
        meta = json.load(f)
    if meta.get("model_digest") != model_digest:
        print(
            f"error: stale importance map: computed from model "
            f"{meta.get('model_digest', '?')[:12]}..., got {model_digest[:12]}...",
            file=sys.stderr,
        )
        return 2
    final = importance.import_importance_csv(imp_csv)
    digest = meta.get("digest", "")

    plan = pruning.select_heads(final, rc.keep_count, digest=digest)
    pruned = pruning.apply_slice_prune(weights, plan)
    checkpoint.save_model(out / "pruned.ckpt", pruned)
    plan.save(out / "prune_plan.json")
    print(f"kept {plan.keep_count} heads "
          f"({plan.pruned_count()} pruned) -> {out / 'pruned.ckpt'}")
    return 0


def cmd_train(args) -> int:
    rc = load_run_config(args.config, args.seed, args.out)
    out = _outdir(args, rc)
    train_data, eval_data = load_datasets(rc, out)

    report, art = training.run_regime(rc.model, rc.train, train_data, eval_data)

    checkpoint.save_model(out / "model.ckpt", art.weights)
    if art.adapters is not None:
        lora.save_adapters(out / "adapters.ckpt", art.adapters)
    if art.importance_map is not None:
        importance.export_importance(
            art.importance_map, out / "importance.csv", out / "importance.ppm"
        )
        _write_json(out / "importance_meta.json", {
            "digest": art.importance_map.digest(),
            "token_count": art.importance_map.token_count,
            "sample_size": art.importance_map.sample_size,
            "epsilon": art.importance_map.epsilon,
            "shape": list(art.importance_map.shape),
        })
    if art.prune_plan is not None:
        art.prune_plan.save(out / "prune_plan.json")
    if art.rank_plan is not None:
        art.rank_plan.save(out / "rank_plan.json")
    _write_json(out / "report.json", report.to_dict(include_timing=False))
    _write_json(out / "report_timing.json", report.timing_dict())
    print(f"final eval accuracy {report.final_accuracy:.4f} "
          f"({report.trainable_params} trainable of {report.total_params})")
    return 0


def cmd_merge(args) -> int:
    base, manifest, _ = _load_model_checkpoint(args.base)
    if manifest.get("merged_adapters"):
        print("error: base checkpoint already has adapters merged in; "
              "merging twice would double the delta", file=sys.stderr)
        return 2
    adapters = lora.load_adapters(args.adapters, weights=base)
    merged = lora.merge_adapters(base, adapters)
    out_path = Path(args.out)
    if out_path.suffix != ".ckpt":
        out_path.mkdir(parents=True, exist_ok=True)
        out_path = out_path / "merged.ckpt"
    checkpoint.save_model(out_path, merged, merged_adapters=True)
    print(f"merged checkpoint -> {out_path}")
    return 0


def cmd_eval(args) -> int:
    rc = load_run_config(args.config, args.seed, args.out)
    out = _outdir(args, rc)
    weights, _, _ = _load_model_checkpoint(args.checkpoint)
    adapters = None
    if args.adapters:
        adapters = lora.load_adapters(args.adapters, weights=weights)
    _, eval_data = load_datasets(rc)

    acc, loss = training.evaluate(weights, eval_data, adapters,
                                  rc.train.batch_size)
    _write_json(out / "eval.json", {
        "accuracy": acc, "loss": loss, "examples": eval_data.size,
    })
    if args.dump_logits:
        logits = training.predict(weights, eval_data, adapters,
                                  rc.train.batch_size)
        with open(args.dump_logits, "w", encoding="utf-8") as f:
            f.write(importance.matrix_to_csv(logits))
    print(f"eval accuracy {acc:.4f} loss {loss:.4f} on {eval_data.size} examples")
    return 0


def cmd_report(args) -> int:
    rc = load_run_config(args.config, args.seed, args.out)
    out = _outdir(args, rc)
    cfg = rc.model
    notes: list[str] = []
    payload: dict = {"model": cfg.to_dict()}
    rows = []
    # comparison figures only make sense on the geometry they were
    # reported for
    is_reference = cfg.to_dict() | {"num_classes": 0} == \
        ModelConfig.reference().to_dict()

    full = accounting.count_params(cfg)
    payload["full_finetune"] = full.to_dict()
    rows.append(("full_finetune", full))

    if rc.n_high <= cfg.num_layers:
        # which blocks carry the high rank doesn't change the count
        ranks = [rc.rank_high] * rc.n_high + \
            [rc.rank_low] * (cfg.num_layers - rc.n_high)
        adapter_rep = accounting.count_params(cfg, rank_plan=ranks)
        payload["lora"] = adapter_rep.to_dict()
        rows.append(("lora", adapter_rep))
        note = (
            f"lora trainable (ranks {rc.rank_high}x{rc.n_high}/{rc.rank_low}"
            f"x{cfg.num_layers - rc.n_high} on q,k,v,o + layernorms + head): "
            f"{adapter_rep.trainable_params:,}"
        )
        if is_reference:
            note += (
                f" (reported for this setup: "
                f"{accounting.REPORTED_LORA_TRAINABLE} lora, "
                f"{accounting.REPORTED_PRUNE_LORA_TRAINABLE} prune-lora; "
                f"the formula output is the exact count, the reported "
                f"figures are not derivable from it)"
            )
        notes.append(note)

    if rc.keep_count is not None:
        pruned = accounting.count_params(cfg, prune_plan=rc.keep_count)
        payload["pruned"] = pruned.to_dict()
        rows.append(("pruned", pruned))
        removed = cfg.num_layers * cfg.num_heads - rc.keep_count
        note = (
            f"pruned total {pruned.total_params:,} = {full.total_params:,} - "
            f"{removed} heads x {accounting.per_head_params(cfg):,} params"
        )
        if is_reference:
            note += (
                f"; reported for this setup: "
                f"{accounting.REPORTED_PRUNED_PARAMS} (~0.47M above the "
                f"slicing arithmetic; difference reported, not reconciled)"
            )
        notes.append(note)

    checkpoints = [] if args.dry_run else (args.checkpoint or [])
    for ckpt_path in checkpoints:
        weights, manifest, _ = _load_model_checkpoint(ckpt_path)
        walked = weights.num_params()
        rep = accounting.count_params(
            weights.config,
            prune_plan=[len(k) for k in weights.head_index_map],
        )
        if rep.total_params != walked:
            raise RuntimeError(
                f"{ckpt_path}: closed-form {rep.total_params} != tensor walk {walked}"
            )
        rows.append((Path(ckpt_path).name, rep))
        payload[Path(ckpt_path).name] = rep.to_dict()

    payload["reported_reference"] = {
        "full_params": accounting.REPORTED_FULL_PARAMS,
        "pruned_params": accounting.REPORTED_PRUNED_PARAMS,
        "lora_trainable": accounting.REPORTED_LORA_TRAINABLE,
        "prune_lora_trainable": accounting.REPORTED_PRUNE_LORA_TRAINABLE,
        "full_memory_mb": accounting.REPORTED_FULL_MEMORY_MB,
    }
    payload["notes"] = notes

    table = accounting.format_report_table(rows)
    _write_json(out / "params_report.json", payload)
    with open(out / "params_table.txt", "w", encoding="utf-8") as f:
        f.write(table)
        for note in notes:
            f.write(f"note: {note}\n")
    print(table, end="")
    headline = f"total parameters: {full.total_params:,}"
    if is_reference:
        headline += f" (reported: {accounting.REPORTED_FULL_PARAMS})"
    print(headline)
    for note in notes:
        print(f"note: {note}")
    return 0


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="prunelora",
        description="Head-importance pruning + rank-varied adapters, end to end",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", required=True, help="run config JSON")
        p.add_argument("--out", help="output directory (overrides config)")
        p.add_argument("--seed", type=int, help="seed override")

    p = sub.add_parser("importance", help="estimate the per-head importance map")
    common(p)
    p.add_argument("--checkpoint", help="model checkpoint (default: fresh init)")
    p.set_defaults(func=cmd_importance)

    p = sub.add_parser("prune", help="slice-prune a checkpoint from an importance map")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--importance", required=True, help="importance.csv path")
    p.set_defaults(func=cmd_prune)

    p = sub.add_parser("train", help="run a training regime end to end")
    common(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("merge", help="fold adapters into a base checkpoint")
    p.add_argument("--base", required=True)
    p.add_argument("--adapters", required=True)
    p.add_argument("--out", required=True, help="output checkpoint path or dir")
    p.set_defaults(func=cmd_merge)

    p = sub.add_parser("eval", help="evaluate a checkpoint on the eval split")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--adapters")
    p.add_argument("--dump-logits", help="also write eval logits as CSV")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("report", help="parameter/FLOPs/memory accounting")
    common(p)
    p.add_argument("--checkpoint", action="append",
                   help="also report a materialized checkpoint (repeatable)")
    p.add_argument("--dry-run", action="store_true",
                   help="counts only; never materializes weights")
    p.set_defaults(func=cmd_report)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, checkpoint.CheckpointError, ValueError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except training.TrainingDiverged as e:
        print(f"error: {e}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
