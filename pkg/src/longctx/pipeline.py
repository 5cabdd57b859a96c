"""End-to-end pipelines behind the CLI. Every step reads and writes files
only, so steps compose across separate processes."""

from __future__ import annotations

import json
import logging
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint, seed_child
from .config import ExperimentConfig, dump_config
from .data import Vocab, build_vocab, load_corpus
from .distill import distill, eval_distill_mse, merge_checkpoints, progressive_distill
from .harness import (
    RunResult,
    TaskSpec,
    emit_report,
    finetune,
    load_task_data,
    multi_seed,
    truncation_ablation,
    write_report,
)
from .model import init_weights
from .packing import Pack
from .train import docs_from_texts, make_packs, pretrain

log = logging.getLogger(__name__)


class PipelineError(RuntimeError):
    pass


def checkpoint_vocab(ckpt: Checkpoint) -> Vocab:
    tokens = ckpt.metadata.get("vocab")
    if not tokens:
        raise PipelineError("checkpoint carries no vocabulary")
    return Vocab(list(tokens))


def corpus_packs(cfg: ExperimentConfig, vocab: Optional[Vocab] = None) -> tuple[list[Pack], Vocab]:
    if cfg.corpus is None:
        raise PipelineError("config has no corpus")
    corpus = load_corpus(cfg.corpus)
    if corpus.skipped:
        log.warning("skipped %d malformed corpus lines", corpus.skipped)
    if vocab is None:
        vocab = build_vocab((d.text for d in corpus.docs), cfg.model.vocab_size)
    docs = docs_from_texts([(d.id, d.text) for d in corpus.docs], vocab)
    return make_packs(docs, cfg.packing), vocab


def write_provenance(cfg: ExperimentConfig, out: Path) -> None:
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.normalized.yaml").write_text(dump_config(cfg), encoding="utf-8")


def run_pretrain(cfg: ExperimentConfig, init: Optional[str | Path] = None) -> Path:
    """Pretrain per the stage plan, merge the selected epochs, and return the
    path of the final checkpoint (``<output_dir>/pretrain/final.ckpt``)."""
    out = Path(cfg.output_dir) / "pretrain"
    write_provenance(cfg, out)
    if init is not None:
        start = load_checkpoint(init)
        weights, model = start.weights, start.config
        vocab = checkpoint_vocab(start) if start.metadata.get("vocab") else None
    else:
        model = cfg.model
        weights = init_weights(model, seed_child(cfg.seed, "init"))
        vocab = None
    packs, vocab = corpus_packs(cfg, vocab)
    if len(vocab) > model.vocab_size:
        raise PipelineError(f"vocabulary of {len(vocab)} exceeds the model's {model.vocab_size} rows")
    result = pretrain(weights, model, packs, cfg.plan, cfg.masking, cfg.optim, cfg.seed, out, vocab)

    meta = {"stage": "final", "seed": cfg.seed, "vocab": vocab.tokens}
    if cfg.merge.epochs:
        chosen = [
            c for c in result.checkpoints
            if c.metadata.get("stage") == cfg.merge.stage and c.metadata.get("epoch") in cfg.merge.epochs
        ]
        merged = merge_checkpoints([c.weights for c in chosen])
        meta["merged_from"] = [f"{cfg.merge.stage}_epoch{e}" for e in cfg.merge.epochs]
        return save_checkpoint(merged, model, out / "final.ckpt", meta)
    return save_checkpoint(result.weights, model, out / "final.ckpt", meta)


def run_distill(cfg: ExperimentConfig, teacher_path: str | Path) -> Path:
    """Distill along ``cfg.distill_chain``; returns the final student path."""
    out = Path(cfg.output_dir) / "distill"
    write_provenance(cfg, out)
    teacher = load_checkpoint(teacher_path)
    vocab = checkpoint_vocab(teacher)
    packs, _ = corpus_packs(cfg, vocab)
    seed = seed_child(cfg.seed, "distill")
    if len(cfg.distill_chain) > 1:
        res = progressive_distill(teacher.weights, teacher.config, packs, cfg.distill_chain, cfg.distill, seed, out)
        final = res.final
    else:
        final = distill(teacher.weights, teacher.config, packs, cfg.distill, seed, out_dir=out,
                        label=f"distill_{cfg.distill.student_layers}L")
    mse = eval_distill_mse(final.weights, final.config, teacher.weights, teacher.config, packs)
    meta = {"stage": "distilled", "seed": cfg.seed, "vocab": vocab.tokens,
            "chain": list(cfg.distill_chain), "hidden_mse": mse}
    return save_checkpoint(final.weights, final.config, out / "student.ckpt", meta)


def _task_data(task: TaskSpec, ckpt: Checkpoint):
    vocab = checkpoint_vocab(ckpt) if task.synthetic is None else None
    return load_task_data(task, vocab)


def select_task(cfg: ExperimentConfig, name: Optional[str]) -> TaskSpec:
    if not cfg.tasks:
        raise PipelineError("config defines no tasks")
    if name is None:
        if len(cfg.tasks) > 1:
            raise PipelineError("several tasks configured; choose one with --task")
        return cfg.tasks[0]
    for t in cfg.tasks:
        if t.name == name:
            return t
    raise PipelineError(f"no task named {name!r}")


def run_finetune(
    cfg: ExperimentConfig, ckpt_path: str | Path, task_name: Optional[str] = None,
    seed: Optional[int] = None,
) -> Path:
    """One fine-tuning run; writes the tuned checkpoint and test predictions."""
    task = select_task(cfg, task_name)
    seed = cfg.finetune.seeds[0] if seed is None else seed
    out = Path(cfg.output_dir) / "finetune" / f"{task.name}_seed{seed}"
    write_provenance(cfg, out)
    ckpt = load_checkpoint(ckpt_path)
    data = _task_data(task, ckpt)
    res = finetune(ckpt.weights, ckpt.config, task, data, cfg.finetune, seed)
    meta = {**ckpt.metadata, "task": task.name, "seed": seed, "best_epoch": res.best_epoch,
            "val_scores": res.val_scores, "test_score": res.test_score}
    save_checkpoint(res.weights, ckpt.config, out / "model.ckpt", meta)
    with open(out / "predictions.tsv", "w", encoding="utf-8") as fh:
        for p in res.test_predictions:
            fh.write(json.dumps(np.asarray(p).tolist()) + "\n")
    (out / "score.json").write_text(
        json.dumps({"task": task.name, "metric": task.metric, "seed": seed, "test_score": res.test_score}),
        encoding="utf-8",
    )
    return out


def run_eval(
    cfg: ExperimentConfig,
    ckpt_paths: Sequence[str | Path],
    limits: Optional[Sequence[int]] = None,
    model_names: Optional[Sequence[str]] = None,
) -> tuple[list[RunResult], str]:
    """Multi-seed scores for every task and checkpoint; optionally a
    truncation ablation per context limit. Writes ``report.txt/csv``."""
    out = Path(cfg.output_dir) / "eval"
    write_provenance(cfg, out)
    names = list(model_names) if model_names else [Path(p).name.removesuffix(".ckpt") for p in ckpt_paths]
    results: list[RunResult] = []
    for name, path in zip(names, ckpt_paths):
        ckpt = load_checkpoint(path)
        for task in cfg.tasks:
            data = _task_data(task, ckpt)
            if limits:
                results += truncation_ablation(ckpt.weights, ckpt.config, task, data, limits, cfg.finetune, name)
            else:
                results.append(multi_seed(ckpt.weights, ckpt.config, task, data, cfg.finetune, name))
    if not results:
        raise PipelineError("nothing evaluated; config defines no tasks")
    write_report(results, out)
    return results, emit_report(results, "text")
