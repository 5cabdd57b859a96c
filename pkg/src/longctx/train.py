"""MLM pretraining over packed, whole-word-masked batches, run as a plan of
stages (e.g. position-table adaptation, then full training)."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .autograd import backward
from .checkpoint import Checkpoint, save_checkpoint, seed_child
from .data import IGNORE_INDEX, Vocab, tokenize, wwm_mask
from .model import EncoderConfig, Weights, forward, mlm_logits
from .optim import AdamWState, ScheduleSpec, adamw_step, freeze_set, lr_at
from .packing import Document, Pack, collate, pack_documents

log = logging.getLogger(__name__)

# freezes every parameter except the position table
ONLY_POSITIONS = r"(?!position_embedding$).*"


@dataclass
class PackingConfig:
    max_len: int = 128
    policy: str = "first_fit"
    truncation: str = "split"
    reset_positions: bool = True
    mode: str = "block_diagonal"


@dataclass
class MaskingConfig:
    rate: float = 0.20
    mask_prob: float = 0.8
    random_prob: float = 0.1


@dataclass
class Stage:
    name: str
    epochs: int = 1
    freeze: Optional[str] = None  # regex over parameter names
    peak_lr: float = 2e-4
    warmup_steps: int = 50
    end_lr: float = 0.0
    power: float = 1.0
    max_steps: Optional[int] = None  # per epoch cap, for short runs
    # only update position rows at or above this index (None: whole table)
    position_rows_from: Optional[int] = None


@dataclass
class StagePlan:
    stages: list[Stage]

    def __post_init__(self):
        if not self.stages:
            raise ValueError("a stage plan needs at least one stage")


@dataclass
class OptimConfig:
    batch_size: int = 8
    betas: tuple[float, float] = (0.9, 0.98)
    eps: float = 1e-6
    weight_decay: float = 0.01


class TrainingError(RuntimeError):
    def __init__(self, message: str, step: int, last_good: Optional[Checkpoint] = None):
        super().__init__(f"{message} (step {step})")
        self.step = step
        self.last_good = last_good


@dataclass
class TrainResult:
    weights: Weights
    config: EncoderConfig
    checkpoints: list[Checkpoint] = field(default_factory=list)
    log: list[dict] = field(default_factory=list)


def docs_from_texts(texts: Sequence[tuple[str, str]], vocab: Vocab) -> list[Document]:
    """Tokenize (id, text) pairs into packable documents, dropping empties."""
    docs = []
    for doc_id, text in texts:
        tok = tokenize(text, vocab)
        if len(tok):
            docs.append(Document(doc_id, tok.ids, tok.word_ids))
    return docs


def make_packs(docs: Sequence[Document], cfg: PackingConfig) -> list[Pack]:
    return pack_documents(
        docs, cfg.max_len, cfg.policy, cfg.truncation, cfg.reset_positions, cfg.mode
    )


def batches(n: int, batch_size: int, seed: int, label: str) -> list[np.ndarray]:
    order = np.random.default_rng(seed_child(seed, label)).permutation(n)
    return [order[i:i + batch_size] for i in range(0, n, batch_size)]


def mlm_loss(
    weights: Weights,
    config: EncoderConfig,
    tokens: torch.Tensor,
    positions: torch.Tensor,
    masks: torch.Tensor,
    labels: torch.Tensor,
) -> Optional[torch.Tensor]:
    """Mean cross-entropy over labeled positions; None if nothing is labeled."""
    selected = labels != IGNORE_INDEX
    if not bool(selected.any()):
        return None
    out = forward(weights, config, tokens, positions, masks)
    logits = mlm_logits(weights, config, out.last_hidden[selected])
    return F.cross_entropy(logits, labels[selected])


def masked_batch(
    packs: Sequence[Pack], masking: MaskingConfig, rng: np.random.Generator, vocab_size: int,
    dtype=torch.float32,
):
    tokens, positions, masks = collate(packs, dtype)
    mb = wwm_mask(
        [p.tokens for p in packs], [p.word_ids for p in packs], masking.rate, rng,
        vocab_size, masking.mask_prob, masking.random_prob,
    )
    return (
        torch.from_numpy(mb.input_ids), positions, masks, torch.from_numpy(mb.labels)
    )


def trainable_copy(weights: Weights) -> Weights:
    return {k: v.detach().clone() for k, v in weights.items()}


def optimizer_step(
    weights: Weights,
    loss: torch.Tensor,
    state: AdamWState,
    lr: float,
    frozen: set[str],
    row_masks: Optional[dict[str, torch.Tensor]] = None,
) -> None:
    for name, t in weights.items():
        t.requires_grad_(name not in frozen)
        t.grad = None
    backward(loss)
    grads = {n: t.grad for n, t in weights.items() if n not in frozen}
    adamw_step(weights, grads, state, lr, frozen, row_masks)
    for t in weights.values():
        t.grad = None


def snapshot(weights: Weights, config: EncoderConfig, **metadata) -> Checkpoint:
    return Checkpoint({k: v.detach().clone() for k, v in weights.items()}, config, metadata)


def _append_log(path: Optional[Path], record: dict) -> None:
    if path is not None:
        with open(path, "a", encoding="utf-8") as fh:
            fh.write(json.dumps(record) + "\n")


def pretrain(
    weights: Weights,
    config: EncoderConfig,
    packs: Sequence[Pack],
    plan: StagePlan,
    masking: MaskingConfig = MaskingConfig(),
    optim: OptimConfig = OptimConfig(),
    seed: int = 0,
    out_dir: Optional[str | Path] = None,
    vocab: Optional[Vocab] = None,
) -> TrainResult:
    """Run every stage of ``plan`` over ``packs``; checkpoint at each epoch end.

    The learning-rate schedule restarts at the start of every stage. Input
    weights are not modified.
    """
    if not packs:
        raise ValueError("pretraining needs a non-empty corpus")
    if any(p.word_ids is None for p in packs):
        raise ValueError("packs must carry word ids for whole-word masking")
    weights = trainable_copy(weights)
    out = Path(out_dir) if out_dir is not None else None
    log_path = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        log_path = out / "loss_log.jsonl"
        log_path.write_text("")
    result = TrainResult(weights, config)
    extra_meta = {"vocab": vocab.tokens} if vocab is not None else {}
    global_step = 0
    last_good = snapshot(weights, config, stage="init")

    for si, stage in enumerate(plan.stages):
        frozen = freeze_set(weights.keys(), stage.freeze)
        row_masks = None
        if stage.position_rows_from is not None:
            rows = torch.arange(config.max_positions) >= stage.position_rows_from
            row_masks = {"position_embedding": rows}
        n_batches = math.ceil(len(packs) / optim.batch_size)
        per_epoch = n_batches if stage.max_steps is None else min(n_batches, stage.max_steps)
        schedule = ScheduleSpec(
            stage.peak_lr, min(stage.warmup_steps, per_epoch * stage.epochs),
            per_epoch * stage.epochs, stage.end_lr, stage.power,
        )
        state = AdamWState(optim.betas, optim.eps, optim.weight_decay)
        step = 0
        for epoch in range(1, stage.epochs + 1):
            plan_batches = batches(len(packs), optim.batch_size, seed, f"{stage.name}/{epoch}/order")
            for b, idx in enumerate(plan_batches[:per_epoch]):
                rng = np.random.default_rng(seed_child(seed, f"{stage.name}/{epoch}/{b}/mask"))
                tokens, positions, masks, labels = masked_batch(
                    [packs[i] for i in idx], masking, rng, config.vocab_size,
                    weights["token_embedding"].dtype,
                )
                lr = lr_at(step, schedule)
                for name, t in weights.items():
                    t.requires_grad_(name not in frozen)
                loss = mlm_loss(weights, config, tokens, positions, masks, labels)
                step += 1
                global_step += 1
                if loss is None:
                    continue
                if not bool(torch.isfinite(loss)):
                    raise TrainingError("non-finite loss", global_step, last_good)
                optimizer_step(weights, loss, state, lr, frozen, row_masks)
                record = {
                    "step": global_step, "stage": stage.name, "epoch": epoch,
                    "lr": lr, "loss": loss.item(),
                }
                result.log.append(record)
                _append_log(log_path, record)
            ckpt = snapshot(
                weights, config, stage=stage.name, stage_index=si, epoch=epoch,
                global_step=global_step, seed=seed, **extra_meta,
            )
            last_good = ckpt
            result.checkpoints.append(ckpt)
            if out is not None:
                save_checkpoint(ckpt.weights, config, out / f"{stage.name}_epoch{epoch}.ckpt", ckpt.metadata)
            log.info("stage %s epoch %d done at step %d", stage.name, epoch, global_step)

    for t in weights.values():
        t.requires_grad_(False)
    return result


def evaluate_mlm(
    weights: Weights,
    config: EncoderConfig,
    packs: Sequence[Pack],
    masking: MaskingConfig = MaskingConfig(),
    seed: int = 0,
    batch_size: int = 16,
) -> float:
    """Token-weighted mean MLM loss over ``packs`` with a fixed masking draw."""
    total, count = 0.0, 0
    dtype = weights["token_embedding"].dtype
    with torch.no_grad():
        for b in range(0, len(packs), batch_size):
            rng = np.random.default_rng(seed_child(seed, f"eval/{b}"))
            tokens, positions, masks, labels = masked_batch(
                packs[b:b + batch_size], masking, rng, config.vocab_size, dtype
            )
            n = int((labels != IGNORE_INDEX).sum())
            loss = mlm_loss(weights, config, tokens, positions, masks, labels)
            if loss is not None:
                total += float(loss) * n
                count += n
    return total / max(count, 1)
