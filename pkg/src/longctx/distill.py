"""Checkpoint merging and layer-drop distillation on final hidden states."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch

from .checkpoint import save_checkpoint, seed_child
from .model import EncoderConfig, Weights, forward, slice_layers
from .optim import AdamWState, ScheduleSpec, lr_at
from .packing import Pack, collate, non_pad_mask
from .train import (
    MaskingConfig,
    TrainResult,
    _append_log,
    batches,
    masked_batch,
    optimizer_step,
    snapshot,
    trainable_copy,
)


class MergeError(ValueError):
    pass


def merge_checkpoints(
    checkpoints: Sequence[Weights], weights: Optional[Sequence[float]] = None
) -> Weights:
    """Parameter-wise weighted mean of checkpoints (uniform by default).

    Each element is the correctly rounded float64 mean, cast to the dtype of
    the first checkpoint, so merging identical checkpoints is exact.
    """
    if not checkpoints:
        raise MergeError("need at least one checkpoint")
    n = len(checkpoints)
    if weights is None:
        weights = [1.0 / n] * n
    if len(weights) != n:
        raise MergeError(f"{len(weights)} merge weights for {n} checkpoints")
    if any(w < 0 for w in weights) or not math.isclose(sum(weights), 1.0, rel_tol=0, abs_tol=1e-9):
        raise MergeError("merge weights must be non-negative and sum to 1")
    first = checkpoints[0]
    for k, ck in enumerate(checkpoints[1:], start=1):
        for name in first:
            if name not in ck:
                raise MergeError(f"checkpoint {k} lacks tensor {name}")
            if ck[name].shape != first[name].shape:
                raise MergeError(
                    f"tensor {name}: shape {tuple(ck[name].shape)} in checkpoint {k} "
                    f"vs {tuple(first[name].shape)}"
                )
        extra = set(ck) - set(first)
        if extra:
            raise MergeError(f"checkpoint {k} has extra tensor {sorted(extra)[0]}")
    merged: Weights = {}
    for name, ref in first.items():
        arrays = [ck[name].detach().to(torch.float64).numpy() for ck in checkpoints]
        mean = weighted_sum(arrays, list(weights))
        merged[name] = torch.from_numpy(mean).to(ref.dtype)
    return merged


def _two_sum(a, b):
    s = a + b
    bb = s - a
    return s, (a - (s - bb)) + (b - bb)


def _split(a):
    c = 134217729.0 * a  # 2**27 + 1
    hi = c - (c - a)
    return hi, a - hi


def _two_prod(a, b):
    p = a * b
    ah, al = _split(a)
    bh, bl = _split(b)
    return p, ((ah * bh - p) + ah * bl + al * bh) + al * bl


def weighted_sum(arrays: Sequence[np.ndarray], coeffs: Sequence[float]) -> np.ndarray:
    """Correctly rounded float64 value of sum_i coeffs[i] * arrays[i].

    Products are split exactly into two floats and summed in double-double.
    Elements where that is not exact (near overflow or underflow) or whose
    result lands next to a rounding midpoint are redone in rational arithmetic.
    """
    arrays = [np.asarray(a, dtype=np.float64) for a in arrays]
    terms = []
    unsafe = np.zeros(np.broadcast(*arrays).shape, dtype=bool)
    with np.errstate(all="ignore"):
        for c, a in zip(coeffs, arrays):
            p, e = _two_prod(np.float64(c), a)
            terms.extend([p, e])
            mag = np.abs(p)
            unsafe |= (mag > 2.0 ** 995) | ((mag < 2.0 ** -960) & (a != 0) & (c != 0))
        s, err = terms[0], np.zeros_like(terms[0])
        for t in terms[1:]:
            s, e = _two_sum(s, t)
            err = err + e
        out = s + err
        rest = (s - out) + err
        half_ulp = np.spacing(np.abs(out)) / 2
        risky = np.abs(np.abs(rest) - half_ulp) <= half_ulp * 1e-6
    risky |= unsafe | ~np.isfinite(out)
    if risky.any():
        out = out.copy()
        cols = [np.broadcast_to(a, out.shape)[risky] for a in arrays]
        fc = [Fraction(float(c)) for c in coeffs]
        out[risky] = [_exact(fc, vals) for vals in zip(*cols)]
    return out


def _exact(coeffs, values) -> float:
    if not all(math.isfinite(v) for v in values):
        return math.fsum(float(c) * v for c, v in zip(coeffs, values))
    total = sum(c * Fraction(v) for c, v in zip(coeffs, values))
    try:
        return float(total)
    except OverflowError:
        return math.inf if total > 0 else -math.inf


# -- students ---------------------------------------------------------------


def keep_indices(n_teacher: int, n_student: int, strategy: str = "uniform") -> list[int]:
    """Which teacher layers a student keeps.

    ``uniform`` spaces the kept layers evenly and always ends at the last one:
    layer i of the student is teacher layer ceil((i+1)*L/n) - 1.
    """
    if not 0 < n_student < n_teacher:
        raise ValueError(f"student layers ({n_student}) must be in [1, {n_teacher})")
    if strategy == "uniform":
        return [math.ceil((i + 1) * n_teacher / n_student) - 1 for i in range(n_student)]
    if strategy == "first":
        return list(range(n_student))
    if strategy == "last":
        return list(range(n_teacher - n_student, n_teacher))
    raise ValueError(f"unknown layer-keep strategy {strategy!r}")


def init_student(
    teacher: Weights, config: EncoderConfig, n_layers: int, strategy: str = "uniform"
) -> tuple[Weights, EncoderConfig]:
    return slice_layers(teacher, config, keep_indices(config.num_layers, n_layers, strategy))


@dataclass
class DistillSpec:
    student_layers: int
    strategy: str = "uniform"
    epochs: int = 1
    batch_size: int = 8
    peak_lr: float = 5e-4
    warmup_steps: int = 20
    max_steps: Optional[int] = None
    corrupt_inputs: bool = False  # feed MLM-corrupted text to both models
    betas: tuple[float, float] = (0.9, 0.98)
    eps: float = 1e-6
    weight_decay: float = 0.01


def hidden_mse(student_h: torch.Tensor, teacher_h: torch.Tensor, keep: torch.Tensor) -> torch.Tensor:
    """Mean squared error over non-padding tokens and hidden dims."""
    diff = (student_h - teacher_h)[keep]
    return (diff * diff).mean()


def distill_loss(
    student: Weights, s_config: EncoderConfig,
    teacher: Weights, t_config: EncoderConfig,
    tokens, positions, masks, keep,
) -> torch.Tensor:
    if s_config.hidden != t_config.hidden:
        raise ValueError(
            f"student width {s_config.hidden} != teacher width {t_config.hidden}; no projection layer"
        )
    with torch.no_grad():
        target = forward(teacher, t_config, tokens, positions, masks).last_hidden
    pred = forward(student, s_config, tokens, positions, masks).last_hidden
    return hidden_mse(pred, target, keep)


def eval_distill_mse(
    student: Weights, s_config: EncoderConfig,
    teacher: Weights, t_config: EncoderConfig,
    packs: Sequence[Pack], batch_size: int = 16,
) -> float:
    """Token-weighted hidden-state MSE over ``packs`` (clean inputs)."""
    total, count = 0.0, 0
    dtype = student["token_embedding"].dtype
    with torch.no_grad():
        for b in range(0, len(packs), batch_size):
            chunk = packs[b:b + batch_size]
            tokens, positions, masks = collate(chunk, dtype)
            keep = non_pad_mask(chunk)
            n = int(keep.sum())
            loss = distill_loss(student, s_config, teacher, t_config, tokens, positions, masks, keep)
            total += float(loss) * n
            count += n
    return total / max(count, 1)


def distill(
    teacher: Weights,
    t_config: EncoderConfig,
    packs: Sequence[Pack],
    spec: DistillSpec,
    seed: int = 0,
    student: Optional[tuple[Weights, EncoderConfig]] = None,
    masking: MaskingConfig = MaskingConfig(),
    out_dir: Optional[str | Path] = None,
    label: str = "distill",
) -> TrainResult:
    """Train a shallower copy of ``teacher`` to match its final hidden states.

    The teacher is read only. Returns the student and a per-step loss log.
    """
    if student is None:
        s_weights, s_config = init_student(teacher, t_config, spec.student_layers, spec.strategy)
    else:
        s_weights, s_config = student
        s_weights = trainable_copy(s_weights)
    if s_config.hidden != t_config.hidden:
        raise ValueError(
            f"student width {s_config.hidden} != teacher width {t_config.hidden}; no projection layer"
        )
    out = Path(out_dir) if out_dir is not None else None
    log_path = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        log_path = out / f"{label}_log.jsonl"
        log_path.write_text("")

    n_batches = math.ceil(len(packs) / spec.batch_size)
    per_epoch = n_batches if spec.max_steps is None else min(n_batches, spec.max_steps)
    total = per_epoch * spec.epochs
    schedule = ScheduleSpec(spec.peak_lr, min(spec.warmup_steps, total), total)
    state = AdamWState(spec.betas, spec.eps, spec.weight_decay)
    result = TrainResult(s_weights, s_config)
    dtype = s_weights["token_embedding"].dtype
    step = 0
    for epoch in range(1, spec.epochs + 1):
        for b, idx in enumerate(batches(len(packs), spec.batch_size, seed, f"{label}/{epoch}/order")[:per_epoch]):
            chunk = [packs[i] for i in idx]
            if spec.corrupt_inputs:
                rng = np.random.default_rng(seed_child(seed, f"{label}/{epoch}/{b}/mask"))
                tokens, positions, masks, _ = masked_batch(chunk, masking, rng, s_config.vocab_size, dtype)
            else:
                tokens, positions, masks = collate(chunk, dtype)
            keep = non_pad_mask(chunk)
            lr = lr_at(step, schedule)
            for t in s_weights.values():
                t.requires_grad_(True)
            loss = distill_loss(s_weights, s_config, teacher, t_config, tokens, positions, masks, keep)
            step += 1
            optimizer_step(s_weights, loss, state, lr, set())
            record = {"step": step, "stage": label, "epoch": epoch, "lr": lr, "loss": loss.item()}
            result.log.append(record)
            _append_log(log_path, record)
        ckpt = snapshot(s_weights, s_config, stage=label, epoch=epoch, global_step=step, seed=seed)
        result.checkpoints.append(ckpt)
        if out is not None:
            save_checkpoint(ckpt.weights, s_config, out / f"{label}_epoch{epoch}.ckpt", ckpt.metadata)
    for t in s_weights.values():
        t.requires_grad_(False)
    return result


@dataclass
class ProgressiveResult:
    final: TrainResult
    stages: list[TrainResult] = field(default_factory=list)


def progressive_distill(
    teacher: Weights,
    t_config: EncoderConfig,
    packs: Sequence[Pack],
    chain: Sequence[int],
    spec: DistillSpec,
    seed: int = 0,
    out_dir: Optional[str | Path] = None,
) -> ProgressiveResult:
    """Distill through successively smaller students; each student becomes
    the next stage's teacher."""
    chain = list(chain)
    if not chain:
        raise ValueError("chain must name at least one student size")
    if any(b >= a for a, b in zip([t_config.num_layers] + chain, chain)):
        raise ValueError(f"chain {chain} must be strictly decreasing below {t_config.num_layers}")
    stages = []
    cur_w, cur_c = teacher, t_config
    for n in chain:
        stage_spec = DistillSpec(**{**spec.__dict__, "student_layers": n})
        res = distill(
            cur_w, cur_c, packs, stage_spec, seed=seed_child(seed, f"progressive/{n}"),
            out_dir=out_dir, label=f"distill_{n}L",
        )
        stages.append(res)
        cur_w, cur_c = res.weights, res.config
    return ProgressiveResult(stages[-1], stages)
