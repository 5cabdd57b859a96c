"""Fine-tuning with task heads, multi-seed runs, truncation ablations and
score reports."""

from __future__ import annotations

import csv
import io
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .checkpoint import seed_child
from .data import SynthTaskSpec, Vocab, gen_task, load_task_file, tokenize
from .metrics import METRIC_KINDS, METRICS, UndefinedMetricError, evaluate_metric
from .model import (
    EncoderConfig,
    HeadSpec,
    Weights,
    attach_head,
    forward,
    head_forward,
    padding_mask,
)
from .optim import AdamWState, ScheduleSpec, lr_at
from .train import optimizer_step

log = logging.getLogger(__name__)

KINDS = ("single_label", "multi_label", "regression")

Example = tuple[list[int], object]  # token ids, target


class TaskDataError(ValueError):
    def __init__(self, path, line: int, message: str):
        super().__init__(f"{path}:{line}: {message}")
        self.path = path
        self.line = line


class PartialResultError(RuntimeError):
    def __init__(self, failed: dict[int, BaseException], partial: "RunResult"):
        seeds = ", ".join(str(s) for s in failed)
        super().__init__(f"fine-tuning failed for seed(s) {seeds}")
        self.failed = failed
        self.partial = partial


@dataclass
class TaskSpec:
    name: str
    kind: str
    metric: str
    max_seq_len: int
    num_outputs: Optional[int] = None  # classes / labels; 1 for regression
    labels: Optional[list[str]] = None  # declared label set for file tasks
    positive_label: Optional[str] = None  # for binary_f1
    train: Optional[str] = None
    val: Optional[str] = None
    test: Optional[str] = None
    synthetic: Optional[SynthTaskSpec] = None
    domain: str = ""

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"task {self.name}: unknown kind {self.kind!r}")
        if self.metric not in METRICS:
            raise ValueError(f"task {self.name}: unknown metric {self.metric!r}")
        if self.kind not in METRIC_KINDS[self.metric]:
            raise ValueError(f"task {self.name}: metric {self.metric} does not apply to {self.kind} tasks")
        if self.max_seq_len < 1:
            raise ValueError(f"task {self.name}: max_seq_len must be >= 1")
        if self.kind == "regression":
            self.num_outputs = 1
        elif self.num_outputs is None:
            if self.labels is not None:
                self.num_outputs = len(self.labels)
            elif self.synthetic is not None:
                self.num_outputs = self.synthetic.num_classes
            else:
                raise ValueError(f"task {self.name}: declare labels or num_outputs")
        if self.labels is not None and len(self.labels) != self.num_outputs:
            raise ValueError(f"task {self.name}: {len(self.labels)} labels but num_outputs={self.num_outputs}")
        if self.metric == "binary_f1":
            if self.labels is not None and self.positive_label not in self.labels:
                raise ValueError(f"task {self.name}: binary_f1 needs positive_label from the label set")
        if self.synthetic is None and not (self.train and self.val and self.test):
            raise ValueError(f"task {self.name}: needs train/val/test paths or a synthetic generator")

    @property
    def positive_index(self) -> int:
        if self.labels is not None and self.positive_label is not None:
            return self.labels.index(self.positive_label)
        return 1

    def metric_kwargs(self) -> dict:
        return {"positive": self.positive_index} if self.metric == "binary_f1" else {}


@dataclass
class TaskData:
    train: list[Example]
    val: list[Example]
    test: list[Example]


def _parse_target(task: TaskSpec, raw: str, path, line: int):
    if task.kind == "regression":
        try:
            value = float(raw)
        except ValueError:
            raise TaskDataError(path, line, f"regression target {raw!r} is not a number") from None
        if not math.isfinite(value):
            raise TaskDataError(path, line, f"regression target {raw!r} is not finite")
        return value
    labels = task.labels if task.labels is not None else [str(i) for i in range(task.num_outputs)]
    if task.kind == "single_label":
        if raw not in labels:
            raise TaskDataError(path, line, f"label {raw!r} not in declared set {labels}")
        return labels.index(raw)
    target = np.zeros(len(labels), dtype=np.int64)
    for part in filter(None, raw.split(",")):
        if part not in labels:
            raise TaskDataError(path, line, f"label {part!r} not in declared set {labels}")
        target[labels.index(part)] = 1
    return target


def load_task_data(task: TaskSpec, vocab: Optional[Vocab] = None) -> TaskData:
    """Token ids and targets for every split; file tasks need ``vocab``."""
    if task.synthetic is not None:
        gen = gen_task(task.synthetic)
        return TaskData(list(gen.train), list(gen.val), list(gen.test))
    if vocab is None:
        raise ValueError(f"task {task.name}: a vocabulary is needed to tokenize task files")
    splits = []
    for path in (task.train, task.val, task.test):
        rows = []
        for row in load_task_file(path):
            target = _parse_target(task, row.label, path, row.line)
            ids = tokenize(row.text, vocab).ids
            if not ids:
                raise TaskDataError(path, row.line, "empty text")
            rows.append((ids, target))
        if not rows:
            raise TaskDataError(path, 0, "no examples")
        splits.append(rows)
    return TaskData(*splits)


@dataclass
class FinetuneHP:
    epochs: int = 10
    batch_size: int = 32
    warmup_fraction: float = 0.06
    peak_lr: float = 1e-5
    power: float = 1.0  # polynomial decay exponent
    seeds: list[int] = field(default_factory=lambda: [11, 22, 33, 44, 55])
    weight_decay: float = 0.01
    betas: tuple[float, float] = (0.9, 0.98)
    eps: float = 1e-6
    eval_batch_size: int = 64

    def __post_init__(self):
        if not 0 <= self.warmup_fraction < 1:
            raise ValueError("warmup_fraction must be in [0, 1)")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")
        if self.peak_lr <= 0:
            raise ValueError("peak_lr must be positive")


@dataclass
class FinetuneResult:
    weights: Weights
    best_epoch: int
    val_scores: list[float]
    test_predictions: np.ndarray
    test_score: float
    log: list[dict] = field(default_factory=list)


def _length_batches(lengths: Sequence[int], batch_size: int, rng: np.random.Generator) -> list[np.ndarray]:
    # shuffle, then group similar lengths so batches carry little padding
    order = rng.permutation(len(lengths))
    order = order[np.argsort(np.asarray(lengths)[order], kind="stable")]
    chunks = [order[i:i + batch_size] for i in range(0, len(order), batch_size)]
    return [chunks[i] for i in rng.permutation(len(chunks))]


def _collate(examples: Sequence[Example], max_len: int, dtype):
    ids = [x[:max_len] for x, _ in examples]
    lengths = [len(x) for x in ids]
    seq = max(lengths)
    tokens = torch.zeros(len(ids), seq, dtype=torch.long)
    for r, x in enumerate(ids):
        tokens[r, :len(x)] = torch.as_tensor(x)
    mask = padding_mask(lengths, seq, dtype) if min(lengths) < seq else None
    return tokens, mask


def _targets(examples: Sequence[Example], kind: str) -> torch.Tensor:
    ys = [y for _, y in examples]
    if kind == "single_label":
        return torch.as_tensor(ys, dtype=torch.long)
    return torch.as_tensor(np.asarray(ys), dtype=torch.float32)


def _loss(outputs: torch.Tensor, target: torch.Tensor, kind: str) -> torch.Tensor:
    if kind == "single_label":
        return F.cross_entropy(outputs, target)
    if kind == "multi_label":
        return F.binary_cross_entropy_with_logits(outputs, target.to(outputs.dtype))
    return F.mse_loss(outputs[:, 0], target.to(outputs.dtype))


def _decode(outputs: torch.Tensor, kind: str) -> np.ndarray:
    if kind == "single_label":
        return outputs.argmax(-1).numpy()
    if kind == "multi_label":
        return (outputs > 0).to(torch.int64).numpy()  # sigmoid(z) > 0.5
    return outputs[:, 0].double().numpy()


def predict(
    weights: Weights, config: EncoderConfig, examples: Sequence[Example], kind: str,
    max_len: int, batch_size: int = 64,
) -> np.ndarray:
    """Decoded predictions in input order."""
    lengths = [min(len(x), max_len) for x, _ in examples]
    order = np.argsort(lengths, kind="stable")
    outs: list[Optional[np.ndarray]] = [None] * len(examples)
    dtype = weights["token_embedding"].dtype
    with torch.no_grad():
        for b in range(0, len(order), batch_size):
            idx = order[b:b + batch_size]
            tokens, mask = _collate([examples[i] for i in idx], max_len, dtype)
            hidden = forward(weights, config, tokens, attn_mask=mask).last_hidden
            decoded = _decode(head_forward(weights, hidden), kind)
            for i, d in zip(idx, decoded):
                outs[i] = d
    return np.stack(outs)


def _golds(examples: Sequence[Example]) -> np.ndarray:
    return np.stack([np.asarray(y) for _, y in examples])


def _score(task: TaskSpec, pred: np.ndarray, examples: Sequence[Example]) -> float:
    return evaluate_metric(pred, _golds(examples), task.metric, **task.metric_kwargs())


def finetune(
    weights: Weights,
    config: EncoderConfig,
    task: TaskSpec,
    data: TaskData,
    hp: FinetuneHP,
    seed: int,
    max_len: Optional[int] = None,
) -> FinetuneResult:
    """Attach a task head and train everything on ``data.train``.

    Inputs are cut to ``max_len`` (default: the task's ``max_seq_len``).
    The epoch with the best validation score (earliest on ties) supplies
    the returned weights and the test predictions.
    """
    max_len = task.max_seq_len if max_len is None else max_len
    if max_len > config.max_positions:
        raise ValueError(f"context limit {max_len} exceeds the model's {config.max_positions} positions")
    body = {k: v for k, v in weights.items() if not k.startswith(("mlm.", "head."))}
    w = attach_head(body, config, HeadSpec(task.kind, task.num_outputs), seed_child(seed, "head"))
    dtype = w["token_embedding"].dtype

    n_batches = math.ceil(len(data.train) / hp.batch_size)
    total = n_batches * hp.epochs
    schedule = ScheduleSpec(hp.peak_lr, int(hp.warmup_fraction * total), total, power=hp.power)
    state = AdamWState(hp.betas, hp.eps, hp.weight_decay)
    lengths = [min(len(x), max_len) for x, _ in data.train]

    best_score, best_epoch, best_weights = -math.inf, 0, None
    val_scores, history = [], []
    step = 0
    for epoch in range(1, hp.epochs + 1):
        rng = np.random.default_rng(seed_child(seed, f"finetune/epoch{epoch}"))
        for idx in _length_batches(lengths, hp.batch_size, rng):
            chunk = [data.train[i] for i in idx]
            tokens, mask = _collate(chunk, max_len, dtype)
            for t in w.values():
                t.requires_grad_(True)
            hidden = forward(w, config, tokens, attn_mask=mask).last_hidden
            loss = _loss(head_forward(w, hidden), _targets(chunk, task.kind), task.kind)
            lr = lr_at(step, schedule)
            optimizer_step(w, loss, state, lr, set())
            step += 1
            history.append({"step": step, "epoch": epoch, "lr": lr, "loss": loss.item()})
        for t in w.values():
            t.requires_grad_(False)
        pred = predict(w, config, data.val, task.kind, max_len, hp.eval_batch_size)
        try:
            score = _score(task, pred, data.val)
        except UndefinedMetricError:
            score = -math.inf
        val_scores.append(score)
        log.info("task %s seed %d epoch %d: val %s = %.4f", task.name, seed, epoch, task.metric, score)
        if score > best_score or best_weights is None:
            best_score, best_epoch = score, epoch
            best_weights = {k: v.clone() for k, v in w.items()}

    test_pred = predict(best_weights, config, data.test, task.kind, max_len, hp.eval_batch_size)
    test_score = _score(task, test_pred, data.test)
    return FinetuneResult(best_weights, best_epoch, val_scores, test_pred, test_score, history)


@dataclass
class RunResult:
    task: str
    kind: str
    metric: str
    model: str
    seeds: list[int]
    scores: list[float]
    runtime: float = 0.0
    domain: str = ""
    context_limit: Optional[int] = None

    def __post_init__(self):
        if len(self.scores) != len(self.seeds):
            raise ValueError("one score per seed required")

    @property
    def mean(self) -> float:
        # fsum rounds once, so the mean does not depend on seed order
        return math.fsum(self.scores) / len(self.scores) if self.scores else math.nan

    @property
    def std(self) -> float:
        """Population standard deviation over seeds."""
        if not self.scores:
            return math.nan
        m = self.mean
        return math.sqrt(math.fsum((s - m) ** 2 for s in self.scores) / len(self.scores))


def multi_seed(
    weights: Weights,
    config: EncoderConfig,
    task: TaskSpec,
    data: TaskData,
    hp: FinetuneHP,
    model_name: str = "model",
    max_len: Optional[int] = None,
) -> RunResult:
    """One ``finetune`` run per seed in ``hp.seeds``; test scores per seed."""
    if not hp.seeds:
        raise ValueError("at least one seed is required")
    t0 = time.perf_counter()
    scores, done, failed = [], [], {}
    for seed in hp.seeds:
        try:
            scores.append(finetune(weights, config, task, data, hp, seed, max_len).test_score)
            done.append(seed)
        except Exception as exc:  # reported together below
            log.exception("seed %d failed", seed)
            failed[seed] = exc
    result = RunResult(
        task.name, task.kind, task.metric, model_name, done, scores,
        time.perf_counter() - t0, task.domain, max_len,
    )
    if failed:
        raise PartialResultError(failed, result)
    return result


def truncation_ablation(
    weights: Weights,
    config: EncoderConfig,
    task: TaskSpec,
    data: TaskData,
    limits: Sequence[int],
    hp: FinetuneHP,
    model_name: str = "model",
) -> list[RunResult]:
    """``multi_seed`` with inputs cut to each context limit, in the given order."""
    for limit in limits:
        if not 1 <= limit <= config.max_positions:
            raise ValueError(f"context limit {limit} outside [1, {config.max_positions}]")
    return [
        multi_seed(weights, config, task, data, hp, f"{model_name}@{limit}", max_len=limit)
        for limit in limits
    ]


CSV_HEADER = ["task", "kind", "metric", "model", "mean", "std"]


def emit_report(results: Sequence[RunResult], fmt: str = "text", scale: float = 1.0) -> str:
    """Score table, one row per task and one column per model, plus an
    Average row (uniform mean over the tasks each model was scored on).

    ``fmt`` is ``text`` (aligned table) or ``csv``. ``scale`` multiplies
    displayed scores, e.g. 100 for percentages.
    """
    if not results:
        raise ValueError("nothing to report")
    models = list(dict.fromkeys(r.model for r in results))
    tasks = list(dict.fromkeys(r.task for r in results))
    by_key = {(r.task, r.model): r for r in results}
    first = {r.task: r for r in reversed(results)}
    averages = {
        m: math.fsum(by_key[t, m].mean for t in tasks if (t, m) in by_key)
        / sum((t, m) in by_key for t in tasks)
        for m in models
    }

    if fmt == "csv":
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(CSV_HEADER)
        for r in results:
            writer.writerow([r.task, r.kind, r.metric, r.model, repr(r.mean * scale), repr(r.std * scale)])
        for m in models:
            writer.writerow(["Average", "", "", m, repr(averages[m] * scale), ""])
        return buf.getvalue()
    if fmt != "text":
        raise ValueError(f"unknown report format {fmt!r}")

    header = ["Task", "Type", "Domain", "Metric"] + models
    rows = []
    for t in tasks:
        r0 = first[t]
        cells = [f"{by_key[t, m].mean * scale:.2f}" if (t, m) in by_key else "-" for m in models]
        rows.append([t, r0.kind, r0.domain, r0.metric] + cells)
    rows.append(["Average", "", "", ""] + [f"{averages[m] * scale:.2f}" for m in models])
    widths = [max(len(str(row[i])) for row in [header] + rows) for i in range(len(header))]

    def line(cells):
        return "  ".join(str(c).ljust(w) for c, w in zip(cells, widths)).rstrip()

    rule = "  ".join("-" * w for w in widths)
    return "\n".join([line(header), rule] + [line(r) for r in rows[:-1]] + [rule, line(rows[-1])]) + "\n"


def write_report(results: Sequence[RunResult], out_dir: str | Path, stem: str = "report") -> tuple[Path, Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    text, table = out / f"{stem}.txt", out / f"{stem}.csv"
    text.write_text(emit_report(results, "text"), encoding="utf-8")
    table.write_text(emit_report(results, "csv"), encoding="utf-8")
    return text, table
