"""Experiment configuration: YAML in, validated dataclasses out.

Configs are nested key/value trees. Missing sections take defaults from a
profile (``toy`` unless the file names another), and every problem is
reported with its field path rather than failing on the first one.
"""

from __future__ import annotations

import copy
import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional

import yaml

from .data import SynthTaskSpec
from .distill import DistillSpec
from .harness import FinetuneHP, TaskSpec
from .model import EncoderConfig
from .train import ONLY_POSITIONS, MaskingConfig, OptimConfig, PackingConfig, Stage, StagePlan


class ConfigError(ValueError):
    def __init__(self, errors: list[tuple[str, str]]):
        self.errors = errors
        super().__init__("invalid config:\n" + "\n".join(f"  {p}: {m}" for p, m in errors))


@dataclass
class MergeSpec:
    stage: str = "full"
    epochs: list[int] = field(default_factory=list)  # empty: skip merging


@dataclass
class ExperimentConfig:
    seed: int
    model: EncoderConfig
    packing: PackingConfig
    masking: MaskingConfig
    plan: StagePlan
    optim: OptimConfig
    merge: MergeSpec
    distill: DistillSpec
    distill_chain: list[int]
    finetune: FinetuneHP
    tasks: list[TaskSpec]
    output_dir: str
    corpus: Optional[str] = None
    profile: str = "toy"

    def to_dict(self) -> dict:
        d = {
            "profile": self.profile,
            "seed": self.seed,
            "output_dir": self.output_dir,
            "corpus": self.corpus,
            "model": dataclasses.asdict(self.model),
            "packing": dataclasses.asdict(self.packing),
            "masking": dataclasses.asdict(self.masking),
            "stages": [dataclasses.asdict(s) for s in self.plan.stages],
            "optim": dataclasses.asdict(self.optim),
            "merge": dataclasses.asdict(self.merge),
            "distill": {**dataclasses.asdict(self.distill), "chain": list(self.distill_chain)},
            "finetune": dataclasses.asdict(self.finetune),
            "tasks": [_task_dict(t) for t in self.tasks],
        }
        return _plain(d)


def _task_dict(t: TaskSpec) -> dict:
    d = dataclasses.asdict(t)
    return {k: v for k, v in d.items() if v is not None and v != ""}


def _plain(x):
    # tuples -> lists so the YAML dump stays free of python tags
    if isinstance(x, dict):
        return {k: _plain(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_plain(v) for v in x]
    return x


PROFILES: dict[str, dict] = {
    "toy": {
        "output_dir": "runs/experiment",
        "model": {"vocab_size": 2000, "max_positions": 512},
        "packing": {"max_len": 128},
        "masking": {"rate": 0.20},
        "stages": [
            {"name": "positions", "epochs": 1, "freeze": ONLY_POSITIONS, "peak_lr": 5e-4, "warmup_steps": 20},
            {"name": "full", "epochs": 4, "peak_lr": 5e-4, "warmup_steps": 20},
        ],
        "optim": {"batch_size": 8},
        "merge": {"stage": "full", "epochs": [2, 3, 4]},
        "distill": {"student_layers": 2, "epochs": 1, "batch_size": 8, "peak_lr": 5e-4, "warmup_steps": 20},
        "finetune": {"epochs": 10, "batch_size": 32, "warmup_fraction": 0.06, "peak_lr": 1e-4},
        "tasks": [],
    },
    # hyperparameters of the published 8k-context training run
    "paper": {
        "output_dir": "runs/paper",
        "model": {
            "num_layers": 24, "hidden": 1024, "num_heads": 16,
            "vocab_size": 128000, "max_positions": 8192,
        },
        "packing": {"max_len": 8192},
        "masking": {"rate": 0.20},
        "stages": [
            {"name": "positions", "epochs": 1, "freeze": ONLY_POSITIONS, "peak_lr": 2e-5, "warmup_steps": 500},
            {"name": "full", "epochs": 4, "peak_lr": 2e-5, "warmup_steps": 500},
        ],
        "optim": {"batch_size": 128},
        "merge": {"stage": "full", "epochs": [2, 3, 4]},
        "distill": {
            "student_layers": 12, "chain": [12, 6], "epochs": 1, "batch_size": 64,
            "peak_lr": 5e-5, "warmup_steps": 500,
        },
        "finetune": {"epochs": 10, "batch_size": 32, "warmup_fraction": 0.06, "peak_lr": 1e-5},
        "tasks": [],
    },
}

TOP_KEYS = {
    "profile", "seed", "output_dir", "corpus", "model", "packing", "masking", "stages",
    "optim", "merge", "distill", "finetune", "tasks",
}


def _merge_tree(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge_tree(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


class _Collector:
    def __init__(self):
        self.errors: list[tuple[str, str]] = []

    def add(self, path: str, msg: str) -> None:
        self.errors.append((path, msg))

    def build(self, cls, raw: Any, path: str, **extra):
        """Instantiate dataclass ``cls`` from ``raw``; record problems."""
        if not isinstance(raw, dict):
            self.add(path, f"expected a mapping, got {type(raw).__name__}")
            return None
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(raw) - names)
        for k in unknown:
            self.add(f"{path}.{k}", "unknown field")
        kwargs = {k: v for k, v in raw.items() if k in names}
        kwargs.update(extra)
        missing = [
            f.name for f in dataclasses.fields(cls)
            if f.name not in kwargs
            and f.default is dataclasses.MISSING and f.default_factory is dataclasses.MISSING
        ]
        for k in missing:
            self.add(f"{path}.{k}", "required field missing")
        if unknown or missing:
            return None
        try:
            return cls(**kwargs)
        except (TypeError, ValueError) as exc:
            self.add(path, str(exc))
            return None

    def check(self, ok: bool, path: str, msg: str) -> None:
        if not ok:
            self.add(path, msg)


def _is_num(x) -> bool:
    return isinstance(x, (int, float)) and not isinstance(x, bool)


def _range_checks(c: _Collector, raw: dict) -> None:
    m = raw.get("masking", {})
    for key in ("rate", "mask_prob", "random_prob"):
        if key in m:
            c.check(_is_num(m[key]) and 0 <= m[key] <= 1, f"masking.{key}", "must be a number in [0, 1]")
    if _is_num(m.get("mask_prob")) and _is_num(m.get("random_prob")):
        c.check(m["mask_prob"] + m["random_prob"] <= 1, "masking", "mask_prob + random_prob must be <= 1")
    p = raw.get("packing", {})
    if "max_len" in p:
        c.check(isinstance(p["max_len"], int) and p["max_len"] >= 1, "packing.max_len", "must be an integer >= 1")
    for key in ("policy", "truncation", "mode"):
        allowed = {
            "policy": {"first_fit", "sequential"},
            "truncation": {"split", "drop_tail"},
            "mode": {"block_diagonal", "full"},
        }[key]
        if key in p:
            c.check(p[key] in allowed, f"packing.{key}", f"must be one of {sorted(allowed)}")
    for i, s in enumerate(raw.get("stages", []) or []):
        if isinstance(s, dict):
            if "peak_lr" in s:
                c.check(_is_num(s["peak_lr"]) and s["peak_lr"] > 0, f"stages[{i}].peak_lr", "must be > 0")
            if "epochs" in s:
                c.check(isinstance(s["epochs"], int) and s["epochs"] >= 1, f"stages[{i}].epochs", "must be >= 1")
            if "warmup_steps" in s:
                c.check(isinstance(s["warmup_steps"], int) and s["warmup_steps"] >= 0,
                        f"stages[{i}].warmup_steps", "must be >= 0")
    o = raw.get("optim", {})
    if "batch_size" in o:
        c.check(isinstance(o["batch_size"], int) and o["batch_size"] >= 1, "optim.batch_size", "must be >= 1")
    f = raw.get("finetune", {})
    if "warmup_fraction" in f:
        c.check(_is_num(f["warmup_fraction"]) and 0 <= f["warmup_fraction"] < 1,
                "finetune.warmup_fraction", "must be in [0, 1)")
    if "peak_lr" in f:
        c.check(_is_num(f["peak_lr"]) and f["peak_lr"] > 0, "finetune.peak_lr", "must be > 0")
    if "seeds" in f:
        c.check(isinstance(f["seeds"], list) and len(f["seeds"]) >= 1
                and all(isinstance(s, int) for s in f["seeds"]), "finetune.seeds", "must be a non-empty list of integers")
    d = raw.get("distill", {})
    if "peak_lr" in d:
        c.check(_is_num(d["peak_lr"]) and d["peak_lr"] > 0, "distill.peak_lr", "must be > 0")


def normalize(raw: dict, base_dir: Optional[Path] = None) -> ExperimentConfig:
    """Validate a config tree and fill in defaults. Raises ConfigError."""
    c = _Collector()
    if not isinstance(raw, dict):
        raise ConfigError([("<root>", "config must be a mapping")])
    for k in sorted(set(raw) - TOP_KEYS):
        c.add(k, "unknown field")
    profile = raw.get("profile", "toy")
    if profile not in PROFILES:
        raise ConfigError(c.errors + [("profile", f"unknown profile {profile!r}; have {sorted(PROFILES)}")])
    if "seed" not in raw:
        c.add("seed", "required field missing")
    elif not isinstance(raw["seed"], int) or isinstance(raw["seed"], bool) or raw["seed"] < 0:
        c.add("seed", "must be a non-negative integer")
    full = _merge_tree(PROFILES[profile], {k: v for k, v in raw.items() if k in TOP_KEYS})
    _range_checks(c, full)

    model = c.build(EncoderConfig, full.get("model"), "model")
    packing = c.build(PackingConfig, full.get("packing"), "packing")
    masking = c.build(MaskingConfig, full.get("masking"), "masking")
    optim_raw = dict(full.get("optim") or {})
    if "betas" in optim_raw:
        optim_raw["betas"] = tuple(optim_raw["betas"])
    optim = c.build(OptimConfig, optim_raw, "optim")
    stages = []
    raw_stages = full.get("stages")
    if not isinstance(raw_stages, list) or not raw_stages:
        c.add("stages", "need a non-empty list of stages")
    else:
        for i, s in enumerate(raw_stages):
            stages.append(c.build(Stage, s, f"stages[{i}]"))
        names = [s.name for s in stages if s is not None]
        c.check(len(names) == len(set(names)), "stages", "stage names must be unique")
    merge = c.build(MergeSpec, full.get("merge"), "merge")
    if merge is not None and merge.epochs and stages and all(stages):
        target = [s for s in stages if s.name == merge.stage]
        if not target:
            c.add("merge.stage", f"no stage named {merge.stage!r}")
        elif any(not 1 <= e <= target[0].epochs for e in merge.epochs):
            c.add("merge.epochs", f"epochs must lie in 1..{target[0].epochs}")

    distill_raw = dict(full.get("distill") or {})
    chain = distill_raw.pop("chain", None)
    if "betas" in distill_raw:
        distill_raw["betas"] = tuple(distill_raw["betas"])
    distill = c.build(DistillSpec, distill_raw, "distill")
    if chain is None:
        chain = [distill.student_layers] if distill is not None else []
    if model is not None and distill is not None:
        c.check(0 < distill.student_layers < model.num_layers, "distill.student_layers",
                f"must be in [1, {model.num_layers})")
        prev = model.num_layers
        for i, n in enumerate(chain):
            c.check(isinstance(n, int) and 0 < n < prev, f"distill.chain[{i}]",
                    "must be strictly decreasing and below the teacher depth")
            prev = n if isinstance(n, int) else prev

    ft_raw = dict(full.get("finetune") or {})
    if "betas" in ft_raw:
        ft_raw["betas"] = tuple(ft_raw["betas"])
    finetune = c.build(FinetuneHP, ft_raw, "finetune")

    base = base_dir or Path.cwd()
    corpus = full.get("corpus")
    if corpus is not None:
        c.check((base / corpus).exists(), "corpus", f"file not found: {corpus}")
        corpus = str(base / corpus)

    tasks = []
    for i, t in enumerate(full.get("tasks") or []):
        path = f"tasks[{i}]"
        if not isinstance(t, dict):
            c.add(path, "expected a mapping")
            continue
        t = dict(t)
        if isinstance(t.get("synthetic"), dict):
            syn = c.build(SynthTaskSpec, {**t["synthetic"], "extra_train": tuple(
                tuple(g) for g in t["synthetic"].get("extra_train", ()))}, f"{path}.synthetic")
            if syn is None:
                continue
            t["synthetic"] = syn
        for split in ("train", "val", "test"):
            if t.get(split) is not None:
                p = base / t[split]
                c.check(p.exists(), f"{path}.{split}", f"file not found: {t[split]}")
                t[split] = str(p)
        task = c.build(TaskSpec, t, path)
        if task is not None:
            if model is not None:
                c.check(task.max_seq_len <= model.max_positions, f"{path}.max_seq_len",
                        f"exceeds model max_positions {model.max_positions}")
            tasks.append(task)
    names = [t.name for t in tasks]
    c.check(len(names) == len(set(names)), "tasks", "task names must be unique")

    output_dir = full.get("output_dir")
    c.check(isinstance(output_dir, str) and output_dir != "", "output_dir", "must be a non-empty path")

    if c.errors:
        raise ConfigError(c.errors)
    return ExperimentConfig(
        seed=raw["seed"], model=model, packing=packing, masking=masking, plan=StagePlan(stages),
        optim=optim, merge=merge, distill=distill, distill_chain=list(chain), finetune=finetune,
        tasks=tasks, output_dir=str(base / output_dir), corpus=corpus, profile=profile,
    )


def load_config(path: str | Path) -> dict:
    with open(path, encoding="utf-8") as fh:
        try:
            raw = yaml.safe_load(fh)
        except yaml.YAMLError as exc:
            raise ConfigError([("<file>", f"not valid YAML: {exc}")]) from None
    return raw if raw is not None else {}


def validate_config(path: str | Path) -> ExperimentConfig:
    """Load, validate and normalize a config file; relative paths in it are
    resolved against the file's directory."""
    path = Path(path)
    return normalize(load_config(path), base_dir=path.parent)


def dump_config(cfg: ExperimentConfig) -> str:
    return yaml.safe_dump(cfg.to_dict(), sort_keys=False)
