"""Long-context encoder training toolkit: a post-LN encoder with packed,
contamination-free attention, whole-word-masked MLM pretraining, position
table extension, checkpoint merging, layer-drop distillation and a
fine-tuning/evaluation harness."""

from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint, seed_child
from .distill import distill, merge_checkpoints, progressive_distill
from .harness import FinetuneHP, RunResult, TaskSpec, emit_report, finetune, multi_seed, truncation_ablation
from .metrics import evaluate_metric
from .model import EncoderConfig, count_params, estimate_flops, extend_positions, forward, init_weights
from .packing import pack_documents
from .train import pretrain

__all__ = [
    "Checkpoint", "load_checkpoint", "save_checkpoint", "seed_child",
    "distill", "merge_checkpoints", "progressive_distill",
    "FinetuneHP", "RunResult", "TaskSpec", "emit_report", "finetune", "multi_seed", "truncation_ablation",
    "evaluate_metric",
    "EncoderConfig", "count_params", "estimate_flops", "extend_positions", "forward", "init_weights",
    "pack_documents", "pretrain",
]

__version__ = "0.1.0"
