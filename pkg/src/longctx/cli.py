"""Command-line entry point: ``longctx <subcommand> ...``.

Experiment steps (pretrain, distill, finetune, eval) take a YAML config;
one-shot utilities (estimate, merge, extend, pack-stats, synth-data) take
flags. Exit status: 0 success, 1 runtime/config error, 2 usage error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .config import ConfigError, dump_config, validate_config
from .data import (
    CorpusError,
    RawDoc,
    SynthTaskSpec,
    build_vocab,
    gen_corpus,
    gen_task,
    load_corpus,
    write_corpus,
    write_task_file,
)
from .distill import MergeError, merge_checkpoints
from .harness import TaskDataError
from .model import EncoderConfig, count_params, estimate_flops, extend_positions
from .packing import one_per_sequence, packing_stats
from .pipeline import PipelineError, run_distill, run_eval, run_finetune, run_pretrain
from .train import PackingConfig, TrainingError, docs_from_texts, make_packs

log = logging.getLogger("longctx")


def cmd_estimate(args) -> int:
    cfg = EncoderConfig(args.layers, args.hidden, args.heads, args.vocab, args.positions, args.ffn)
    print(f"{estimate_flops(cfg, args.seq):.1f} GFLOPs")
    if args.params:
        total, no_emb = count_params(cfg)
        print(f"{total / 1e6:.1f}M parameters ({no_emb / 1e6:.1f}M excluding embeddings)")
    return 0


def cmd_merge(args) -> int:
    ckpts = [load_checkpoint(p, dtype=None) for p in args.inputs]
    configs = {json.dumps(c.config.to_dict(), sort_keys=True) for c in ckpts}
    if len(configs) != 1:
        raise MergeError("checkpoints have different model configs")
    merged = merge_checkpoints([c.weights for c in ckpts], args.weights)
    meta = {**ckpts[0].metadata, "merged_from": [str(p) for p in args.inputs]}
    if args.weights:
        meta["merge_weights"] = list(args.weights)
    save_checkpoint(merged, ckpts[0].config, args.out, meta)
    print(f"merged {len(ckpts)} checkpoints into {args.out}")
    return 0


def cmd_extend(args) -> int:
    ck = load_checkpoint(args.inp)
    weights, config = extend_positions(ck.weights, ck.config, args.positions, args.init_std, args.seed)
    meta = {**ck.metadata, "extended_from": ck.config.max_positions}
    save_checkpoint(weights, config, args.out, meta)
    print(f"extended positions {ck.config.max_positions} -> {args.positions}; wrote {args.out}")
    return 0


def cmd_pack_stats(args) -> int:
    corpus = load_corpus(args.corpus)
    vocab = build_vocab((d.text for d in corpus.docs), args.vocab_size)
    docs = docs_from_texts([(d.id, d.text) for d in corpus.docs], vocab)
    cfg = PackingConfig(args.max_len, args.policy, args.truncation)
    packed = packing_stats(make_packs(docs, cfg))
    single = packing_stats(one_per_sequence(docs, args.max_len))
    rows = [("packed", packed), ("one-per-sequence", single)]
    print(f"{'layout':<18} {'sequences':>9} {'padding':>8} {'docs/seq':>8}")
    for name, s in rows:
        print(f"{name:<18} {s.num_packs:>9} {s.padding_fraction:>8.3f} {s.mean_docs_per_pack:>8.2f}")
    if corpus.skipped:
        print(f"skipped {corpus.skipped} malformed lines")
    return 0


def cmd_synth_data(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.kind == "corpus":
        docs = gen_corpus(args.n_docs, args.seed)
        write_corpus(out / "corpus.txt", docs)
        print(f"wrote {len(docs)} documents to {out / 'corpus.txt'}")
        return 0
    extra = ((args.short_len, args.n_short),) if args.n_short else ()
    spec = SynthTaskSpec(
        args.kind, args.seq_len, args.classes, args.n_train, args.n_val, args.n_test, args.seed,
        extra_train=extra,
    )
    task = gen_task(spec)
    for split in ("train", "val", "test"):
        write_task_file(out / f"{split}.tsv", task.split_text(split))
    # the task vocabulary, as a corpus line, so a model vocab can cover it
    write_corpus(out / "vocab_corpus.txt", [RawDoc("vocab", " ".join(task.vocab.tokens[4:]))])
    print(f"wrote {args.kind} task (L={args.seq_len}) to {out}")
    return 0


def _config(args):
    cfg = validate_config(args.config)
    if getattr(args, "out", None):
        cfg.output_dir = str(Path(args.out))
    return cfg


def cmd_validate(args) -> int:
    print(dump_config(validate_config(args.config)), end="")
    return 0


def cmd_pretrain(args) -> int:
    path = run_pretrain(_config(args), args.init)
    print(f"final checkpoint: {path}")
    return 0


def cmd_distill(args) -> int:
    path = run_distill(_config(args), args.teacher)
    print(f"student checkpoint: {path}")
    return 0


def cmd_finetune(args) -> int:
    out = run_finetune(_config(args), args.checkpoint, args.task, args.seed)
    print(f"fine-tuned model and predictions in {out}")
    return 0


def cmd_eval(args) -> int:
    _, report = run_eval(_config(args), args.checkpoint, args.limits, args.names)
    print(report, end="")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="longctx", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true", help="log progress")
    sub = p.add_subparsers(dest="command", required=True, metavar="COMMAND")

    s = sub.add_parser("estimate", help="forward-pass GFLOPs and parameter counts")
    s.add_argument("--layers", type=int, required=True)
    s.add_argument("--hidden", type=int, required=True)
    s.add_argument("--seq", type=int, default=512)
    s.add_argument("--heads", type=int, default=None, help="default: hidden // 64")
    s.add_argument("--ffn", type=int, default=None, help="default: 4 * hidden")
    s.add_argument("--vocab", type=int, default=128000)
    s.add_argument("--positions", type=int, default=8192)
    s.add_argument("--params", action="store_true", help="also print parameter counts")
    s.set_defaults(func=cmd_estimate)

    s = sub.add_parser("merge", help="average checkpoints parameter-wise")
    s.add_argument("--in", dest="inputs", nargs="+", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--weights", type=float, nargs="+", help="merge weights (default uniform)")
    s.set_defaults(func=cmd_merge)

    s = sub.add_parser("extend", help="grow the position table of a checkpoint")
    s.add_argument("--in", dest="inp", required=True)
    s.add_argument("--positions", type=int, required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--init-std", type=float, default=0.02)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_extend)

    s = sub.add_parser("pack-stats", help="packing efficiency of a corpus")
    s.add_argument("--corpus", required=True)
    s.add_argument("--max-len", type=int, default=512)
    s.add_argument("--vocab-size", type=int, default=2000)
    s.add_argument("--policy", choices=["first_fit", "sequential"], default="first_fit")
    s.add_argument("--truncation", choices=["split", "drop_tail"], default="split")
    s.set_defaults(func=cmd_pack_stats)

    s = sub.add_parser("synth-data", help="write a synthetic corpus or task")
    s.add_argument("--kind", choices=["corpus", "needle", "parity", "bow-topic"], required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--n-docs", type=int, default=1000)
    s.add_argument("--seq-len", type=int, default=512)
    s.add_argument("--classes", type=int, default=4)
    s.add_argument("--n-train", type=int, default=1000)
    s.add_argument("--n-val", type=int, default=200)
    s.add_argument("--n-test", type=int, default=500)
    s.add_argument("--n-short", type=int, default=0, help="extra short needle training examples")
    s.add_argument("--short-len", type=int, default=64)
    s.set_defaults(func=cmd_synth_data)

    s = sub.add_parser("validate", help="check a config and print it normalized")
    s.add_argument("config")
    s.set_defaults(func=cmd_validate)

    s = sub.add_parser("pretrain", help="MLM pretraining per the config's stage plan")
    s.add_argument("--config", required=True)
    s.add_argument("--init", help="start from this checkpoint instead of random init")
    s.add_argument("--out", help="override output_dir")
    s.set_defaults(func=cmd_pretrain)

    s = sub.add_parser("distill", help="layer-drop distillation from a teacher")
    s.add_argument("--config", required=True)
    s.add_argument("--teacher", required=True)
    s.add_argument("--out", help="override output_dir")
    s.set_defaults(func=cmd_distill)

    s = sub.add_parser("finetune", help="one fine-tuning run on one task")
    s.add_argument("--config", required=True)
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--task")
    s.add_argument("--seed", type=int)
    s.add_argument("--out", help="override output_dir")
    s.set_defaults(func=cmd_finetune)

    s = sub.add_parser("eval", help="multi-seed scores and report for checkpoints")
    s.add_argument("--config", required=True)
    s.add_argument("--checkpoint", nargs="+", required=True)
    s.add_argument("--names", nargs="+", help="model names for the report")
    s.add_argument("--limits", type=int, nargs="+", help="run a truncation ablation at these context limits")
    s.add_argument("--out", help="override output_dir")
    s.set_defaults(func=cmd_eval)
    return p


EXPECTED_ERRORS = (
    CheckpointError, CorpusError, MergeError, PipelineError, TaskDataError,
    TrainingError, ValueError, OSError,
)


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(asctime)s %(name)s %(message)s",
    )
    if getattr(args, "heads", 0) is None:
        args.heads = max(1, args.hidden // 64)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"longctx: {exc}", file=sys.stderr)
        return 1
    except EXPECTED_ERRORS as exc:
        print(f"longctx: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
