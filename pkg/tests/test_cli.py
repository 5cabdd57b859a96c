import subprocess
import sys

import pytest
import torch
import yaml

from longctx.checkpoint import load_checkpoint, save_checkpoint, tensor_bytes, weights_equal
from longctx.cli import main
from longctx.distill import merge_checkpoints
from longctx.model import forward

from conftest import tiny_config, tiny_weights


def test_estimate_prints_published_numbers(capsys):
    assert main(["estimate", "--layers", "24", "--hidden", "1024", "--seq", "512", "--params"]) == 0
    out = capsys.readouterr().out.splitlines()
    assert out == ["167.5 GFLOPs", "443.0M parameters (303.5M excluding embeddings)"]


def test_usage_error_exits_2(capsys):
    with pytest.raises(SystemExit) as info:
        main(["estimate", "--layers", "2", "--hidden", "64", "--frobnicate"])
    assert info.value.code == 2


def test_entry_point_exit_codes(tmp_path):
    bad = tmp_path / "bad.yaml"
    bad.write_text("seed: 1\nmodel: {hidden: 8}\n", encoding="utf-8")
    proc = subprocess.run([sys.executable, "-m", "longctx.cli", "validate", str(bad)],
                          capture_output=True, text=True)
    assert proc.returncode == 1
    assert "model.num_layers" in proc.stderr and "model.num_heads" in proc.stderr
    proc = subprocess.run([sys.executable, "-m", "longctx.cli", "nosuchcommand"], capture_output=True, text=True)
    assert proc.returncode == 2


def _save(tmp_path, name, seed, **cfg_kw):
    cfg = tiny_config(**cfg_kw)
    return save_checkpoint(tiny_weights(cfg, seed, torch.float32), cfg, tmp_path / name, {"vocab": []})


def test_merge_command(tmp_path, capsys):
    a, b = _save(tmp_path, "a.ckpt", 1), _save(tmp_path, "b.ckpt", 2)
    assert main(["merge", "--in", str(a), str(a), "--out", str(tmp_path / "aa.ckpt")]) == 0
    assert tensor_bytes(load_checkpoint(tmp_path / "aa.ckpt").weights) == tensor_bytes(load_checkpoint(a).weights)
    assert main(["merge", "--in", str(a), str(b), "--out", str(tmp_path / "ab.ckpt"), "--weights", "0.25", "0.75"]) == 0
    got = load_checkpoint(tmp_path / "ab.ckpt")
    want = merge_checkpoints([load_checkpoint(a).weights, load_checkpoint(b).weights], [0.25, 0.75])
    assert weights_equal(got.weights, want)
    assert got.metadata["merge_weights"] == [0.25, 0.75]
    c = _save(tmp_path, "c.ckpt", 1, positions=40)
    assert main(["merge", "--in", str(a), str(c), "--out", str(tmp_path / "ac.ckpt")]) == 1
    assert "different model configs" in capsys.readouterr().err


def test_extend_command_preserves_short_inputs(tmp_path):
    a = _save(tmp_path, "a.ckpt", 1)
    assert main(["extend", "--in", str(a), "--positions", "64", "--out", str(tmp_path / "x.ckpt")]) == 0
    old, new = load_checkpoint(a), load_checkpoint(tmp_path / "x.ckpt")
    assert new.config.max_positions == 64
    toks = torch.randint(4, 24, (2, 32))
    assert torch.equal(forward(old.weights, old.config, toks).last_hidden,
                       forward(new.weights, new.config, toks).last_hidden)
    assert main(["extend", "--in", str(a), "--positions", "16", "--out", str(tmp_path / "y.ckpt")]) == 1


def test_synth_data(tmp_path):
    assert main(["synth-data", "--kind", "needle", "--seq-len", "12", "--n-train", "10", "--n-val", "4",
                 "--n-test", "6", "--n-short", "3", "--short-len", "5", "--out", str(tmp_path)]) == 0
    rows = (tmp_path / "train.tsv").read_text().splitlines()
    assert len(rows) == 13
    assert sorted({len(r.split("\t")[1].split()) for r in rows}) == [5, 12]
    assert len((tmp_path / "test.tsv").read_text().splitlines()) == 6
    assert main(["synth-data", "--kind", "corpus", "--n-docs", "5", "--out", str(tmp_path / "c")]) == 0
    assert len((tmp_path / "c" / "corpus.txt").read_text().splitlines()) == 5


EXPERIMENT = {
    "seed": 7,
    "corpus": "data/corpus.txt",
    "output_dir": "run",
    "model": {"num_layers": 2, "hidden": 16, "num_heads": 2, "vocab_size": 300, "max_positions": 64},
    "packing": {"max_len": 32},
    "stages": [
        {"name": "positions", "epochs": 1, "freeze": "(?!position_embedding$).*", "max_steps": 2},
        {"name": "full", "epochs": 3, "max_steps": 2},
    ],
    "merge": {"stage": "full", "epochs": [2, 3]},
    "distill": {"student_layers": 1, "max_steps": 2},
    "finetune": {"epochs": 1, "batch_size": 16, "peak_lr": 1e-3, "seeds": [1, 2]},
    "tasks": [{
        "name": "needle", "kind": "single_label", "metric": "accuracy", "max_seq_len": 16,
        "synthetic": {"kind": "needle", "seq_len": 16, "num_classes": 2, "n_train": 32, "n_val": 8, "n_test": 8},
    }],
}


def test_end_to_end(tmp_path, capsys):
    assert main(["synth-data", "--kind", "corpus", "--n-docs", "40", "--out", str(tmp_path / "data")]) == 0
    cfg_path = tmp_path / "exp.yaml"
    cfg_path.write_text(yaml.safe_dump(EXPERIMENT), encoding="utf-8")
    run = tmp_path / "run"

    assert main(["pretrain", "--config", str(cfg_path)]) == 0
    final = load_checkpoint(run / "pretrain" / "final.ckpt")
    epochs = [load_checkpoint(run / "pretrain" / f"full_epoch{e}.ckpt").weights for e in (2, 3)]
    assert weights_equal(final.weights, merge_checkpoints(epochs))
    assert (run / "pretrain" / "config.normalized.yaml").exists()

    # same config, fresh output directory: bit-identical final weights
    assert main(["pretrain", "--config", str(cfg_path), "--out", str(tmp_path / "again")]) == 0
    again = load_checkpoint(tmp_path / "again" / "pretrain" / "final.ckpt")
    assert tensor_bytes(again.weights) == tensor_bytes(final.weights)

    assert main(["distill", "--config", str(cfg_path), "--teacher", str(run / "pretrain" / "final.ckpt")]) == 0
    student = load_checkpoint(run / "distill" / "student.ckpt")
    assert student.config.num_layers == 1 and student.metadata["vocab"] == final.metadata["vocab"]

    assert main(["finetune", "--config", str(cfg_path), "--checkpoint", str(run / "distill" / "student.ckpt"),
                 "--seed", "2"]) == 0
    ft = run / "finetune" / "needle_seed2"
    assert len((ft / "predictions.tsv").read_text().splitlines()) == 8
    assert (ft / "score.json").exists() and (ft / "model.ckpt").is_dir()

    capsys.readouterr()
    assert main(["eval", "--config", str(cfg_path), "--checkpoint", str(run / "pretrain" / "final.ckpt"),
                 "--limits", "16", "4", "--names", "teacher"]) == 0
    out = capsys.readouterr().out
    assert "teacher@16" in out and "teacher@4" in out
    csv = (run / "eval" / "report.csv").read_text().splitlines()
    assert csv[0] == "task,kind,metric,model,mean,std" and len(csv) == 1 + 2 + 2

    assert main(["pack-stats", "--corpus", str(tmp_path / "data" / "corpus.txt"), "--max-len", "64"]) == 0
    assert "one-per-sequence" in capsys.readouterr().out
    assert main(["finetune", "--config", str(cfg_path), "--checkpoint", str(tmp_path / "missing.ckpt")]) == 1
