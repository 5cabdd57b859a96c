from fractions import Fraction

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from longctx.distill import (
    DistillSpec,
    MergeError,
    distill,
    distill_loss,
    eval_distill_mse,
    init_student,
    keep_indices,
    merge_checkpoints,
    progressive_distill,
    weighted_sum,
)
from longctx.model import forward, init_weights
from longctx.packing import collate, non_pad_mask, pack_documents

from conftest import random_docs, tiny_config, tiny_weights


def exact_weighted(arrays, coeffs):
    # rational oracle, rounded once to float64
    out = np.empty_like(arrays[0])
    for idx in np.ndindex(out.shape):
        out[idx] = float(sum(Fraction(c) * Fraction(float(a[idx])) for c, a in zip(coeffs, arrays)))
    return out


def test_merge_identical_is_identity():
    w = init_weights(tiny_config(), 0, dtype=torch.float64, std=1.0)
    w["extra"] = torch.tensor([1.0, 0.1, 1 / 3, 2.0 ** -1074, 1e308], dtype=torch.float64)
    merged = merge_checkpoints([w, w, w])
    assert all(torch.equal(merged[k], w[k]) for k in w)
    w32 = init_weights(tiny_config(), 0)
    assert all(torch.equal(merge_checkpoints([w32] * 7)[k], w32[k]) for k in w32)


def test_merge_midpoint_and_one_hot():
    a = {"p": torch.zeros(3, dtype=torch.float64)}
    b = {"p": torch.full((3,), 2.0, dtype=torch.float64)}
    assert torch.equal(merge_checkpoints([a, b])["p"], torch.ones(3, dtype=torch.float64))
    c = {"p": torch.randn(3, dtype=torch.float64)}
    assert torch.equal(merge_checkpoints([c, b], [1.0, 0.0])["p"], c["p"])


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(0.0, 1.0))
def test_weighted_merge_is_exactly_rounded(seed, lam):
    rng = np.random.default_rng(seed)
    A = rng.standard_normal(40) * 10.0 ** rng.integers(-5, 5, 40)
    B = rng.standard_normal(40)
    got = merge_checkpoints(
        [{"p": torch.from_numpy(A)}, {"p": torch.from_numpy(B)}], [lam, 1 - lam]
    )["p"].numpy()
    assert np.array_equal(got, exact_weighted([A, B], [lam, 1 - lam]))


def test_weighted_sum_many_terms():
    rng = np.random.default_rng(3)
    arrays = [rng.standard_normal(200) for _ in range(5)]
    coeffs = [0.1, 0.2, 0.3, 0.25, 0.15]
    assert np.array_equal(weighted_sum(arrays, coeffs), exact_weighted(arrays, coeffs))


def test_merge_errors():
    a = {"x": torch.zeros(2), "y": torch.zeros(3)}
    with pytest.raises(MergeError, match="y"):
        merge_checkpoints([a, {"x": torch.zeros(2), "y": torch.zeros(4)}])
    with pytest.raises(MergeError, match="lacks tensor y"):
        merge_checkpoints([a, {"x": torch.zeros(2)}])
    with pytest.raises(MergeError):
        merge_checkpoints([a, a], [0.7, 0.7])
    with pytest.raises(MergeError):
        merge_checkpoints([])


def test_keep_indices():
    assert keep_indices(24, 12) == list(range(1, 24, 2))
    assert keep_indices(24, 6) == [3, 7, 11, 15, 19, 23]
    assert keep_indices(8, 2, "last") == [6, 7]
    assert keep_indices(8, 3, "first") == [0, 1, 2]
    assert keep_indices(8, 4) == [1, 3, 5, 7]
    with pytest.raises(ValueError):
        keep_indices(4, 4)
    with pytest.raises(ValueError):
        keep_indices(4, 2, "random")


def test_init_student_keeps_embeddings(cfg):
    t = tiny_weights(tiny_config(layers=4), seed=1)
    tc = tiny_config(layers=4)
    s, sc = init_student(t, tc, 2)
    assert sc.num_layers == 2
    for k in ("token_embedding", "position_embedding", "emb_ln.gain", "mlm.dense_w"):
        assert torch.equal(s[k], t[k])
    toks = torch.tensor([[4, 5, 6]])
    assert torch.equal(forward(s, sc, toks).hidden_states[0], forward(t, tc, toks).hidden_states[0])
    assert torch.equal(s["layers.1.attn.wq"], t["layers.3.attn.wq"])


def _packs(rng, cfg, n=12):
    return pack_documents(random_docs(rng, n * 2, cfg.vocab_size, 2, 12), 16)


def test_distill_loss_matches_two_forward_passes(rng):
    tc = tiny_config(layers=4)
    t = tiny_weights(tc, seed=2)
    s, sc = init_student(t, tc, 2)
    packs = _packs(rng, tc)[:3]
    tokens, positions, masks = collate(packs, torch.float64)
    keep = non_pad_mask(packs)
    got = distill_loss(s, sc, t, tc, tokens, positions, masks, keep)
    ht = forward(t, tc, tokens, positions, masks).last_hidden.numpy()
    hs = forward(s, sc, tokens, positions, masks).last_hidden.numpy()
    k = keep.numpy()
    want = np.mean((hs[k] - ht[k]) ** 2)
    assert float(got) == pytest.approx(want, rel=1e-12)
    assert float(distill_loss(t, tc, t, tc, tokens, positions, masks, keep)) == 0.0


def test_distill_width_mismatch(rng):
    tc = tiny_config(layers=2)
    sc = tiny_config(layers=1, hidden=8)
    with pytest.raises(ValueError, match="width"):
        distill(tiny_weights(tc), tc, _packs(rng, tc), DistillSpec(1),
                student=(tiny_weights(sc), sc))


def test_distill_reduces_mse_and_leaves_teacher(rng, tmp_path):
    tc = tiny_config(layers=4, hidden=16, positions=16)
    t = init_weights(tc, 0, std=0.1, dtype=torch.float32)
    before = {k: v.clone() for k, v in t.items()}
    packs = _packs(rng, tc, 24)
    s0, sc = init_student(t, tc, 2)
    start = eval_distill_mse(s0, sc, t, tc, packs)
    spec = DistillSpec(2, epochs=3, batch_size=4, peak_lr=3e-3, warmup_steps=2)
    res = distill(t, tc, packs, spec, seed=1, out_dir=tmp_path)
    assert eval_distill_mse(res.weights, res.config, t, tc, packs) < 0.5 * start
    assert all(torch.equal(before[k], t[k]) for k in t)
    assert len(res.checkpoints) == 3
    assert (tmp_path / "distill_epoch3.ckpt").is_dir()
    assert len((tmp_path / "distill_log.jsonl").read_text().splitlines()) == len(res.log)


def test_distill_deterministic(rng):
    tc = tiny_config(layers=2, positions=16)
    t = init_weights(tc, 0, std=0.1)
    packs = _packs(rng, tc, 6)
    spec = DistillSpec(1, batch_size=4, max_steps=2)
    a = distill(t, tc, packs, spec, seed=3).weights
    b = distill(t, tc, packs, spec, seed=3).weights
    assert all(torch.equal(a[k], b[k]) for k in a)
    c = distill(t, tc, packs, DistillSpec(1, batch_size=4, max_steps=2, corrupt_inputs=True), seed=3).weights
    assert not all(torch.equal(a[k], c[k]) for k in a)


def test_progressive_chain(rng):
    tc = tiny_config(layers=4, positions=16)
    t = init_weights(tc, 0, std=0.1)
    packs = _packs(rng, tc, 4)
    spec = DistillSpec(0, batch_size=4, max_steps=1)
    res = progressive_distill(t, tc, packs, [3, 1], spec, seed=0)
    assert [r.config.num_layers for r in res.stages] == [3, 1]
    assert res.final is res.stages[-1]
    with pytest.raises(ValueError):
        progressive_distill(t, tc, packs, [2, 2], spec)
    with pytest.raises(ValueError):
        progressive_distill(t, tc, packs, [], spec)
