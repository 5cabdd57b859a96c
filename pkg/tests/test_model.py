import math

import numpy as np
import pytest
import torch

from longctx.autograd import finite_diff_check
from longctx.model import (
    BoundsError,
    EncoderConfig,
    HeadSpec,
    attach_head,
    count_params,
    estimate_flops,
    extend_positions,
    forward,
    full_mask,
    head_forward,
    init_weights,
    padding_mask,
    slice_layers,
    validate_weights,
)
from longctx.train import mlm_loss

from conftest import tiny_config, tiny_weights


# -- numpy reference encoder (loops over heads, no shared code) -------------

_erf = np.vectorize(math.erf)


def _ln(x, g, b, eps):
    mu = x.mean(-1, keepdims=True)
    var = ((x - mu) ** 2).mean(-1, keepdims=True)
    return (x - mu) / np.sqrt(var + eps) * g + b


def reference_forward(w, cfg, tokens, positions, allowed):
    w = {k: v.numpy() for k, v in w.items()}
    x = _ln(w["token_embedding"][tokens] + w["position_embedding"][positions],
            w["emb_ln.gain"], w["emb_ln.bias"], cfg.layer_norm_eps)
    d = cfg.hidden // cfg.num_heads
    for i in range(cfg.num_layers):
        p = f"layers.{i}."
        q = x @ w[p + "attn.wq"] + w[p + "attn.bq"]
        k = x @ w[p + "attn.wk"] + w[p + "attn.bk"]
        v = x @ w[p + "attn.wv"] + w[p + "attn.bv"]
        ctx = np.zeros_like(x)
        for h in range(cfg.num_heads):
            sl = slice(h * d, (h + 1) * d)
            s = q[:, sl] @ k[:, sl].T / math.sqrt(d)
            s = np.where(allowed, s, -np.inf)
            e = np.exp(s - s.max(-1, keepdims=True))
            ctx[:, sl] = (e / e.sum(-1, keepdims=True)) @ v[:, sl]
        x = _ln(x + ctx @ w[p + "attn.wo"] + w[p + "attn.bo"],
                w[p + "attn_ln.gain"], w[p + "attn_ln.bias"], cfg.layer_norm_eps)
        hmid = x @ w[p + "ffn.w_in"] + w[p + "ffn.b_in"]
        hmid = hmid * 0.5 * (1 + _erf(hmid / math.sqrt(2)))
        x = _ln(x + hmid @ w[p + "ffn.w_out"] + w[p + "ffn.b_out"],
                w[p + "ffn_ln.gain"], w[p + "ffn_ln.bias"], cfg.layer_norm_eps)
    return x


def test_forward_matches_reference(rng):
    cfg = tiny_config(layers=2, hidden=16, heads=4)
    w = tiny_weights(cfg, seed=3)
    tokens = rng.integers(4, cfg.vocab_size, size=10)
    positions = np.arange(10)
    out = forward(w, cfg, torch.tensor(tokens)[None]).last_hidden[0].numpy()
    ref = reference_forward(w, cfg, tokens, positions, np.ones((10, 10), bool))
    np.testing.assert_allclose(out, ref, rtol=0, atol=1e-10)


def test_forward_with_mask_matches_reference(rng):
    cfg = tiny_config()
    w = tiny_weights(cfg, seed=4)
    tokens = rng.integers(4, cfg.vocab_size, size=8)
    positions = np.array([0, 1, 2, 0, 1, 2, 3, 4])
    allowed = np.zeros((8, 8), bool)
    allowed[:3, :3] = True
    allowed[3:, 3:] = True
    mask = torch.where(torch.tensor(allowed), 0.0, -1e9).to(torch.float64)
    out = forward(w, cfg, torch.tensor(tokens)[None], torch.tensor(positions)[None], mask[None])
    ref = reference_forward(w, cfg, tokens, positions, allowed)
    np.testing.assert_allclose(out.last_hidden[0].numpy(), ref, rtol=0, atol=1e-10)


def test_count_params_matches_closed_form():
    cfg = EncoderConfig(3, 8, 2, 50, 20, ffn_dim=24)
    V, P, h, f, L = 50, 20, 8, 24, 3
    per_layer = 4 * h * h + 4 * h + 2 * h * f + f + h + 4 * h
    emb = V * h + P * h + 2 * h
    mlm = h * h + h + 2 * h + V
    assert count_params(cfg) == (emb + L * per_layer + mlm, L * per_layer + mlm)
    assert count_params(cfg)[0] == sum(t.numel() for t in init_weights(cfg, 0).values())


def test_untied_output_adds_projection():
    tied = count_params(EncoderConfig(1, 8, 2, 50, 20))[0]
    untied = count_params(EncoderConfig(1, 8, 2, 50, 20, tie_output_embedding=False))[0]
    assert untied - tied == 8 * 50


@pytest.mark.parametrize(
    "layers,hidden,vocab,positions,total,no_emb",
    [
        (24, 1024, 128000, 8192, 443e6, 303e6),
        (12, 1024, 128000, 8192, 291e6, 152e6),
        (6, 1024, 128000, 8192, 216e6, 77e6),
        (12, 768, 50000, 514, 124e6, 86e6),
    ],
)
def test_published_parameter_counts(layers, hidden, vocab, positions, total, no_emb):
    got_total, got_no_emb = count_params(EncoderConfig(layers, hidden, hidden // 64, vocab, positions))
    assert got_total == pytest.approx(total, rel=0.02)
    assert got_no_emb == pytest.approx(no_emb, rel=0.02)


@pytest.mark.parametrize(
    "layers,hidden,gflops", [(24, 1024, 167.5), (12, 1024, 83.8), (6, 1024, 41.9), (12, 768, 48.3)]
)
def test_published_flops(layers, hidden, gflops):
    cfg = EncoderConfig(layers, hidden, hidden // 64, 128000, 8192)
    assert estimate_flops(cfg, 512) == pytest.approx(gflops, abs=0.1)


def test_flops_closed_form_small():
    # 2 layers, s=4, h=2, f=8: 4*4*4 + 2*4*2*8 + 2*16*2 = 64 + 128 + 64 per layer
    cfg = EncoderConfig(2, 2, 1, 10, 10, ffn_dim=8)
    assert estimate_flops(cfg, 4) == 2 * 256 / 1e9
    with pytest.raises(ValueError):
        estimate_flops(cfg, 0)


def test_config_validation():
    with pytest.raises(ValueError):
        EncoderConfig(2, 10, 3, 20, 8)
    with pytest.raises(ValueError):
        EncoderConfig(2, 8, 2, 3, 8)
    assert EncoderConfig.from_dict(tiny_config().to_dict()) == tiny_config()


def test_bounds_errors(cfg):
    w = tiny_weights(cfg)
    with pytest.raises(BoundsError, match="token id 24"):
        forward(w, cfg, torch.tensor([[4, 24]]))
    with pytest.raises(BoundsError, match="position"):
        forward(w, cfg, torch.zeros(1, cfg.max_positions + 1, dtype=torch.long))


def test_validate_weights(cfg):
    w = tiny_weights(cfg)
    validate_weights(w, cfg)
    w["layers.1.ffn.w_in"] = torch.zeros(3, 3)
    with pytest.raises(ValueError, match="layers.1.ffn.w_in"):
        validate_weights(w, cfg)
    del w["emb_ln.bias"]
    with pytest.raises(KeyError):
        validate_weights(w, cfg)


def test_init_deterministic(cfg):
    a, b = init_weights(cfg, 5), init_weights(cfg, 5)
    assert all(torch.equal(a[k], b[k]) for k in a)
    assert not torch.equal(a["token_embedding"], init_weights(cfg, 6)["token_embedding"])


def test_padding_does_not_change_real_tokens(cfg, rng):
    w = tiny_weights(cfg)
    toks = torch.tensor(rng.integers(4, cfg.vocab_size, size=(1, 5)))
    alone = forward(w, cfg, toks).last_hidden
    padded = torch.cat([toks, torch.zeros(1, 3, dtype=torch.long)], dim=1)
    out = forward(w, cfg, padded, attn_mask=padding_mask([5], 8, torch.float64)).last_hidden
    torch.testing.assert_close(out[:, :5], alone, rtol=0, atol=1e-12)


def test_extend_positions_preserves_outputs(cfg, rng):
    w = tiny_weights(cfg)
    w2, cfg2 = extend_positions(w, cfg, 64, seed=1)
    assert cfg2.max_positions == 64 and w2["position_embedding"].shape == (64, cfg.hidden)
    assert torch.equal(w2["position_embedding"][:32], w["position_embedding"])
    toks = torch.tensor(rng.integers(4, cfg.vocab_size, size=(2, 32)))
    assert torch.equal(forward(w, cfg, toks).last_hidden, forward(w2, cfg2, toks).last_hidden)
    forward(w2, cfg2, torch.full((1, 64), 5))
    with pytest.raises(ValueError):
        extend_positions(w, cfg, 32)


def test_slice_layers(cfg):
    w = tiny_weights(cfg, seed=1)
    same, c = slice_layers(w, cfg, [0, 1])
    assert c == cfg and all(torch.equal(same[k], w[k]) for k in w)
    top, c1 = slice_layers(w, cfg, [1])
    assert c1.num_layers == 1
    assert torch.equal(top["layers.0.attn.wq"], w["layers.1.attn.wq"])
    assert not any(k.startswith("layers.1.") for k in top)
    for bad in ([], [1, 0], [0, 2]):
        with pytest.raises(ValueError):
            slice_layers(w, cfg, bad)


def test_heads(cfg):
    w = attach_head(tiny_weights(cfg), cfg, HeadSpec("multi_label", 5), seed=0)
    hidden = forward(w, cfg, torch.tensor([[4, 5, 6]])).last_hidden
    assert head_forward(w, hidden).shape == (1, 5)
    with pytest.raises(ValueError):
        HeadSpec("regression", 2)
    with pytest.raises(ValueError):
        HeadSpec("single_label", 1)
    with pytest.raises(ValueError):
        HeadSpec("tagging", 2)


def _flat_mlm_loss(cfg, w, tokens, labels):
    names = list(w)
    shapes = [w[n].shape for n in names]
    sizes = [w[n].numel() for n in names]

    def f(v):
        parts = torch.split(v, sizes)
        ww = {n: p.reshape(s) for n, p, s in zip(names, parts, shapes)}
        return mlm_loss(ww, cfg, tokens, None, full_mask(1, tokens.shape[1], torch.float64), labels)

    return f, torch.cat([w[n].reshape(-1) for n in names]), names, sizes


def test_full_mlm_gradient_every_parameter():
    # exhaustive over every scalar parameter of a 2-layer h=16 encoder
    cfg = tiny_config(layers=2, hidden=16, heads=2, vocab=24, positions=16)
    w = tiny_weights(cfg, seed=0)
    g = torch.Generator().manual_seed(7)
    tokens = torch.randint(4, 24, (1, 8), generator=g)
    labels = torch.full((1, 8), -100)
    labels[0, [1, 4, 6]] = tokens[0, [1, 4, 6]]
    tokens[0, [1, 4]] = 2
    f, x, names, sizes = _flat_mlm_loss(cfg, w, tokens, labels)
    xg = x.clone().requires_grad_(True)
    f(xg).backward()
    offsets = np.cumsum([0] + sizes)
    grad = xg.grad
    large, small, bias_k = [], [], []
    for n, lo, hi in zip(names, offsets[:-1], offsets[1:]):
        for i in range(lo, hi):
            if n.endswith("attn.bk"):
                # shifts every logit in a softmax row equally: exact gradient 0
                bias_k.append(i)
            elif abs(float(grad[i])) >= 1e-5:
                large.append(i)
            else:
                small.append(i)
    assert finite_diff_check(f, x, analytic=grad, indices=large) < 1e-4
    # below ~1e-5 the central difference is dominated by float64 rounding
    # (about 3e-10 absolute at eps=1e-6), so compare absolutely there
    eps = 1e-6
    with torch.no_grad():
        for i in small + bias_k:
            plus, minus = x.clone(), x.clone()
            plus[i] += eps
            minus[i] -= eps
            numeric = (float(f(plus)) - float(f(minus))) / (2 * eps)
            assert abs(numeric - float(grad[i])) < 2e-9, names
    assert grad[bias_k].abs().max() < 1e-12
