"""RoBERTa-style post-layer-norm encoder over a flat named-parameter map."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, replace
from typing import Optional

import torch

from .autograd import (
    FORBIDDEN,
    add_bias,
    gelu,
    layer_norm,
    matmul,
    softmax_masked,
)

PAD_ID, UNK_ID, MASK_ID, SEP_ID = 0, 1, 2, 3
NUM_RESERVED = 4

Weights = dict[str, torch.Tensor]


@dataclass
class EncoderConfig:
    num_layers: int
    hidden: int
    num_heads: int
    vocab_size: int
    max_positions: int
    ffn_dim: Optional[int] = None
    layer_norm_eps: float = 1e-5
    tie_output_embedding: bool = True

    def __post_init__(self):
        if self.ffn_dim is None:
            self.ffn_dim = 4 * self.hidden
        if self.num_layers < 0:
            raise ValueError("num_layers must be non-negative")
        if self.hidden < 1 or self.num_heads < 1 or self.hidden % self.num_heads:
            raise ValueError(
                f"hidden ({self.hidden}) must be a positive multiple of num_heads ({self.num_heads})"
            )
        if self.max_positions < 1:
            raise ValueError("max_positions must be >= 1")
        if self.vocab_size < NUM_RESERVED:
            raise ValueError(f"vocab_size must be >= {NUM_RESERVED} (reserved specials)")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "EncoderConfig":
        return cls(**d)


@dataclass(frozen=True)
class HeadSpec:
    kind: str  # single_label | multi_label | regression
    num_outputs: int = 1

    def __post_init__(self):
        if self.kind == "single_label" and self.num_outputs < 2:
            raise ValueError("single_label head needs at least 2 classes")
        if self.kind == "multi_label" and self.num_outputs < 1:
            raise ValueError("multi_label head needs at least 1 label")
        if self.kind == "regression" and self.num_outputs != 1:
            raise ValueError("regression head has a single output")
        if self.kind not in ("single_label", "multi_label", "regression"):
            raise ValueError(f"unknown head kind {self.kind!r}")


@dataclass
class EncoderOutput:
    hidden_states: list[torch.Tensor]  # embeddings output, then one per layer
    logits: Optional[torch.Tensor] = None

    @property
    def last_hidden(self) -> torch.Tensor:
        return self.hidden_states[-1]


def layer_names(i: int) -> list[str]:
    p = f"layers.{i}."
    return [
        p + n
        for n in (
            "attn.wq", "attn.bq", "attn.wk", "attn.bk", "attn.wv", "attn.bv",
            "attn.wo", "attn.bo", "attn_ln.gain", "attn_ln.bias",
            "ffn.w_in", "ffn.b_in", "ffn.w_out", "ffn.b_out",
            "ffn_ln.gain", "ffn_ln.bias",
        )
    ]


def param_shapes(config: EncoderConfig) -> dict[str, tuple[int, ...]]:
    """Every named parameter and its shape, in canonical order."""
    h, f, V, P = config.hidden, config.ffn_dim, config.vocab_size, config.max_positions
    shapes: dict[str, tuple[int, ...]] = {
        "token_embedding": (V, h),
        "position_embedding": (P, h),
        "emb_ln.gain": (h,),
        "emb_ln.bias": (h,),
    }
    for i in range(config.num_layers):
        for name in layer_names(i):
            leaf = name.split(".", 2)[2]
            shapes[name] = {
                "attn.wq": (h, h), "attn.wk": (h, h), "attn.wv": (h, h), "attn.wo": (h, h),
                "attn.bq": (h,), "attn.bk": (h,), "attn.bv": (h,), "attn.bo": (h,),
                "attn_ln.gain": (h,), "attn_ln.bias": (h,),
                "ffn.w_in": (h, f), "ffn.b_in": (f,), "ffn.w_out": (f, h), "ffn.b_out": (h,),
                "ffn_ln.gain": (h,), "ffn_ln.bias": (h,),
            }[leaf]
    shapes["mlm.dense_w"] = (h, h)
    shapes["mlm.dense_b"] = (h,)
    shapes["mlm.ln.gain"] = (h,)
    shapes["mlm.ln.bias"] = (h,)
    if not config.tie_output_embedding:
        shapes["mlm.output_w"] = (h, V)
    shapes["mlm.output_bias"] = (V,)
    return shapes


EMBEDDING_PARAMS = ("token_embedding", "position_embedding", "emb_ln.gain", "emb_ln.bias")


def init_weights(
    config: EncoderConfig, seed: int, std: float = 0.02, dtype=torch.float32
) -> Weights:
    gen = torch.Generator().manual_seed(seed)
    weights: Weights = {}
    for name, shape in param_shapes(config).items():
        if name.endswith(".gain"):
            t = torch.ones(shape, dtype=torch.float64)
        elif len(shape) == 1:
            t = torch.zeros(shape, dtype=torch.float64)
        else:
            t = torch.randn(shape, generator=gen, dtype=torch.float64) * std
        weights[name] = t.to(dtype)
    return weights


def validate_weights(weights: Weights, config: EncoderConfig) -> None:
    expected = param_shapes(config)
    for name, shape in expected.items():
        if name not in weights:
            raise KeyError(f"missing parameter {name}")
        if tuple(weights[name].shape) != shape:
            raise ValueError(
                f"parameter {name} has shape {tuple(weights[name].shape)}, expected {shape}"
            )


def count_params(config: EncoderConfig) -> tuple[int, int]:
    """(total, excluding embedding). The embedding block is token + position
    tables plus the embedding layer norm; the MLM head counts as non-embedding."""
    shapes = param_shapes(config)
    total = sum(math.prod(s) for s in shapes.values())
    emb = sum(math.prod(shapes[n]) for n in EMBEDDING_PARAMS)
    return total, total - emb


def estimate_flops(config: EncoderConfig, seq_len: int) -> float:
    """GFLOPs of one forward pass, one multiply-accumulate = one FLOP.

    Counts the Q/K/V/O projections and both FFN matmuls plus the two
    attention matmuls; embeddings, norms, activations and heads are ignored.
    """
    if seq_len < 1:
        raise ValueError("seq_len must be >= 1")
    s, h, f = seq_len, config.hidden, config.ffn_dim
    per_layer = 4 * s * h * h + 2 * s * h * f + 2 * s * s * h
    return config.num_layers * per_layer / 1e9


class BoundsError(IndexError):
    pass


def _check_bounds(ids: torch.Tensor, limit: int, what: str) -> None:
    bad = (ids < 0) | (ids >= limit)
    if bool(bad.any()):
        idx = tuple(bad.nonzero()[0].tolist())
        raise BoundsError(f"{what} id {int(ids[idx])} at index {idx} outside [0, {limit})")


def embed(weights: Weights, config: EncoderConfig, tokens, positions) -> torch.Tensor:
    _check_bounds(tokens, config.vocab_size, "token")
    _check_bounds(positions, config.max_positions, "position")
    x = weights["token_embedding"][tokens] + weights["position_embedding"][positions]
    return layer_norm(x, weights["emb_ln.gain"], weights["emb_ln.bias"], config.layer_norm_eps)


def _attention(weights: Weights, config: EncoderConfig, i: int, x, mask):
    p = f"layers.{i}.attn."
    B, S, h = x.shape
    nh = config.num_heads
    d = h // nh

    def heads(t):
        return t.reshape(B, S, nh, d).transpose(1, 2)

    q = heads(add_bias(matmul(x, weights[p + "wq"]), weights[p + "bq"])) / math.sqrt(d)
    k = heads(add_bias(matmul(x, weights[p + "wk"]), weights[p + "bk"]))
    v = heads(add_bias(matmul(x, weights[p + "wv"]), weights[p + "bv"]))
    scores = matmul(q, k.transpose(-1, -2))
    probs = softmax_masked(scores, mask[:, None])
    ctx = matmul(probs, v).transpose(1, 2).reshape(B, S, h)
    return add_bias(matmul(ctx, weights[p + "wo"]), weights[p + "bo"])


def encoder_layer(weights: Weights, config: EncoderConfig, i: int, x, mask):
    p = f"layers.{i}."
    eps = config.layer_norm_eps
    x = layer_norm(
        x + _attention(weights, config, i, x, mask),
        weights[p + "attn_ln.gain"], weights[p + "attn_ln.bias"], eps,
    )
    hmid = gelu(add_bias(matmul(x, weights[p + "ffn.w_in"]), weights[p + "ffn.b_in"]))
    out = add_bias(matmul(hmid, weights[p + "ffn.w_out"]), weights[p + "ffn.b_out"])
    return layer_norm(x + out, weights[p + "ffn_ln.gain"], weights[p + "ffn_ln.bias"], eps)


def mlm_logits(weights: Weights, config: EncoderConfig, hidden: torch.Tensor) -> torch.Tensor:
    """Vocabulary logits for hidden states of shape [..., h]."""
    x = gelu(add_bias(matmul(hidden, weights["mlm.dense_w"]), weights["mlm.dense_b"]))
    x = layer_norm(x, weights["mlm.ln.gain"], weights["mlm.ln.bias"], config.layer_norm_eps)
    out_w = (
        weights["token_embedding"].t()
        if config.tie_output_embedding
        else weights["mlm.output_w"]
    )
    return add_bias(matmul(x, out_w), weights["mlm.output_bias"])


def full_mask(batch: int, seq: int, dtype=torch.float32) -> torch.Tensor:
    return torch.zeros(batch, seq, seq, dtype=dtype)


def padding_mask(lengths: list[int], seq: int, dtype=torch.float32) -> torch.Tensor:
    """Per-row mask for right-padded single sequences: real tokens attend to
    each other, padding positions only to themselves."""
    mask = torch.full((len(lengths), seq, seq), FORBIDDEN, dtype=dtype)
    for b, n in enumerate(lengths):
        mask[b, :n, :n] = 0
        idx = torch.arange(n, seq)
        mask[b, idx, idx] = 0
    return mask


def forward(
    weights: Weights,
    config: EncoderConfig,
    tokens: torch.Tensor,
    positions: Optional[torch.Tensor] = None,
    attn_mask: Optional[torch.Tensor] = None,
    compute_logits: bool = False,
) -> EncoderOutput:
    """Run the encoder on ``tokens`` [batch, seq].

    ``positions`` defaults to 0..seq-1 for every row; ``attn_mask`` is an
    additive [batch, seq, seq] mask and defaults to full attention.
    """
    tokens = torch.as_tensor(tokens, dtype=torch.long)
    if tokens.dim() == 1:
        tokens = tokens[None]
    B, S = tokens.shape
    if positions is None:
        positions = torch.arange(S).expand(B, S)
    positions = torch.as_tensor(positions, dtype=torch.long).reshape(B, S)
    dtype = weights["token_embedding"].dtype
    if attn_mask is None:
        attn_mask = full_mask(B, S, dtype)
    attn_mask = torch.as_tensor(attn_mask).to(dtype)
    if attn_mask.dim() == 2:
        attn_mask = attn_mask[None].expand(B, S, S)
    if tuple(attn_mask.shape) != (B, S, S):
        raise ValueError(f"attention mask shape {tuple(attn_mask.shape)} != {(B, S, S)}")

    x = embed(weights, config, tokens, positions)
    states = [x]
    for i in range(config.num_layers):
        x = encoder_layer(weights, config, i, x, attn_mask)
        states.append(x)
    logits = mlm_logits(weights, config, x) if compute_logits else None
    return EncoderOutput(states, logits)


def extend_positions(
    weights: Weights,
    config: EncoderConfig,
    new_max_positions: int,
    init_std: float = 0.02,
    seed: int = 0,
) -> tuple[Weights, EncoderConfig]:
    """Grow the learned position table. Old rows are copied; new rows are
    drawn from N(0, init_std^2) using ``seed``."""
    old = config.max_positions
    if new_max_positions <= old:
        raise ValueError(f"new_max_positions {new_max_positions} must exceed current {old}")
    table = weights["position_embedding"]
    gen = torch.Generator().manual_seed(seed)
    fresh = torch.randn(new_max_positions - old, table.shape[1], generator=gen, dtype=torch.float64)
    fresh = (fresh * init_std).to(table.dtype)
    out = {k: v.detach().clone() for k, v in weights.items()}
    out["position_embedding"] = torch.cat([table.detach().clone(), fresh], dim=0)
    return out, replace(config, max_positions=new_max_positions)


def slice_layers(
    weights: Weights, config: EncoderConfig, keep_indices: list[int]
) -> tuple[Weights, EncoderConfig]:
    """Keep only the listed encoder layers, renumbered in order."""
    keep = list(keep_indices)
    if not keep:
        raise ValueError("keep_indices must be non-empty")
    for a, b in zip(keep, keep[1:]):
        if b <= a:
            raise ValueError(f"keep_indices must be strictly increasing, got {keep}")
    if keep[0] < 0 or keep[-1] >= config.num_layers:
        raise ValueError(f"keep_indices {keep} out of range for {config.num_layers} layers")
    out: Weights = {}
    for name, t in weights.items():
        if not name.startswith("layers."):
            out[name] = t.detach().clone()
    for new_i, old_i in enumerate(keep):
        for old_name, new_name in zip(layer_names(old_i), layer_names(new_i)):
            out[new_name] = weights[old_name].detach().clone()
    new_config = replace(config, num_layers=len(keep))
    return out, new_config


# -- task heads -------------------------------------------------------------

HEAD_PARAMS = ("head.dense_w", "head.dense_b", "head.out_w", "head.out_b")


def attach_head(
    weights: Weights, config: EncoderConfig, head: HeadSpec, seed: int, std: float = 0.02
) -> Weights:
    """Copy of ``weights`` plus a fresh head: dense h->h, tanh, projection."""
    gen = torch.Generator().manual_seed(seed)
    h = config.hidden
    dtype = weights["token_embedding"].dtype
    out = {k: v.detach().clone() for k, v in weights.items() if not k.startswith("head.")}
    out["head.dense_w"] = (torch.randn(h, h, generator=gen, dtype=torch.float64) * std).to(dtype)
    out["head.dense_b"] = torch.zeros(h, dtype=dtype)
    out["head.out_w"] = (
        torch.randn(h, head.num_outputs, generator=gen, dtype=torch.float64) * std
    ).to(dtype)
    out["head.out_b"] = torch.zeros(head.num_outputs, dtype=dtype)
    return out


def head_forward(weights: Weights, hidden: torch.Tensor) -> torch.Tensor:
    """Head outputs from the first-token state of ``hidden`` [batch, seq, h]."""
    pooled = hidden[:, 0]
    x = torch.tanh(add_bias(matmul(pooled, weights["head.dense_w"]), weights["head.dense_b"]))
    return add_bias(matmul(x, weights["head.out_w"]), weights["head.out_b"])


def encoder_only(weights: Weights) -> Weights:
    return {k: v for k, v in weights.items() if not k.startswith("head.")}


def cast(weights: Weights, dtype) -> Weights:
    return {k: v.detach().to(dtype).clone() for k, v in weights.items()}
