"""Tensor ops used by the encoder, with the contracts the rest of the package relies on.

Tensors are ``torch.Tensor``; the reverse-mode tape is torch's autograd graph.
Each op here adds the shape/error contract on top and the masked softmax adds
hard zeroing of forbidden positions. ``finite_diff_check`` is an independent
numerical oracle and never touches the autograd machinery it is checking.
"""

from __future__ import annotations

from typing import Callable, Optional

import torch
import torch.nn.functional as F

# Additive-mask value for forbidden attention entries.
FORBIDDEN = -1e9

Tensor = torch.Tensor


class ShapeError(ValueError):
    pass


class DegenerateRowError(ValueError):
    """A softmax row had every position forbidden."""


def tensor(data, dtype=torch.float64, requires_grad: bool = False) -> Tensor:
    return torch.tensor(data, dtype=dtype, requires_grad=requires_grad)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes.

    ``a`` may carry leading batch axes when ``b`` is a plain matrix (the
    projection case), or both may carry identical leading axes (attention).
    """
    if a.dim() < 2 or b.dim() < 2:
        raise ShapeError(f"matmul needs matrices, got {tuple(a.shape)} and {tuple(b.shape)}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(
            f"matmul inner dimensions differ: {tuple(a.shape)} @ {tuple(b.shape)}"
        )
    if b.dim() > 2 and a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(
            f"matmul batch axes differ: {tuple(a.shape)} @ {tuple(b.shape)}"
        )
    return torch.matmul(a, b)


def add_bias(x: Tensor, bias: Tensor) -> Tensor:
    if bias.dim() != 1 or x.shape[-1] != bias.shape[0]:
        raise ShapeError(f"bias {tuple(bias.shape)} does not match {tuple(x.shape)}")
    return x + bias


def softmax_masked(logits: Tensor, additive_mask: Tensor) -> Tensor:
    """Softmax over the last axis of ``logits + additive_mask``.

    Mask entries are 0 (allowed) or ``FORBIDDEN``. The mask must match the
    trailing axes of ``logits``; any extra leading axes of ``logits`` (heads)
    are broadcast over. Forbidden entries come out as exact zeros.
    """
    if additive_mask.shape[-1] != logits.shape[-1]:
        raise ShapeError(
            f"mask {tuple(additive_mask.shape)} does not match logits {tuple(logits.shape)}"
        )
    allowed = additive_mask == 0
    if not bool(allowed.any(dim=-1).all()):
        rows = (~allowed.any(dim=-1)).nonzero()
        raise DegenerateRowError(f"softmax row with no allowed position at index {rows[0].tolist()}")
    # torch.softmax subtracts the row max internally
    probs = torch.softmax(logits + additive_mask, dim=-1)
    return probs * allowed.to(probs.dtype)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    h = x.shape[-1]
    if gain.shape != (h,) or bias.shape != (h,):
        raise ShapeError(
            f"layer_norm params {tuple(gain.shape)}/{tuple(bias.shape)} for width {h}"
        )
    return F.layer_norm(x, (h,), gain, bias, eps)


def gelu(x: Tensor) -> Tensor:
    # exact erf form
    return F.gelu(x)


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` on every leaf that requires it. Repeated uses of a
    tensor accumulate."""
    if loss.numel() != 1 or loss.dim() > 1:
        raise ValueError(f"backward needs a scalar loss, got shape {tuple(loss.shape)}")
    if not loss.requires_grad:
        raise ValueError("loss was not produced from any tensor requiring grad")
    loss.reshape(()).backward()


class FiniteDiffFailure(ArithmeticError):
    def __init__(self, index: tuple, message: str):
        super().__init__(f"{message} at index {index}")
        self.index = index


def finite_diff_check(
    f: Callable[[Tensor], Tensor],
    x: Tensor,
    eps: float = 1e-6,
    analytic: Optional[Tensor] = None,
    indices: Optional[list[int]] = None,
) -> float:
    """Max relative error between the analytic gradient of ``f`` at ``x`` and
    central differences.

    ``analytic`` defaults to one backward pass through ``f``. ``indices``
    restricts the comparison to those flat positions (all by default).
    """
    if x.dtype != torch.float64:
        raise TypeError("finite_diff_check needs a float64 input")
    base = x.detach().clone()
    if analytic is None:
        xg = base.clone().requires_grad_(True)
        out = f(xg)
        backward(out)
        analytic = xg.grad if xg.grad is not None else torch.zeros_like(base)
    analytic = analytic.detach().reshape(-1)

    flat = base.reshape(-1)
    worst = 0.0
    positions = range(flat.numel()) if indices is None else indices
    with torch.no_grad():
        for i in positions:
            plus = flat.clone()
            plus[i] += eps
            minus = flat.clone()
            minus[i] -= eps
            fp = float(f(plus.reshape(base.shape)))
            fm = float(f(minus.reshape(base.shape)))
            idx = tuple(torch.unravel_index(torch.tensor(i), base.shape))
            idx = tuple(int(j) for j in idx)
            if not (torch.isfinite(torch.tensor([fp, fm])).all()):
                raise FiniteDiffFailure(idx, "non-finite function value")
            numeric = (fp - fm) / (2 * eps)
            a = float(analytic[i])
            denom = max(abs(a), abs(numeric), 1e-12)
            worst = max(worst, abs(a - numeric) / denom)
    return worst
