"""AdamW, warmup + polynomial decay, and name-based parameter freezing."""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from typing import Callable, Iterable, Optional, Union

import torch

Weights = dict[str, torch.Tensor]


@dataclass
class ScheduleSpec:
    peak_lr: float
    warmup_steps: int
    total_steps: int
    end_lr: float = 0.0
    power: float = 1.0

    def __post_init__(self):
        if self.peak_lr <= 0:
            raise ValueError("peak_lr must be positive")
        if not 0 <= self.warmup_steps <= self.total_steps:
            raise ValueError(
                f"need 0 <= warmup_steps ({self.warmup_steps}) <= total_steps ({self.total_steps})"
            )


def lr_at(step: int, s: ScheduleSpec) -> float:
    """Linear warmup to ``peak_lr`` then polynomial decay to ``end_lr``."""
    if step < 0:
        raise ValueError("step must be non-negative")
    if step < s.warmup_steps:
        return s.peak_lr * step / s.warmup_steps
    if step >= s.total_steps:
        return s.end_lr if s.total_steps > s.warmup_steps else s.peak_lr
    remaining = 1 - (step - s.warmup_steps) / (s.total_steps - s.warmup_steps)
    return (s.peak_lr - s.end_lr) * remaining ** s.power + s.end_lr


@dataclass
class AdamWState:
    betas: tuple[float, float] = (0.9, 0.98)
    eps: float = 1e-6
    weight_decay: float = 0.01
    step: int = 0
    exp_avg: dict[str, torch.Tensor] = field(default_factory=dict)
    exp_avg_sq: dict[str, torch.Tensor] = field(default_factory=dict)


class NonFiniteGradient(FloatingPointError):
    pass


def adamw_step(
    params: Weights,
    grads: dict[str, Optional[torch.Tensor]],
    state: AdamWState,
    lr: float,
    frozen: Iterable[str] = (),
    row_masks: Optional[dict[str, torch.Tensor]] = None,
) -> None:
    """One decoupled-weight-decay Adam update, in place on ``params``.

    Names in ``frozen`` are skipped entirely (no update, no moment state).
    ``row_masks`` maps a name to a boolean vector over its first axis; only
    the marked rows are updated.
    """
    if lr < 0:
        raise ValueError("lr must be non-negative")
    frozen = set(frozen)
    row_masks = row_masks or {}
    for name, g in grads.items():
        if name in frozen or g is None:
            continue
        if not bool(torch.isfinite(g).all()):
            raise NonFiniteGradient(f"non-finite gradient for parameter {name}")

    state.step += 1
    b1, b2 = state.betas
    bc1 = 1 - b1 ** state.step
    bc2 = 1 - b2 ** state.step
    with torch.no_grad():
        for name, p in params.items():
            if name in frozen:
                continue
            g = grads.get(name)
            if g is None:
                g = torch.zeros_like(p)
            if name not in state.exp_avg:
                state.exp_avg[name] = torch.zeros_like(p)
                state.exp_avg_sq[name] = torch.zeros_like(p)
            m, v = state.exp_avg[name], state.exp_avg_sq[name]
            m.mul_(b1).add_(g, alpha=1 - b1)
            v.mul_(b2).addcmul_(g, g, value=1 - b2)
            denom = (v / bc2).sqrt_().add_(state.eps)
            update = (m / bc1) / denom + state.weight_decay * p
            if name in row_masks:
                update = update * row_masks[name].to(update.dtype).reshape(-1, *([1] * (p.dim() - 1)))
            p.sub_(lr * update)


Predicate = Union[str, Callable[[str], bool], None]


def freeze_set(names: Iterable[str], predicate: Predicate) -> set[str]:
    """Names matched by ``predicate`` (a regex, callable, or None for nothing).

    Raises if every parameter would be frozen.
    """
    names = list(names)
    if predicate is None:
        return set()
    if isinstance(predicate, str):
        rx = re.compile(predicate)
        match = lambda n: rx.fullmatch(n) is not None  # noqa: E731
    else:
        match = predicate
    frozen = {n for n in names if match(n)}
    if names and len(frozen) == len(names):
        raise ValueError("freeze predicate leaves no trainable parameter")
    return frozen


def apply_freeze(weights: Weights, predicate: Predicate) -> set[str]:
    frozen = freeze_set(weights.keys(), predicate)
    for name, t in weights.items():
        t.requires_grad_(name not in frozen)
    return frozen


def all_but(*keep: str) -> Callable[[str], bool]:
    """Freeze predicate matching every name except those listed."""
    keep_set = set(keep)
    return lambda name: name not in keep_set
