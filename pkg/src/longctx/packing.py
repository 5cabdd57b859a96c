"""Document packing into fixed-length sequences.

Contamination-free packs keep documents apart with a block-diagonal
attention mask; naive packs join documents with a separator and attend
across everything. Packing never reorders the tokens of a document.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field
from typing import Optional, Sequence

import torch

from .autograd import FORBIDDEN
from .model import PAD_ID, SEP_ID


@dataclass
class Document:
    id: str
    tokens: list[int]
    word_ids: Optional[list[int]] = None


@dataclass
class Span:
    doc_id: str
    start: int
    end: int  # exclusive

    def __len__(self) -> int:
        return self.end - self.start


@dataclass
class Pack:
    tokens: list[int]
    spans: list[Span]
    positions: list[int]
    mask_mode: str = "block_diagonal"  # or "full"
    word_ids: Optional[list[int]] = None

    @property
    def max_len(self) -> int:
        return len(self.tokens)

    @property
    def used(self) -> int:
        return self.spans[-1].end if self.spans else 0

    def to_dict(self) -> dict:
        return {
            "tokens": self.tokens,
            "spans": [[s.doc_id, s.start, s.end] for s in self.spans],
            "positions": self.positions,
            "mask_mode": self.mask_mode,
            "word_ids": self.word_ids,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Pack":
        return cls(
            tokens=list(d["tokens"]),
            spans=[Span(s[0], s[1], s[2]) for s in d["spans"]],
            positions=list(d["positions"]),
            mask_mode=d.get("mask_mode", "block_diagonal"),
            word_ids=d.get("word_ids"),
        )


@dataclass
class PackingStats:
    num_packs: int
    padding_fraction: float
    mean_docs_per_pack: float
    fill_histogram: dict[int, int] = field(default_factory=dict)


def _chunks(doc: Document, max_len: int, truncation: str) -> list[Document]:
    if not doc.tokens:
        raise ValueError(f"document {doc.id!r} is empty")
    if len(doc.tokens) <= max_len:
        return [doc]
    if truncation == "drop_tail":
        return [Document(doc.id, doc.tokens[:max_len], doc.word_ids and doc.word_ids[:max_len])]
    if truncation != "split":
        raise ValueError(f"unknown truncation policy {truncation!r}")
    out = []
    for k, start in enumerate(range(0, len(doc.tokens), max_len)):
        wid = doc.word_ids[start:start + max_len] if doc.word_ids is not None else None
        out.append(Document(f"{doc.id}#{k}", doc.tokens[start:start + max_len], wid))
    return out


def _assign_bins(lengths: list[int], max_len: int, policy: str) -> list[list[int]]:
    bins: list[list[int]] = []
    fill: list[int] = []
    for i, n in enumerate(lengths):
        if policy == "first_fit":
            for b, used in enumerate(fill):
                if used + n <= max_len:
                    bins[b].append(i)
                    fill[b] += n
                    break
            else:
                bins.append([i])
                fill.append(n)
        elif policy == "sequential":
            if fill and fill[-1] + n <= max_len:
                bins[-1].append(i)
                fill[-1] += n
            else:
                bins.append([i])
                fill.append(n)
        else:
            raise ValueError(f"unknown packing policy {policy!r}")
    return bins


def pack_documents(
    docs: Sequence[Document],
    max_len: int,
    policy: str = "first_fit",
    truncation: str = "split",
    reset_positions: bool = True,
    mode: str = "block_diagonal",
) -> list[Pack]:
    """Pack whole documents into sequences of exactly ``max_len`` tokens.

    In ``"full"`` mode a separator token follows every document but the last
    in a pack, and the separator is charged against the pack's capacity.
    """
    if max_len < 1:
        raise ValueError("max_len must be >= 1")
    if mode not in ("block_diagonal", "full"):
        raise ValueError(f"unknown mask mode {mode!r}")
    sep_cost = 1 if mode == "full" else 0
    pieces: list[Document] = []
    for d in docs:
        pieces.extend(_chunks(d, max_len, truncation))
    # a separator is only needed between documents; reserve room for it
    lengths = [len(p.tokens) + sep_cost for p in pieces]
    bins = _assign_bins(lengths, max_len + sep_cost, policy)

    have_words = all(p.word_ids is not None for p in pieces)
    packs = []
    for members in bins:
        tokens: list[int] = []
        positions: list[int] = []
        words: list[int] = []
        spans: list[Span] = []
        for j, idx in enumerate(members):
            piece = pieces[idx]
            start = len(tokens)
            tokens.extend(piece.tokens)
            if have_words:
                # renumber so word ids stay unique within the pack
                remap: dict[int, int] = {}
                base = max(words, default=-1) + 1
                for w in piece.word_ids:
                    if w >= 0 and w not in remap:
                        remap[w] = base + len(remap)
                    words.append(remap[w] if w >= 0 else -1)
            if sep_cost and j < len(members) - 1:
                # the separator belongs to the span of the document it ends
                tokens.append(SEP_ID)
                words.append(-1)
            if reset_positions:
                positions.extend(range(len(tokens) - start))
            else:
                positions.extend(range(start, len(tokens)))
            spans.append(Span(piece.id, start, len(tokens)))
        pad = max_len - len(tokens)
        tokens.extend([PAD_ID] * pad)
        positions.extend([0] * pad)
        if have_words:
            words.extend([-1] * pad)
        packs.append(
            Pack(tokens, spans, positions, mode, words if have_words else None)
        )
    return packs


def build_block_mask(pack: Pack, dtype=torch.float64) -> torch.Tensor:
    """Additive mask: 0 inside each document span, forbidden elsewhere.
    Padding positions may only attend to themselves."""
    n = pack.max_len
    mask = torch.full((n, n), FORBIDDEN, dtype=dtype)
    for s in pack.spans:
        mask[s.start:s.end, s.start:s.end] = 0
    idx = torch.arange(pack.used, n)
    mask[idx, idx] = 0
    return mask


def build_naive_mask(pack: Pack, dtype=torch.float64) -> torch.Tensor:
    """Full attention over the non-padding prefix, padding self-only."""
    n, used = pack.max_len, pack.used
    mask = torch.full((n, n), FORBIDDEN, dtype=dtype)
    mask[:used, :used] = 0
    idx = torch.arange(used, n)
    mask[idx, idx] = 0
    return mask


def build_mask(pack: Pack, dtype=torch.float64) -> torch.Tensor:
    if pack.mask_mode == "full":
        return build_naive_mask(pack, dtype)
    return build_block_mask(pack, dtype)


def collate(packs: Sequence[Pack], dtype=torch.float32):
    """Stack packs into (tokens, positions, masks) tensors."""
    tokens = torch.tensor([p.tokens for p in packs], dtype=torch.long)
    positions = torch.tensor([p.positions for p in packs], dtype=torch.long)
    masks = torch.stack([build_mask(p, dtype) for p in packs])
    return tokens, positions, masks


def non_pad_mask(packs: Sequence[Pack]) -> torch.Tensor:
    out = torch.zeros(len(packs), packs[0].max_len, dtype=torch.bool)
    for b, p in enumerate(packs):
        out[b, :p.used] = True
    return out


def packing_stats(packs: Sequence[Pack]) -> PackingStats:
    if not packs:
        return PackingStats(0, 0.0, 0.0, {})
    total = sum(p.max_len for p in packs)
    padded = sum(p.max_len - p.used for p in packs)
    hist = Counter(p.used for p in packs)
    return PackingStats(
        num_packs=len(packs),
        padding_fraction=padded / total,
        mean_docs_per_pack=sum(len(p.spans) for p in packs) / len(packs),
        fill_histogram=dict(sorted(hist.items())),
    )


def one_per_sequence(docs: Sequence[Document], max_len: int) -> list[Pack]:
    """Baseline layout: each (chunk of a) document padded to its own sequence."""
    packs = []
    for d in docs:
        for piece in _chunks(d, max_len, "split"):
            packs.extend(pack_documents([piece], max_len))
    return packs
