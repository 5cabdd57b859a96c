"""Corpus reading, a small word-aware tokenizer, whole-word MLM masking and
synthetic task generators."""

from __future__ import annotations

import logging
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from .model import MASK_ID, NUM_RESERVED, UNK_ID

log = logging.getLogger(__name__)

RESERVED_TOKENS = ["<pad>", "<unk>", "<mask>", "<sep>"]
NON_WORD = -1
IGNORE_INDEX = -100

# per-token corruption codes recorded in MaskedBatch.actions
KEPT_OUT, MASKED, RANDOMIZED, UNCHANGED = 0, 1, 2, 3


@dataclass
class Vocab:
    tokens: list[str]
    index: dict[str, int] = field(default_factory=dict)

    def __post_init__(self):
        if self.tokens[:NUM_RESERVED] != RESERVED_TOKENS:
            raise ValueError("vocab must start with the reserved tokens")
        if not self.index:
            self.index = {t: i for i, t in enumerate(self.tokens)}
        if len(self.index) != len(self.tokens):
            raise ValueError("vocab tokens must be unique")

    def __len__(self) -> int:
        return len(self.tokens)

    def __contains__(self, token: str) -> bool:
        return token in self.index

    def id(self, token: str) -> int:
        return self.index.get(token, UNK_ID)

    @classmethod
    def from_tokens(cls, tokens: Iterable[str]) -> "Vocab":
        return cls(RESERVED_TOKENS + [t for t in tokens if t not in RESERVED_TOKENS])


@dataclass
class TokenizedDoc:
    ids: list[int]
    word_ids: list[int]

    def __len__(self) -> int:
        return len(self.ids)


def split_units(text: str) -> list[tuple[str, bool]]:
    """Split text into (piece, is_word). Words are maximal alphanumeric runs;
    every other non-space character is its own piece."""
    units: list[tuple[str, bool]] = []
    buf: list[str] = []
    for ch in text:
        if ch.isalnum():
            buf.append(ch)
            continue
        if buf:
            units.append(("".join(buf), True))
            buf = []
        if not ch.isspace():
            units.append((ch, False))
    if buf:
        units.append(("".join(buf), True))
    return units


def _ranked(counts: Counter) -> list[str]:
    return [t for t, _ in sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))]


def build_vocab(corpus: Iterable[str], max_size: int) -> Vocab:
    """Frequency-ranked vocabulary, ties broken lexicographically.

    Single characters seen inside words come first so any word can fall back
    to character tokens; whole words and punctuation fill the rest.
    """
    chars: Counter = Counter()
    pieces: Counter = Counter()
    n_docs = 0
    for text in corpus:
        n_docs += 1
        for piece, is_word in split_units(text):
            pieces[piece] += 1
            if is_word:
                chars.update(piece)
    if n_docs == 0 or not pieces:
        raise ValueError("cannot build a vocabulary from an empty corpus")
    budget = max_size - NUM_RESERVED
    if budget < 1:
        raise ValueError(f"max_size must exceed the {NUM_RESERVED} reserved ids")
    chosen: list[str] = []
    seen: set[str] = set()
    for tok in _ranked(chars) + _ranked(pieces):
        if len(chosen) >= budget:
            break
        if tok not in seen and tok not in RESERVED_TOKENS:
            seen.add(tok)
            chosen.append(tok)
    return Vocab.from_tokens(chosen)


def tokenize(text: str, vocab: Vocab) -> TokenizedDoc:
    ids: list[int] = []
    word_ids: list[int] = []
    word = 0
    for piece, is_word in split_units(text):
        if not is_word:
            ids.append(vocab.id(piece))
            word_ids.append(NON_WORD)
            continue
        if piece in vocab:
            ids.append(vocab.index[piece])
            word_ids.append(word)
        else:
            for ch in piece:
                ids.append(vocab.id(ch))
                word_ids.append(word)
        word += 1
    return TokenizedDoc(ids, word_ids)


def detokenize(doc: TokenizedDoc, vocab: Vocab) -> str:
    out: list[str] = []
    prev = None
    for tid, w in zip(doc.ids, doc.word_ids):
        tok = vocab.tokens[tid]
        if w != NON_WORD and w == prev and out:
            out[-1] += tok
        else:
            out.append(tok)
        prev = w
    return " ".join(out)


# -- whole-word masking -----------------------------------------------------


@dataclass
class MaskedBatch:
    input_ids: np.ndarray  # [batch, seq]
    labels: np.ndarray  # original ids where selected, IGNORE_INDEX elsewhere
    mask_rate: float
    actions: np.ndarray  # per-token corruption code
    num_words: int = 0
    num_selected_words: int = 0
    num_wordless: int = 0


def wwm_mask(
    ids: Sequence[Sequence[int]],
    word_ids: Sequence[Sequence[int]],
    mask_rate: float,
    rng: np.random.Generator,
    vocab_size: int,
    mask_prob: float = 0.8,
    random_prob: float = 0.1,
) -> MaskedBatch:
    """Select whole words with probability ``mask_rate`` and corrupt each
    selected word as a unit: mask token, random token, or left as is.

    Rows must share one length. A word is a maximal run of equal non-negative
    word ids; tokens with a negative word id are never selected.
    """
    if not 0 < mask_rate < 1:
        raise ValueError("mask_rate must lie in (0, 1)")
    inputs = np.array(ids, dtype=np.int64)
    words = np.array(word_ids, dtype=np.int64)
    if inputs.ndim != 2 or inputs.shape != words.shape:
        raise ValueError("ids and word_ids must be equal-shape 2-d arrays")
    B, S = inputs.shape

    flat_w = words.reshape(-1)
    is_word = flat_w >= 0
    starts = is_word.copy()
    starts[1:] &= ~(is_word[:-1] & (flat_w[1:] == flat_w[:-1]))
    starts[::S] = is_word[::S]  # a word never continues across rows
    unit = np.cumsum(starts) - 1
    n_units = int(starts.sum())

    wordless = int((~is_word.reshape(B, S).any(axis=1)).sum())
    if wordless:
        log.warning("%d sequence(s) without maskable words passed through", wordless)

    selected = rng.random(n_units) < mask_rate
    choice = rng.random(n_units)
    action_unit = np.where(
        choice < mask_prob, MASKED, np.where(choice < mask_prob + random_prob, RANDOMIZED, UNCHANGED)
    )
    action_unit = np.where(selected, action_unit, KEPT_OUT)

    actions = np.zeros(B * S, dtype=np.int64)
    actions[is_word] = action_unit[unit[is_word]]
    random_ids = rng.integers(NUM_RESERVED, vocab_size, size=B * S)

    flat_in = inputs.reshape(-1).copy()
    labels = np.full(B * S, IGNORE_INDEX, dtype=np.int64)
    chosen = actions != KEPT_OUT
    labels[chosen] = flat_in[chosen]
    flat_in[actions == MASKED] = MASK_ID
    flat_in[actions == RANDOMIZED] = random_ids[actions == RANDOMIZED]
    return MaskedBatch(
        input_ids=flat_in.reshape(B, S),
        labels=labels.reshape(B, S),
        mask_rate=mask_rate,
        actions=actions.reshape(B, S),
        num_words=n_units,
        num_selected_words=int(selected.sum()),
        num_wordless=wordless,
    )


# -- corpus and task files --------------------------------------------------


@dataclass
class RawDoc:
    id: str
    text: str


@dataclass
class LoadedCorpus:
    docs: list[RawDoc]
    skipped: int = 0


class CorpusError(RuntimeError):
    pass


def _parse_corpus_line(raw: bytes, lineno: int) -> Optional[RawDoc]:
    try:
        line = raw.decode("utf-8").rstrip("\r\n")
    except UnicodeDecodeError:
        return None
    doc_id = str(lineno)
    if "\t" in line:
        doc_id, line = line.split("\t", 1)
        if not doc_id:
            return None
    if not line.strip():
        return None
    return RawDoc(doc_id, line)


def load_corpus(path: str | Path, max_bad_fraction: float = 0.10) -> LoadedCorpus:
    """Read a line-delimited corpus: one document per line, optionally
    ``id<TAB>text``. Undecodable or empty lines are skipped and counted."""
    try:
        data = Path(path).read_bytes()
    except OSError as e:
        raise CorpusError(f"cannot read corpus {path}: {e}") from e
    docs: list[RawDoc] = []
    skipped = total = 0
    for lineno, raw in enumerate(data.splitlines(), start=1):
        total += 1
        doc = _parse_corpus_line(raw, lineno)
        if doc is None:
            skipped += 1
        else:
            docs.append(doc)
    if total and skipped / total > max_bad_fraction:
        raise CorpusError(f"{skipped} of {total} lines in {path} are malformed")
    return LoadedCorpus(docs, skipped)


def write_corpus(path: str | Path, docs: Iterable[RawDoc]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for d in docs:
            fh.write(f"{d.id}\t{d.text}\n")


@dataclass
class LabeledText:
    label: str  # raw label field; comma-separated for multi-label
    text: str
    line: int


def load_task_file(path: str | Path) -> list[LabeledText]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\r\n")
            if not line:
                continue
            if "\t" not in line:
                raise ValueError(f"{path}:{lineno}: expected label<TAB>text")
            label, text = line.split("\t", 1)
            out.append(LabeledText(label, text, lineno))
    return out


def write_task_file(path: str | Path, rows: Iterable[tuple[str, str]]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for label, text in rows:
            fh.write(f"{label}\t{text}\n")


# -- synthetic data ---------------------------------------------------------


@dataclass
class SynthTaskSpec:
    kind: str  # needle | parity | bow-topic
    seq_len: int
    num_classes: int = 4
    n_train: int = 1000
    n_val: int = 200
    n_test: int = 500
    seed: int = 0
    filler_size: int = 64
    marker_position: str = "uniform"  # or "first" (needle only)
    # extra training examples as (length, count) groups (needle only); val
    # and test always use seq_len
    extra_train: tuple[tuple[int, int], ...] = ()

    def __post_init__(self):
        if self.seq_len < 1:
            raise ValueError("seq_len must be >= 1")
        if self.num_classes < 2:
            raise ValueError("num_classes must be >= 2")
        self.extra_train = tuple((int(n), int(c)) for n, c in self.extra_train)
        if self.extra_train and self.kind != "needle":
            raise ValueError("extra_train is only supported for the needle task")
        if any(n < 1 or c < 0 for n, c in self.extra_train):
            raise ValueError("extra_train groups need length >= 1 and count >= 0")


@dataclass
class SynthTask:
    spec: SynthTaskSpec
    vocab: Vocab
    train: list[tuple[list[int], int]]
    val: list[tuple[list[int], int]]
    test: list[tuple[list[int], int]]

    def split_text(self, name: str) -> list[tuple[str, str]]:
        rows = getattr(self, name)
        return [(str(y), " ".join(self.vocab.tokens[t] for t in x)) for x, y in rows]


def needle_vocab(num_classes: int, filler_size: int) -> Vocab:
    return Vocab.from_tokens(
        [f"m{c}" for c in range(num_classes)] + [f"f{i}" for i in range(filler_size)]
    )


def _split_rngs(seed: int) -> list[np.random.Generator]:
    return [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(3)]


def gen_needle_task(spec: SynthTaskSpec) -> SynthTask:
    """Filler sequences holding exactly one class marker; label = marker class."""
    C, L = spec.num_classes, spec.seq_len
    vocab = needle_vocab(C, spec.filler_size)
    first_filler = NUM_RESERVED + C

    def make(n: int, rng: np.random.Generator, L: int = L):
        x = rng.integers(first_filler, len(vocab), size=(n, L))
        y = rng.integers(0, C, size=n)
        if spec.marker_position == "first":
            pos = np.zeros(n, dtype=np.int64)
        else:
            pos = rng.integers(0, L, size=n)
        x[np.arange(n), pos] = NUM_RESERVED + y
        return [(row.tolist(), int(lab)) for row, lab in zip(x, y)]

    r_train, r_val, r_test = _split_rngs(spec.seed)
    train = make(spec.n_train, r_train)
    for length, count in spec.extra_train:
        train += make(count, r_train, length)
    return SynthTask(spec, vocab, train, make(spec.n_val, r_val), make(spec.n_test, r_test))


def gen_parity_task(spec: SynthTaskSpec) -> SynthTask:
    """Binary sequences over tokens ``b0``/``b1``; label = parity of ``b1`` count."""
    vocab = Vocab.from_tokens(["b0", "b1"])

    def make(n, rng):
        bits = rng.integers(0, 2, size=(n, spec.seq_len))
        return [((b + NUM_RESERVED).tolist(), int(b.sum() % 2)) for b in bits]

    rngs = _split_rngs(spec.seed)
    return SynthTask(spec, vocab, *(make(n, r) for n, r in zip((spec.n_train, spec.n_val, spec.n_test), rngs)))


def gen_bow_topic_task(spec: SynthTaskSpec) -> SynthTask:
    """Each class favours its own slice of the vocabulary; label = class."""
    C = spec.num_classes
    vocab = Vocab.from_tokens([f"w{i}" for i in range(spec.filler_size)])
    V = spec.filler_size
    topic_rng = np.random.default_rng(spec.seed + 7919)
    dists = topic_rng.dirichlet(np.full(V, 0.3), size=C)

    def make(n, rng):
        y = rng.integers(0, C, size=n)
        rows = [rng.choice(V, size=spec.seq_len, p=dists[c]) + NUM_RESERVED for c in y]
        return [(r.tolist(), int(c)) for r, c in zip(rows, y)]

    rngs = _split_rngs(spec.seed)
    return SynthTask(spec, vocab, *(make(n, r) for n, r in zip((spec.n_train, spec.n_val, spec.n_test), rngs)))


def gen_task(spec: SynthTaskSpec) -> SynthTask:
    gens = {"needle": gen_needle_task, "parity": gen_parity_task, "bow-topic": gen_bow_topic_task}
    if spec.kind not in gens:
        raise ValueError(f"unknown synthetic task {spec.kind!r}")
    return gens[spec.kind](spec)


def gen_corpus(
    n_docs: int,
    seed: int,
    num_word_types: int = 400,
    mean_words: int = 60,
    successors: int = 6,
) -> list[RawDoc]:
    """Text from a sparse first-order Markov chain over made-up words.

    Every word has a few likely successors, so masked words are partly
    predictable from context; punctuation is sprinkled in between words.
    """
    rng = np.random.default_rng(seed)
    letters = list("abcdefghijklmnoprstuwyz")
    words: list[str] = []
    seen: set[str] = set()
    while len(words) < num_word_types:
        n = int(rng.integers(1, 9))
        w = "".join(rng.choice(letters, size=n))
        if w not in seen:
            seen.add(w)
            words.append(w)
    # Zipf-like unigram weights and a handful of preferred successors per word
    unigram = 1.0 / np.arange(1, num_word_types + 1)
    unigram /= unigram.sum()
    succ = rng.choice(num_word_types, size=(num_word_types, successors), p=unigram)

    docs = []
    for d in range(n_docs):
        n = max(3, int(rng.geometric(1.0 / mean_words)))
        cur = int(rng.choice(num_word_types, p=unigram))
        out = [words[cur]]
        for _ in range(n - 1):
            if rng.random() < 0.85:
                cur = int(succ[cur, rng.integers(successors)])
            else:
                cur = int(rng.choice(num_word_types, p=unigram))
            r = rng.random()
            if r < 0.06:
                out.append(",")
            elif r < 0.10:
                out.append(".")
            out.append(words[cur])
        docs.append(RawDoc(f"d{d}", " ".join(out)))
    return docs
