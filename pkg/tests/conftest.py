import numpy as np
import pytest
import torch

from longctx.model import NUM_RESERVED, EncoderConfig, init_weights
from longctx.packing import Document


def tiny_config(layers=2, hidden=16, heads=2, vocab=24, positions=32, **kw):
    return EncoderConfig(layers, hidden, heads, vocab, positions, **kw)


def tiny_weights(config, seed=0, dtype=torch.float64, std=0.3):
    # larger init than training default so layers are far from identity
    return init_weights(config, seed, std=std, dtype=dtype)


def random_docs(rng, n, vocab, min_len=2, max_len=10, prefix="d"):
    docs = []
    for i in range(n):
        L = int(rng.integers(min_len, max_len + 1))
        toks = rng.integers(NUM_RESERVED, vocab, size=L).tolist()
        docs.append(Document(f"{prefix}{i}", toks, list(range(L))))
    return docs


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def cfg():
    return tiny_config()


# one line per acceptance criterion, printed at the end of the session
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split("criterion ")[1].split(":")[0])):
            terminalreporter.write_line(line)
