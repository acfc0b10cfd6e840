import numpy as np
import pytest

from leapexit.encoder import EncoderConfig, EncoderModel


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def tiny_config(**kw):
    base = dict(num_layers=2, hidden_dim=8, num_heads=2, ff_dim=12, vocab_size=20, max_seq_len=6, seed=0)
    base.update(kw)
    return EncoderConfig(**base)


@pytest.fixture
def tiny_model():
    return EncoderModel(tiny_config())


def random_batch(rng, n, vocab=20, max_len=6, min_len=1):
    lengths = rng.integers(min_len, max_len + 1, size=n)
    tokens = np.zeros((n, max_len), dtype=np.int64)
    mask = np.zeros((n, max_len), dtype=bool)
    for i, length in enumerate(lengths):
        tokens[i, :length] = rng.integers(1, vocab, size=length)
        mask[i, :length] = True
    return tokens, mask


# one line per acceptance criterion, printed after the run
ACCEPTANCE_LINES = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[n])
