import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from dpge.data import (PretrainData, build_vocab, make_pretrain_examples,
                       make_synthetic_classification, synthetic_corpus)
from dpge.params import ModelConfig

settings.register_profile("dpge", deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("dpge")

SMALL = ModelConfig(vocab_size=60, max_seq_len=16, num_layers=2, hidden_dim=16,
                    num_heads=2, ff_dim=32)


@pytest.fixture(scope="session")
def small_cfg():
    return SMALL


@pytest.fixture(scope="session")
def small_corpus():
    return synthetic_corpus(3000, seed=11, vocab_words=80)


@pytest.fixture(scope="session")
def small_vocab(small_corpus):
    return build_vocab(small_corpus, SMALL.vocab_size)


@pytest.fixture(scope="session")
def small_pretrain(small_corpus, small_vocab):
    ex = make_pretrain_examples(small_corpus, small_vocab, SMALL.max_seq_len, seed=5)
    return PretrainData(ex)


@pytest.fixture(scope="session")
def small_classify(small_vocab):
    return make_synthetic_classification(small_vocab, 64, seed=3, seq_len=SMALL.max_seq_len)


def rel_err(a, b):
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(b), 1e-300))


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split("criterion ")[1].split(":")[0])):
            terminalreporter.write_line(line)
