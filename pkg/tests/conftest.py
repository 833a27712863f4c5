import sys
from pathlib import Path

import numpy as np
import pytest

from reconprobe.corpus import Grammar, sample_corpus
from reconprobe.model import ModelConfig, init_weights
from reconprobe.tokenizer import default_vocab, tokenize
from reconprobe.trainer import TrainConfig, train

sys.path.insert(0, str(Path(__file__).parent))


@pytest.fixture(scope="session")
def vocab():
    return default_vocab()


@pytest.fixture(scope="session")
def grammar():
    return Grammar.default()


@pytest.fixture(scope="session")
def toy_corpus(grammar):
    return sample_corpus(grammar, 200, 11)


@pytest.fixture(scope="session")
def toy_model(vocab, toy_corpus):
    """2-layer model trained briefly on 200 PCFG sentences."""
    cfg = ModelConfig(n_layers=2, n_heads=2, hidden=16, ff_dim=32, vocab_size=len(vocab), max_positions=24)
    w = init_weights(cfg, np.random.default_rng(5))
    ids = [tokenize(s.forms, vocab).ids for s in toy_corpus]
    w, _ = train(w, ids, TrainConfig(steps=150, batch_size=16, seed=5))
    return w


OVERFIT_CONFIG = TrainConfig(steps=5000, batch_size=32, lr=5e-3, lr_schedule="linear", seed=0)


@pytest.fixture(scope="session")
def overfit_run(vocab, grammar):
    """(ids, trace, weights, seconds) for a 2-layer model overfit on 32 sentences."""
    import time

    ids = [tokenize(s.forms, vocab).ids for s in sample_corpus(grammar, 32, 1)]
    cfg = ModelConfig(n_layers=2, n_heads=2, hidden=32, ff_dim=64, vocab_size=len(vocab), max_positions=24)
    t0 = time.perf_counter()
    w, trace = train(init_weights(cfg, np.random.default_rng(0)), ids, OVERFIT_CONFIG)
    return ids, trace, w, time.perf_counter() - t0


_criteria = {}


def pytest_runtest_logreport(report):
    if "test_acceptance.py::test_c" in report.nodeid and (report.when == "call" or report.outcome != "passed"):
        _criteria[report.nodeid] = report.outcome


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for nodeid in sorted(_criteria):
        name = nodeid.rsplit("::", 1)[1]
        status = "PASS" if _criteria[nodeid] == "passed" else "FAIL"
        terminalreporter.write_line(f"[{status}] {name}")
