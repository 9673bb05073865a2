import time
from importlib import resources

import numpy as np
import pytest

from unidial.corpus import CleaningConfig, build_corpus, read_comments
from unidial.model import ModelConfig
from unidial.tokenizer import train_bpe
from unidial.training import TrainRunConfig, train

DATA = resources.files("unidial") / "data"
TOY_COMMENTS = str(DATA / "toy_comments.jsonl")
TOY_TOPICS = str(DATA / "toy_topics.txt")

# Desk configuration used throughout: 2 layers, 4 heads, d_model 64, vocab 512.
DESK = dict(n_layers=2, n_heads=4, d_model=64, d_ff=256, vocab_size=512)
OVERFIT_STEPS = 2000


@pytest.fixture(scope="session")
def toy_samples():
    samples, _ = build_corpus(read_comments(TOY_COMMENTS), CleaningConfig())
    return samples


@pytest.fixture(scope="session")
def toy_vocab(toy_samples):
    return train_bpe([t for s in toy_samples for t, _ in s.context + [s.response]], 512)


@pytest.fixture(scope="session")
def desk_config():
    return ModelConfig(**DESK)


@pytest.fixture(scope="session")
def overfit_run(toy_samples, toy_vocab, desk_config):
    """The toy corpus memorized by the desk model (shared by several modules)."""
    run = TrainRunConfig(steps=OVERFIT_STEPS, peak_lr=1e-3, warmup_steps=100, seed=0)
    t0 = time.perf_counter()
    result = train(run, toy_samples, toy_vocab, desk_config)
    result.seconds = time.perf_counter() - t0
    return result


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


_acceptance = []


def pytest_runtest_logreport(report):
    if report.when != "call" and not (report.when == "setup" and report.failed):
        return
    if "test_acceptance.py" not in report.nodeid:
        return
    props = dict(report.user_properties)
    if props.get("criterion") is not None:
        _acceptance.append((props["criterion"], report.outcome, report.nodeid.split("::")[-1], report.duration,
                            props.get("measured", "")))


def pytest_terminal_summary(terminalreporter):
    if not _acceptance:
        return
    terminalreporter.section("acceptance criteria")
    for crit, outcome, name, dur, measured in sorted(_acceptance):
        word = "PASS" if outcome == "passed" else "FAIL"
        extra = f" {measured}" if measured else ""
        terminalreporter.write_line(f"[{word}] criterion {crit:>2}: {name} ({dur:.1f}s){extra}")
