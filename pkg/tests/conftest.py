import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from advmca.corpus import synthesize_corpus
from advmca.evaluation import partition_random
from advmca.network import model as net
from advmca.network.training import TrainConfig, fit
from advmca.spectral import analyse, load_audio

settings.register_profile("default", max_examples=40, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


def rel_err(a, b):
    a, b = np.asarray(a), np.asarray(b)
    scale = max(np.linalg.norm(b), np.finfo(float).tiny)
    return float(np.linalg.norm(a - b) / scale)


@pytest.fixture(scope="session")
def tiny_corpus(tmp_path_factory):
    """Three classes, six short recordings each."""
    root = tmp_path_factory.mktemp("tiny_corpus")
    manifest = synthesize_corpus(3, 6, 3, seed=11, out_dir=root, duration=3.0)
    return manifest


@pytest.fixture(scope="session")
def tiny_model(tiny_corpus):
    """Small frame-wise DNN fitted to the tiny corpus, plus its test items."""
    names = tiny_corpus.labels
    part = partition_random(tiny_corpus, (4, 1, 1), seed=0)

    def load(entries):
        return [(analyse(load_audio(tiny_corpus.resolve(e)), 1), names.index(e.label))
                for e in entries]

    train, valid, test = load(part.train), load(part.valid), load(part.test)
    params, _ = fit(net.dnn_spec(width=20, depth=2), train, valid,
                    TrainConfig(max_epochs=15, patience=5, seed=3), label_names=names)
    return params, train, test


# -- acceptance reporting --------------------------------------------------------

ACCEPTANCE = {}


def record(number, passed, detail):
    """Remember one acceptance outcome; printed in the terminal summary."""
    ACCEPTANCE[number] = (bool(passed), detail)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE):
        passed, detail = ACCEPTANCE[number]
        terminalreporter.write_line(f"criterion {number:2d}: {'PASS' if passed else 'FAIL'}  {detail}")
