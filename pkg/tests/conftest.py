import numpy as np
import pytest

from selinfer.calib import calibrate
from selinfer.data import Corpus
from selinfer.model import Backbone, TrainConfig, train
from selinfer.sketch import FrequencySketch
from selinfer.synth import SynthSpec, generate

_CRITERIA = {}


def record_criterion(number, passed, detail):
    line = f"criterion {number:>2}: {'PASS' if passed else 'FAIL'}  {detail}"
    _CRITERIA[number] = line
    print(line)
    return passed


@pytest.fixture
def criterion():
    return record_criterion


def pytest_terminal_summary(terminalreporter):
    if _CRITERIA:
        terminalreporter.section("acceptance criteria")
        for n in sorted(_CRITERIA):
            terminalreporter.write_line(_CRITERIA[n])


def random_corpus(n, n_fields, vocab=50, seed=0, missing=0.0, labeled=True):
    rng = np.random.default_rng(seed)
    tokens = rng.integers(1, vocab + 1, size=(n, n_fields)).astype(np.uint64)
    # distinct token spaces per field keep collisions across fields irrelevant
    tokens += (np.arange(n_fields, dtype=np.uint64) * np.uint64(1_000_003))[None, :]
    present = rng.random((n, n_fields)) >= missing
    present[~present.any(axis=1), 0] = True
    labels = rng.integers(0, 2, size=n).astype(np.int8) if labeled else None
    return Corpus(np.arange(n, dtype=np.uint64), tokens, present, labels)


def linear_model(weights, bias, dim=1):
    """Hand-built linear model: every token maps to an all-ones row; readout weights ``weights``."""
    n = len(weights)
    m = Backbone([1] * n, dim=dim, mlp_widths=(), use_fm=False)
    m.emb[:] = 1.0
    m.out_w[:] = np.repeat(np.asarray(weights, dtype=np.float64), dim)
    m.out_b[:] = 0.0
    m.bias[:] = bias
    return m


@pytest.fixture(scope="session")
def small_setup():
    """A trained 8-field model with sketch and profile on a modest synthetic corpus."""
    spec = SynthSpec(num_fields=8, vocab_sizes=[2000], num_train=20_000, num_test=10_000, label_noise=0.05,
                     tail_correlation=0.9, seed=7)
    data = generate(spec)
    tr, te = data.train, data.test
    model = Backbone([4096] * 8, dim=8, mlp_widths=(32, 16), seed=1)
    train(model, tr, TrainConfig(epochs=2, seed=1))
    sk = FrequencySketch(8, width=1 << 12, eta=200).insert_corpus(tr)
    profile = calibrate(model, sk, tr[-5000:], tr[:10_000])
    return {"data": data, "train": tr, "test": te, "model": model, "sketch": sk, "profile": profile}
