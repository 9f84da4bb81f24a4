import numpy as np
import pytest

from mocovox import synthdata as sd

CORPUS_SEED = 7


@pytest.fixture(scope="session")
def corpus(tmp_path_factory):
    """The 32-speaker x 20-utterance desk corpus used by the acceptance criteria."""
    out = tmp_path_factory.mktemp("corpus")
    manifest = sd.build_corpus(32, 20, out, CORPUS_SEED)
    trials = sd.build_trials(manifest.split("test"), 500, CORPUS_SEED)
    sd.write_trials(out / sd.TRIALS_NAME, trials)
    return manifest


@pytest.fixture(scope="session")
def small_corpus(tmp_path_factory):
    out = tmp_path_factory.mktemp("small")
    manifest = sd.build_corpus(10, 4, out, 3)
    sd.write_trials(out / sd.TRIALS_NAME, sd.build_trials(manifest.split("test"), 40, 3))
    return manifest


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def unit_rows(rng, n, d):
    x = rng.standard_normal((n, d))
    return x / np.linalg.norm(x, axis=1, keepdims=True)


def max_rel_err(a, b, floor=1e-7):
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    scale = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return float(np.max(np.abs(a - b) / scale))


def central_diff(f, x, h=1e-5):
    """Central finite-difference gradient of scalar f at flat array x (x is restored)."""
    x = np.asarray(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat, gf = x.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        fp = f(x)
        flat[i] = old - h
        fm = f(x)
        flat[i] = old
        gf[i] = (fp - fm) / (2 * h)
    return g


# criterion number -> (passed, detail); filled by test_acceptance.py
ACCEPTANCE = {}


def record_criterion(number, passed, detail):
    ACCEPTANCE[number] = (bool(passed), detail)
    return passed


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        passed, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if passed else 'FAIL'}  {detail}")
