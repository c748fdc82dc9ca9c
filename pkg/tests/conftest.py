import os
from pathlib import Path

import numpy as np
import pytest

ROOT = Path(__file__).resolve().parents[1]
# bundled MNIST subset (see scripts/fetch_mnist_subset.py) unless overridden
os.environ.setdefault("NTKRECON_DATA", str(ROOT / "data"))


def central_diff(f, x, eps=1e-6):
    """Numerical gradient of a scalar function of an array."""
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        e = np.zeros_like(x)
        e[idx] = eps
        g[idx] = (f(x + e) - f(x - e)) / (2 * eps)
    return g


def rel_err(a, b):
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(b), 1e-300))


def random_psd(rng, n, rank_extra=3):
    A = rng.standard_normal((n, n + rank_extra))
    return A @ A.T


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# ---------------------------------------------------------------- acceptance summary
# test_acceptance.py records one (passed, detail) entry per criterion here.

ACCEPTANCE = {}


def record_criterion(k: int, passed: bool, detail: str):
    ACCEPTANCE[k] = (bool(passed), detail)


def format_criteria() -> list[str]:
    return [f"CRITERION {k}: {'PASS' if ok else 'FAIL'}  {detail}" for k, (ok, detail) in sorted(ACCEPTANCE.items())]


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in format_criteria():
            terminalreporter.write_line(line)
