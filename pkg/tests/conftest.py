import os
from pathlib import Path

import numpy as np
import pytest

from composer.model import Composer, ComposerConfig, ModuleSpec

MNIST_DIR = Path(os.environ.get("COMPOSER_MNIST_DIR", "/root/data/mnist"))


def tiny_model(n=1, m=2, gamma_inputs=(), seed=0, hidden=3, head_init="uniform", stem=()):
    """Input 2x2 (dim 4), two classes, enumerable route space."""
    layers = [
        [ModuleSpec([hidden], 2 if i == n - 1 else 3) for _ in range(m)] for i in range(n)
    ]
    cfg = ComposerConfig(
        (2, 2), 2, layers, stem=list(stem), controller_hidden=4, controller_pool=1,
        gamma_inputs=list(gamma_inputs), head_init=head_init,
    )
    return Composer(cfg, seed)


def mnist_available() -> bool:
    return (MNIST_DIR / "train-images-idx3-ubyte").exists() or (
        MNIST_DIR / "train-images-idx3-ubyte.gz"
    ).exists()


needs_mnist = pytest.mark.skipif(
    not mnist_available(), reason=f"MNIST IDX files not found in {MNIST_DIR} (set COMPOSER_MNIST_DIR)"
)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def report():
    """Record one pass/fail line for an acceptance criterion."""

    def _report(number: int, title: str, passed: bool, detail: str) -> bool:
        line = f"criterion {number} [{'PASS' if passed else 'FAIL'}] {title}: {detail}"
        print(line)
        ACCEPTANCE_LINES.append(line)
        return passed

    return _report


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
