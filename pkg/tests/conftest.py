import os
import sys

import numpy as np
import pytest

sys.path.insert(0, os.path.dirname(__file__))

from sparseae.sparse_tensor import SparseTensor  # noqa: E402


def random_tensor(rng, d, size, channels=1, p=0.3, batch=1, min_active=1):
    """Bernoulli pattern with Gaussian features; at least ``min_active`` sites per sample."""
    shape = (size,) * d if np.isscalar(size) else tuple(size)
    rows = []
    for b in range(batch):
        mask = rng.random(shape) < p
        while mask.sum() < min_active:
            mask[tuple(rng.integers(0, n) for n in shape)] = True
        cells = np.argwhere(mask)
        rows.append(np.concatenate([np.full((len(cells), 1), b), cells], axis=1))
    coords = np.concatenate(rows).astype(np.int64)
    feats = rng.standard_normal((len(coords), channels))
    return SparseTensor.from_coords(coords, feats, shape, batch)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# acceptance verdicts, printed once at the end of the session
ACCEPTANCE = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE:
            terminalreporter.write_line(line)
