import os
import sys

import numpy as np
import pytest

sys.path.insert(0, os.path.dirname(__file__))

from neuralmg import dataset, nn  # noqa: E402

ACCEPTANCE_LINES = []


def record_acceptance(number, title, passed, detail=""):
    line = f"[{'PASS' if passed else 'FAIL'}] criterion {number}: {title}"
    if detail:
        line += f" ({detail})"
    ACCEPTANCE_LINES.append((number, line))
    print(line)
    return passed


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for _, line in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(line)


def _train_family(dimension, patch_size, schedule, records_per_class, hidden, epochs, seed=0):
    manifest, records = dataset.build_dataset(dimension, schedule, records_per_class, seed,
                                              patch_size=patch_size)
    tr, va, te = dataset.split(records, seed)
    X, Y, aux = dataset.as_arrays(tr)
    model = nn.init_mlp((X.shape[1],) + tuple(hidden) + (Y.shape[1],), seed, patch_size,
                        dimension, scaled=True)
    best, history = nn.train(model, (X, Y, aux), dataset.as_arrays(va), nn.LossConfig(),
                             epochs=epochs, batch_size=64, seed=seed, lr=1e-3, lr_final=1e-5)
    return best, history, dataset.as_arrays(te)


@pytest.fixture(scope="session")
def models_1d():
    """1D models: the interior family on the linear schedule N = 10..200 step 10
    with 1000 records per class, plus the boundary family."""
    schedule = dataset.class_schedule_linear(10, 10, 20)
    interior = _train_family(1, 3, schedule, 1000, (64, 64), 100)
    boundary = _train_family(1, 2, schedule, 200, (32, 32), 100)
    return {3: interior, 2: boundary}


@pytest.fixture(scope="session")
def models_2d():
    """One 2D model per patch size (interior 7, edge 5, corners 4 and 3)."""
    schedule = dataset.class_schedule_linear(128, 128, 8)
    out = {}
    for size, rpc in ((7, 500), (5, 500), (4, 100), (3, 100)):
        out[size] = _train_family(2, size, schedule, rpc, (64, 64), 60)
    return out


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
