import numpy as np
import pytest

from partfit.body_model import generate_desk_model
from partfit.camera import default_camera


@pytest.fixture(scope='session')
def model():
    return generate_desk_model(0)


@pytest.fixture(scope='session')
def small_model():
    return generate_desk_model(1, 256)


@pytest.fixture(scope='session')
def cam():
    return default_camera()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def random_rotations(rng, n):
    """Uniform random rotations via normalised Gaussian quaternions (test-local)."""
    q = rng.normal(size=(n, 4))
    q /= np.linalg.norm(q, axis=1, keepdims=True)
    w, x, y, z = q.T
    return np.stack([
        np.stack([1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)], -1),
        np.stack([2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)], -1),
        np.stack([2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)], -1),
    ], -2)


def central_diff(f, x, h=1e-6):
    """Jacobian of a vector function by central differences, shape (out, in)."""
    x = np.asarray(x, dtype=float)
    cols = []
    for i in range(x.size):
        xp, xm = x.copy(), x.copy()
        xp.flat[i] += h
        xm.flat[i] -= h
        cols.append((np.ravel(f(xp)) - np.ravel(f(xm))) / (2 * h))
    return np.stack(cols, axis=1)


# acceptance lines collected by tests/test_acceptance.py
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section('acceptance criteria')
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
