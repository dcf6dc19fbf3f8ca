import numpy as np
import pytest

from robustlens.models import NetworkSpec, build


def numerical_grad(fn, x: np.ndarray, h: float = 1e-6) -> np.ndarray:
    """Central differences of scalar ``fn`` w.r.t. every entry of ``x`` (modified in place, restored)."""
    g = np.zeros_like(x, dtype=np.float64)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + h
        up = fn()
        x[i] = old - h
        down = fn()
        x[i] = old
        g[i] = (up - down) / (2 * h)
    return g


def max_rel_err(a, b, floor=1e-8):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return float(np.max(np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_spec():
    return NetworkSpec(input_shape=(3, 8, 8), num_classes=3, widths=(4, 8), blocks=(1, 1))


@pytest.fixture
def tiny_params(tiny_spec):
    return build(tiny_spec, seed=0, dtype=np.float64)


@pytest.fixture(scope="session")
def trained_tiny():
    """A small standard model on 12x12 shapes, trained once per session."""
    from robustlens.data import generate_synthetic
    from robustlens.training import TrainConfig, train

    data = generate_synthetic(classes=4, per_class=80, size=12, seed=11)
    spec = NetworkSpec(input_shape=(3, 12, 12), num_classes=4, widths=(8, 16), blocks=(1, 1))
    result = train(build(spec, 0), data, TrainConfig(lr=0.1, epochs=25, batch_size=8, seed=1))
    return result.best, data


# one line per acceptance criterion, printed at the end of the session
ACCEPTANCE = {}


@pytest.fixture(scope="session")
def acceptance_report():
    return ACCEPTANCE


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE):
        terminalreporter.write_line(ACCEPTANCE[key])
