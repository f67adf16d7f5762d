import numpy as np
import pytest

from slugvae import curvature
from slugvae.fixtures import tiny_model


@pytest.fixture(scope="session")
def tiny():
    """(model, dataset) of the deterministic tiny fixture."""
    return tiny_model(seed=0)


@pytest.fixture(scope="session")
def tiny_train(tiny):
    return tiny[1].split("train").images[:8]


@pytest.fixture(scope="session")
def tiny_x(tiny):
    return tiny[1].split("test").images[0]


@pytest.fixture(scope="session")
def tiny_state(tiny, tiny_train):
    op = curvature.GGNOperator(tiny[0], tiny_train)
    return curvature.lanczos(op, 40, seed=0)


@pytest.fixture(scope="session")
def tiny_basis(tiny_state):
    return curvature.build_basis(tiny_state, 10)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


_ACCEPTANCE = pytest.StashKey[dict]()


@pytest.fixture(scope="session")
def criterion(request):
    """``criterion(n, ok, detail)`` records one acceptance line and prints it."""
    lines = request.config.stash.setdefault(_ACCEPTANCE, {})

    def record(n, ok, detail):
        line = f"criterion {n:2d} {'PASS' if ok else 'FAIL'}: {detail}"
        lines[n] = line
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(_ACCEPTANCE, {})
    if lines:
        terminalreporter.section("acceptance criteria")
        for n in sorted(lines):
            terminalreporter.write_line(lines[n])
