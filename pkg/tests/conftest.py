import numpy as np
import pytest

from hcrom.harness import build_operator, make_phantom
from hcrom.mesh import disk_mesh
from hcrom.reduce import build_reduced_model

DELTA = 1e-5


@pytest.fixture(scope="session")
def mesh0():
    return disk_mesh(0)


@pytest.fixture(scope="session")
def mesh1():
    return disk_mesh(1)


@pytest.fixture(scope="session")
def op0(mesh0):
    return build_operator(mesh0)


@pytest.fixture(scope="session")
def op1(mesh1):
    return build_operator(mesh1)


@pytest.fixture(scope="session")
def model0(op0, mesh0):
    return build_reduced_model(op0, DELTA, fingerprint=mesh0.fingerprint())


@pytest.fixture(scope="session")
def model1(op1, mesh1):
    return build_reduced_model(op1, DELTA, fingerprint=mesh1.fingerprint())


@pytest.fixture(scope="session")
def phantom0(mesh0):
    return make_phantom(mesh0)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def spectra():
    """Singular values ``(sx, sm)`` of the excitation/emission operators, levels 1-3."""
    out = {}
    for level in (1, 2, 3):
        op = build_operator(disk_mesh(level), keep=1)
        out[level] = (op.sx, op.sm)
    return out


_ACCEPTANCE = pytest.StashKey[list]()


def pytest_configure(config):
    config.stash[_ACCEPTANCE] = []


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(_ACCEPTANCE, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)


@pytest.fixture
def verdict(request):
    """Print and record one ``criterion N: PASS|FAIL`` line."""
    def record(number: int, ok: bool, detail: str) -> bool:
        line = f"criterion {number}: {'PASS' if ok else 'FAIL'}  {detail}"
        print(line)
        request.config.stash[_ACCEPTANCE].append(line)
        return ok
    return record
