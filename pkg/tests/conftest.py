import os

import numpy as np
import pytest

from clab.grid import BoundaryMesh, DomainSpec, GridSpec


@pytest.fixture(autouse=True, scope="session")
def _isolated_cache(tmp_path_factory):
    """Keep test artifacts out of the user cache unless one is configured."""
    if "CLAB_CACHE_DIR" not in os.environ:
        os.environ["CLAB_CACHE_DIR"] = str(tmp_path_factory.mktemp("clab-cache"))
    yield


@pytest.fixture(scope="session")
def unit_mesh():
    """Cube ``[-1, 1]^3`` on a 32^3 grid of half-width 2."""
    return BoundaryMesh(GridSpec(3, 2.0, 32), DomainSpec(1.0), 4)


@pytest.fixture(scope="session")
def mesh24():
    """The reconstruction geometry (``a = 1/4`` inside ``[-1/2, 1/2)^3``) at 24^3."""
    return BoundaryMesh(GridSpec(3, 0.5, 24), DomainSpec(0.25, 0.0), 4)


@pytest.fixture(scope="session")
def disk_mesh():
    """Square ``[-1, 1]^2`` used by the wall experiments, at 64^2."""
    return BoundaryMesh(GridSpec(2, 2.0, 64), DomainSpec(1.0), 4)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


ACCEPTANCE = pytest.StashKey[list]()


@pytest.fixture
def verdict(request):
    """Record one acceptance line ``C<k> PASS|FAIL name: detail`` and assert the outcome."""

    def record(k: int, name: str, ok: bool, detail: str) -> None:
        line = f"C{k:<2d} {'PASS' if ok else 'FAIL'}  {name}: {detail}"
        print(line)
        request.config.stash.setdefault(ACCEPTANCE, []).append((k, line))
        assert ok, line

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(ACCEPTANCE, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(lines):
            terminalreporter.write_line(line)
