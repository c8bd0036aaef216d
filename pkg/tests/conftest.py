import numpy as np
import pytest

from amerecon.core import Unknowns
from amerecon.nlinv import MultiCoilFrame
from amerecon.nufft import RadialTrajectory, build_kb_table


def crandn(rng, *shape):
    return rng.standard_normal(shape) + 1j * rng.standard_normal(shape)


def dot_test_error(lhs: complex, rhs: complex) -> float:
    """Relative mismatch of ``<A x, y>`` and ``<x, A* y>``."""
    return abs(lhs - rhs) / max(abs(lhs), abs(rhs), 1e-300)


def radial_traj(n_spokes: int, n_read: int, rot: float = 0.0) -> RadialTrajectory:
    theta = np.arange(n_spokes) * np.pi * 2 / n_spokes + rot
    k = (np.arange(n_read) - n_read // 2) / n_read
    kx = np.outer(np.cos(theta), k).ravel()
    ky = np.outer(np.sin(theta), k).ravel()
    return RadialTrajectory(np.stack([kx, ky], 1), n_spokes, n_read)


def random_traj(rng, m: int) -> RadialTrajectory:
    return RadialTrajectory(rng.uniform(-0.5, 0.5, (m, 2)), m, 1)


def random_unknowns(rng, n: int, coils: int, offsets=(0,)) -> Unknowns:
    return Unknowns(crandn(rng, n, n), crandn(rng, len(offsets), coils, n, n), tuple(offsets))


def random_frame(rng, traj, coils: int, index: int = 0) -> MultiCoilFrame:
    return MultiCoilFrame(index, crandn(rng, coils, traj.n_samples), traj)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def tbl():
    return build_kb_table()


# acceptance results, printed in the terminal summary
ACCEPTANCE: list[str] = []


def report(criterion: int, ok: bool, detail: str) -> None:
    line = f"{'PASS' if ok else 'FAIL'} criterion {criterion}: {detail}"
    ACCEPTANCE.append(line)
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)
