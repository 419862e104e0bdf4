import numpy as np
import pytest

from snmm.dgp import DgpConfig, simulate

ACCEPTANCE_LINES: list[str] = []


def record_criterion(label: str, passed: bool, detail: str = "") -> str:
    line = f"[{'PASS' if passed else 'FAIL'}] {label}" + (f": {detail}" if detail else "")
    ACCEPTANCE_LINES.append(line)
    print(line)
    return line


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


def multiplicative_config(**overrides) -> DgpConfig:
    """P1 with the whole effect moved onto the positive part.

    With ``psi_p = 0`` the zero-inflation clamp never depends on the
    intervention, so the multiplicative mean model holds exactly.
    """
    base = DgpConfig.preset("P1")
    kw = {"psi_p": (0.0,) * 10, "psi_y": tuple(base.psi)}
    kw.update(overrides)
    return DgpConfig.preset("P1", **kw)


@pytest.fixture(scope="session")
def small_sim():
    return simulate(DgpConfig.preset("P1", n=120, T=60, seed=11))


@pytest.fixture(scope="session")
def medium_sim():
    return simulate(DgpConfig.preset("P1", n=300, T=120, seed=5))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
