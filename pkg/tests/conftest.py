from __future__ import annotations

import numpy as np
import pytest

from warpflow.bohm import BohmOptions, integrate_bohm

_ACCEPTANCE_LINES: list[str] = []


def record_acceptance(number: int, name: str, passed: bool, detail: str) -> str:
    line = f"[{'PASS' if passed else 'FAIL'}] criterion {number:2d} {name}: {detail}"
    _ACCEPTANCE_LINES.append(line)
    return line


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for line in sorted(_ACCEPTANCE_LINES, key=lambda s: int(s.split()[2])):
        terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def bohm22():
    return integrate_bohm(BohmOptions(n1=2, n2=2, L=200.0, n_grid=2048))


@pytest.fixture(scope="session")
def bohm22_small():
    return integrate_bohm(BohmOptions(n1=2, n2=2, L=40.0, n_grid=512))


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)
