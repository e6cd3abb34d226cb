import functools

import numpy as np
import pytest

from kraichnan_lab.coefficients import ModelSpec, build
from kraichnan_lab.lattice import enumerate_lattice

# one line per acceptance criterion, printed after the run
ACCEPTANCE_LINES: list[str] = []


def record(name: str, ok: bool, detail: str) -> None:
    line = f"[{'PASS' if ok else 'FAIL'}] {name}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@functools.lru_cache(maxsize=None)
def coeffs_for(family="isotropic", d=2, alpha=0.5, J=8, J_Z=None, tail_correction=True, table=None):
    return build(ModelSpec(d=d, alpha=alpha, family=family, J=J, J_Z=J_Z,
                           tail_correction=tail_correction, custom_table=table))


@functools.lru_cache(maxsize=None)
def lattice_for(d, N):
    return enumerate_lattice(d, N)


def single_pair(w=0.5, d=2, axis=1):
    """Custom family with one noise pair j = +-e_axis of amplitude w."""
    row = [0] * d
    row[axis] = 1
    neg = [-c for c in row]
    return coeffs_for("custom", d=d, J=1, table=(tuple(row + [w]), tuple(neg + [w])))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def ray_family(d=2, J=8):
    """Noise supported on one line through the origin: degenerate by construction."""
    rows = []
    for m in (1, 2):
        for s in (1, -1):
            rows.append(tuple([s * m] + [0] * (d - 1) + [0.3 / m]))
    return build(ModelSpec(d=d, alpha=0.5, family="custom", J=J, custom_table=tuple(rows)))
