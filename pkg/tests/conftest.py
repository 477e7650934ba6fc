import json
from pathlib import Path

import pytest

from jkolab.jko import JkoConfig, initial_density, run_trajectory
from jkolab.torus import DensityField, TorusGrid

GOLDEN = Path(__file__).parent / "golden" / "default_run.json"
K, N = 0.05, 32


@pytest.fixture(scope="session")
def golden():
    return json.loads(GOLDEN.read_text())


@pytest.fixture(scope="session")
def default_traj():
    grid = TorusGrid(1, 128)
    return run_trajectory(initial_density(grid), JkoConfig(K, N, grid))


@pytest.fixture(scope="session")
def fine_traj():
    grid = TorusGrid(1, 256)
    return run_trajectory(initial_density(grid), JkoConfig(K, N, grid))


@pytest.fixture(scope="session")
def uniform_traj():
    grid = TorusGrid(1, 32)
    return run_trajectory(DensityField.uniform(grid), JkoConfig(K, 8, grid))


@pytest.fixture(scope="session")
def smoke_traj():
    grid = TorusGrid(2, 32)
    return run_trajectory(initial_density(grid), JkoConfig(K, 8, grid))


# one line per acceptance criterion, printed after the run
ACCEPTANCE: dict[str, list[tuple[bool, str]]] = {}


def record(criterion: str, ok: bool, detail: str) -> bool:
    ACCEPTANCE.setdefault(criterion, []).append((bool(ok), detail))
    print(f"criterion {criterion}: {'PASS' if ok else 'FAIL'}  {detail}")
    return bool(ok)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for name in sorted(ACCEPTANCE, key=lambda s: (int(s.split()[0]), s)):
        parts = ACCEPTANCE[name]
        ok = all(p for p, _ in parts)
        detail = "; ".join(d for _, d in parts)
        terminalreporter.write_line(f"criterion {name}: {'PASS' if ok else 'FAIL'}  {detail}")
