import numpy as np
import pytest

from pmuspoof import build_admittance, build_pmu_model, load_case, load_placement, solve_power_flow
from pmuspoof.netcase import parse_case

TWO_BUS = """
baseMVA = 100;
bus = [
    1 3 0 0 0 0 1 1.0 0 230 1 1.1 0.9;
    2 1 0 0 0 0 1 1.0 0 230 1 1.1 0.9;
];
gen = [
    1 0 0 300 -300 1.0 100 1 250 10;
];
branch = [
    1 2 0.01 0.1 0.02 0 0 0 0 0 1 -360 360;
];
"""


class Net:
    """A bundled network with its admittances, PMU model and nominal profile."""

    def __init__(self, name):
        self.case = load_case(name)
        self.adm = build_admittance(self.case)
        self.placement = load_placement(name, self.case)
        self.model = build_pmu_model(self.case, self.adm, self.placement)
        prof = solve_power_flow(self.case, adm=self.adm)
        self.raw_profile = prof
        self.profile = prof.rotated(-prof.angle[self.case.slack_index])
        self.v = self.profile.v
        self.ref = self.case.slack_index


@pytest.fixture(scope="session")
def ieee14():
    return Net("ieee14")


@pytest.fixture(scope="session")
def ieee30():
    return Net("ieee30")


@pytest.fixture(scope="session")
def ieee118():
    return Net("ieee118")


@pytest.fixture
def two_bus():
    return parse_case(TWO_BUS, name="two_bus")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# ---------------------------------------------------------------------------
# acceptance reporting: one PASS/FAIL line per criterion at the end of the run

ACCEPTANCE: dict[int, list[tuple[str, bool, str]]] = {}


def record_criterion(number: int, part: str, ok: bool, detail: str) -> None:
    ACCEPTANCE.setdefault(number, []).append((part, bool(ok), detail))
    print(f"criterion {number} [{part}]: {'PASS' if ok else 'FAIL'} ({detail})")


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for number in sorted(ACCEPTANCE):
        parts = ACCEPTANCE[number]
        ok = all(p[1] for p in parts)
        failed = [p[0] for p in parts if not p[1]]
        suffix = "" if ok else f" (failing parts: {', '.join(failed)})"
        tr.write_line(f"criterion {number}: {'PASS' if ok else 'FAIL'}{suffix}")
        for part, pok, detail in parts:
            tr.write_line(f"    {part}: {'pass' if pok else 'FAIL'}: {detail}")
