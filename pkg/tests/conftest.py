import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile(
    "default", max_examples=40, deadline=None, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# Acceptance criteria report: tests in test_acceptance.py record one outcome
# per criterion and the summary prints a PASS/FAIL line for each.
CRITERIA = {
    1: "gradient integrity",
    2: "matching oracles",
    3: "geometry oracles",
    4: "evaluator oracle",
    5: "label-space fixtures",
    6: "synthetic overfit",
    7: "ablation directions",
    8: "determinism",
    9: "default constants in help",
}
_outcomes: dict[int, list[tuple[bool, str]]] = {}


@pytest.fixture
def record_criterion():
    def record(number: int, passed: bool, detail: str = "") -> bool:
        _outcomes.setdefault(number, []).append((bool(passed), detail))
        return bool(passed)

    return record


def pytest_terminal_summary(terminalreporter):
    if not _outcomes:
        return
    terminalreporter.section("acceptance criteria")
    for n, title in CRITERIA.items():
        parts = _outcomes.get(n)
        if not parts:
            terminalreporter.write_line(f"criterion {n} ({title}): NOT RUN")
            continue
        ok = all(p for p, _ in parts)
        detail = "; ".join(d for _, d in parts if d)
        terminalreporter.write_line(f"criterion {n} ({title}): {'PASS' if ok else 'FAIL'}  {detail}")
