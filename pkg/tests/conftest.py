import sys

import pytest

from provsight.graph import build
from provsight.tracegen import ScenarioSpec, simulate


@pytest.fixture(scope="session")
def mining_scenario():
    return simulate(ScenarioSpec(seed=42, attacks=("mining",), days=1))


@pytest.fixture(scope="session")
def mining_graphs(mining_scenario):
    return build(mining_scenario.train[0].events), build(mining_scenario.test[0].events)


def pytest_terminal_summary(terminalreporter):
    module = sys.modules.get("test_acceptance")
    if module is None or not any("test_acceptance" in r.nodeid
                                 for r in terminalreporter.stats.get("passed", []) +
                                 terminalreporter.stats.get("failed", [])):
        return
    terminalreporter.section("acceptance criteria")
    for n in range(1, 12):
        ok, detail = module.RESULTS.get(n, (False, "not run or errored before a verdict"))
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
