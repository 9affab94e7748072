import sys
from pathlib import Path

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

sys.path.insert(0, str(Path(__file__).parent))

settings.register_profile("default", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

from steptcn.ontology import Ontology, builtin_cataracts_ontology  # noqa: E402


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def cataracts():
    return builtin_cataracts_ontology()


@pytest.fixture(scope="session")
def toy_ontology():
    # 5 steps, 2 phases; step 2 is shared
    m = [[1, 0], [1, 0], [1, 1], [0, 1], [0, 1]]
    return Ontology(("a", "b", "shared", "c", "d"), ("P0", "P1"), np.array(m))


# acceptance report: one line per criterion, repeated at the end of the run
ACCEPTANCE_LINES = []


@pytest.fixture
def record_criterion():
    def record(number, ok, detail):
        line = f"[{'PASS' if ok else 'FAIL'}] C{number:<2} {detail}"
        ACCEPTANCE_LINES.append(line)
        print(line)
        return ok
    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1][1:])):
            terminalreporter.write_line(line)
