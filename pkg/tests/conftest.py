import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from mrp.frame import FactorSpec, Frame  # noqa: E402

SMALL_FORMULA = (
    "cbind(y, n) ~ 1 + (1 | state) + (1 | age) + (1 | educ)"
    " + (1 | state:age) + (1 | educ:age)"
)


def small_specs():
    return [
        FactorSpec("state", tuple(f"S{i}" for i in range(6))),
        FactorSpec("age", ("a1", "a2", "a3", "a4")),
        FactorSpec("educ", tuple(f"e{i}" for i in range(5))),
    ]


def full_frame(specs, rng=None, lo=100, hi=1000):
    radices = [s.n_levels for s in specs]
    keys = np.array(np.unravel_index(np.arange(int(np.prod(radices))), radices)).T
    rng = rng or np.random.default_rng(0)
    return Frame(specs, keys, rng.integers(lo, hi + 1, size=len(keys)))


@pytest.fixture
def specs():
    return small_specs()


@pytest.fixture
def frame(specs):
    return full_frame(specs)


@pytest.fixture
def gender_specs():
    return [
        FactorSpec("state", ("AA", "BB", "CC")),
        FactorSpec("gender", ("Female", "Male")),
        FactorSpec("age", ("young", "mid", "old")),
    ]


@pytest.fixture
def gender_frame(gender_specs):
    return full_frame(gender_specs, np.random.default_rng(3), 10, 500)


# one line per acceptance criterion, repeated in the terminal summary
ACCEPTANCE_LINES: list[str] = []


def record_criterion(number, ok, detail):
    line = f"{'PASS' if ok else 'FAIL'} criterion {number:>2}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    return ok


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)
