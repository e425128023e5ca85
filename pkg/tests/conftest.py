import numpy as np
import pytest

from teacherguide.schedule import build_schedule
from teacherguide.world import MixtureWorld


@pytest.fixture(scope="session")
def linear():
    return build_schedule("linear", 1000, 1e-4, 2e-2)


@pytest.fixture(scope="session")
def cosine():
    return build_schedule("cosine", 1000, 1e-8, 0.999)


@pytest.fixture(scope="session")
def mix1d():
    return MixtureWorld([0.3, 0.7], [[-1.0], [2.0]], [[0.25], [0.5]], (None, None))


@pytest.fixture(scope="session")
def mix2d():
    return MixtureWorld(
        [0.5, 0.5], [[-1.5, 0.5], [1.5, -0.5]], [[0.25, 0.5], [0.25, 0.5]], (None, None)
    )


@pytest.fixture(scope="session")
def labelled():
    # three components, two condition labels
    return MixtureWorld(
        [0.2, 0.3, 0.5],
        [[-2.0, 0.0], [0.0, 1.0], [2.0, -1.0]],
        [[0.3, 0.2], [0.5, 0.5], [0.2, 0.4]],
        ("cat", "cat", "dog"),
    )


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_configure(config):
    config._acceptance_lines = []


@pytest.fixture
def acceptance(request):
    """Record one summary line per acceptance criterion."""

    def record(number: int, title: str, passed: bool, detail: str = ""):
        line = f"[{'PASS' if passed else 'FAIL'}] {number:>2}. {title}" + (f": {detail}" if detail else "")
        request.config._acceptance_lines.append((number, line))
        print(line)
        return passed

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = getattr(config, "_acceptance_lines", [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(lines):
            terminalreporter.write_line(line)
