import numpy as np
import pytest

from gabic import tensor as T

_ACCEPTANCE = pytest.StashKey[list]()


def pytest_configure(config):
    config.stash[_ACCEPTANCE] = []
    config.addinivalue_line("markers", "acceptance: headline acceptance criteria (slow)")


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(_ACCEPTANCE, [])
    if not lines:
        return
    terminalreporter.section("acceptance criteria")
    for line in sorted(lines, key=lambda l: int(l.split("[", 1)[1].split("]", 1)[0])):
        terminalreporter.write_line(line)


@pytest.fixture
def report(request):
    """Record one PASS/FAIL line for an acceptance criterion; printed in the terminal summary."""
    lines = request.config.stash[_ACCEPTANCE]

    def emit(number: int, title: str, ok: bool, detail: str) -> None:
        line = f"{'PASS' if ok else 'FAIL'} [{number}] {title}: {detail}"
        lines.append(line)
        print(line)

    return emit


@pytest.fixture
def f64():
    with T.precision(64):
        yield


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
