import numpy as np
import pytest

from med2n.config import load_config
from med2n.data import generate_benchmark

ACCEPTANCE_LINES = pytest.StashKey[list]()


@pytest.fixture(scope="session")
def smoke_cfg():
    return load_config(profile="smoke")


@pytest.fixture(scope="session")
def smoke_bench(smoke_cfg):
    return generate_benchmark(smoke_cfg.data)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def criterion(request):
    """Record one acceptance line, print it, then assert on it."""
    lines = request.config.stash.setdefault(ACCEPTANCE_LINES, [])

    def record(number: int, ok: bool, detail: str) -> None:
        line = f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
        lines.append(line)
        print(line)
        assert ok, line

    return record


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(ACCEPTANCE_LINES, [])
    if lines:
        terminalreporter.write_sep("=", "acceptance criteria")
        for line in sorted(lines):
            terminalreporter.write_line(line)
