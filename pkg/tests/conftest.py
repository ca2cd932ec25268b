import os
from pathlib import Path

import pytest

ACCEPTANCE_ROOT_ENV = "SSDC_ACCEPTANCE_ROOT"
DEFAULT_ACCEPTANCE_ROOT = Path(__file__).resolve().parents[1] / ".cache" / "acceptance"

_VERDICTS = pytest.StashKey[dict]()


@pytest.fixture
def verdict(request):
    """Record and print one pass/fail line for an acceptance criterion."""

    def record(number: int, passed: bool, detail: str) -> bool:
        line = f"criterion {number:2d}: {'PASS' if passed else 'FAIL'}  {detail}"
        request.config.stash.setdefault(_VERDICTS, {})[number] = line
        print(line)
        return passed

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(_VERDICTS, {})
    if lines:
        terminalreporter.section("acceptance criteria")
        for number in sorted(lines):
            terminalreporter.write_line(lines[number])


@pytest.fixture(scope="session")
def experiment():
    """The default toy study; trains on first use (hours on one CPU core),
    afterwards everything is read back from the cache directory."""
    from ssdc.experiment import EvalConfig, Experiment, ExperimentConfig

    root = Path(os.environ.get(ACCEPTANCE_ROOT_ENV, DEFAULT_ACCEPTANCE_ROOT))
    exp = Experiment(ExperimentConfig(), root)
    ecfg = EvalConfig()
    return exp, ecfg, exp.results(ecfg)
