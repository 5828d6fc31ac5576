import time

import pytest

from convolt.evaluation import ExperimentConfig, build_records
from convolt.synth import SynthConfig, generate_cases

ACCEPTANCE_LINES: list[str] = []


@pytest.fixture(scope="session")
def default_records():
    """Records of the default 400-case dataset, with the seconds spent building them."""
    t0 = time.perf_counter()
    recs = build_records(generate_cases(SynthConfig()), ExperimentConfig())["local"]
    return recs, time.perf_counter() - t0


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
