import pytest

from eccpos import training as tr
from eccpos.config import RunConfig


@pytest.fixture(scope="session")
def small_run() -> RunConfig:
    """Reference dimensions with short training and small sample counts."""
    run = RunConfig()
    run = run.replace("train", stage1_epochs=2, stage2_epochs=2, samples_per_epoch=64,
                      validation_period=1, validation_samples=32)
    run = run.replace("estimation", calibration_count=200)
    run = run.replace("quant", calibration_samples=64)
    return run.replace("eval", test_samples=64)


@pytest.fixture(scope="session")
def small_bank(small_run):
    return tr.covariance_bank(small_run)


@pytest.fixture(scope="session")
def small_stage1(small_run, small_bank):
    return tr.run_stage1(small_run, small_bank)


def pytest_terminal_summary(terminalreporter):
    from helpers import VERDICTS
    if VERDICTS:
        terminalreporter.section("acceptance criteria")
        for line in VERDICTS:
            terminalreporter.write_line(line)
