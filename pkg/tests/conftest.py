import pytest

from manlab.datasets import gen_blobs
from manlab.training import TrainConfig, train


@pytest.fixture(scope="session")
def blobs():
    return gen_blobs(4, 2, 250, 0.03, seed=0)


@pytest.fixture(scope="session")
def natural_model(blobs):
    target, _, _ = train(TrainConfig(regime="natural", epochs=30), blobs, eval_every=0)
    return target


@pytest.fixture(scope="session")
def joint_models(blobs):
    target, trans, record = train(TrainConfig(regime="joint", epochs=20), blobs, eval_every=0)
    return target, trans


ACCEPTANCE_LINES = {}


@pytest.fixture(scope="session")
def acceptance_report():
    def record(number, passed, detail):
        line = f"CRITERION {number:>2}: {'PASS' if passed else 'FAIL'}  {detail}"
        ACCEPTANCE_LINES[number] = line
        print(line)
        return passed
    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[n])
