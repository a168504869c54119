import os

import pytest
import torch
from hypothesis import HealthCheck, settings

from rtpt.harness import make_toy_dataset
from rtpt.toy import make_toy_backend

torch.set_num_threads(int(os.environ.get("RTPT_TEST_THREADS", "1")))

settings.register_profile(
    "default", max_examples=50, deadline=None, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile("default")


@pytest.fixture(scope="session")
def backend():
    return make_toy_backend(0)


@pytest.fixture(scope="session")
def small_dataset():
    return make_toy_dataset(seed=0, n_samples=20)


@pytest.fixture(scope="session")
def class_names(small_dataset):
    return small_dataset.class_names


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
