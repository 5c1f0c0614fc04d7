import os
from pathlib import Path

import numpy as np
import pytest

from dtrl.dataset import gen_toy
from dtrl.ibmdp import IbmdpInstance
from dtrl.oibmdp import OibmdpModel

REPO = Path(__file__).resolve().parents[1]
DATA_DIR = Path(os.environ.get("DTRL_DATA_DIR", REPO / "data"))

ZETA, GAMMA = 0.5, 0.99
# episode: split, split, correct predict; then restart
TOY_OPTIMUM = (ZETA + GAMMA * ZETA + GAMMA**2) / (1 - GAMMA**3)


@pytest.fixture(scope="session")
def toy_tasks():
    return [gen_toy(s) for s in range(5)]


@pytest.fixture(scope="session")
def toy_instance(toy_tasks):
    return IbmdpInstance(toy_tasks[0].dataset, p=1, zeta=ZETA, gamma=GAMMA, max_igas=3)


@pytest.fixture(scope="session")
def toy_model(toy_instance):
    return OibmdpModel(toy_instance)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# one line per acceptance criterion, echoed in the terminal summary
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
