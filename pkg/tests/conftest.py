import numpy as np
import pytest

from sfpe_tail import make_driver, make_model, make_regen
from sfpe_tail.rng import Stream


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def stream():
    return Stream(2024)


@pytest.fixture(scope="session")
def ruin_model():
    d = make_driver("ruin", {"m_R": 0.2, "s_R": 0.4, "rate": 1.0, "claim_mean": 1.0, "premium": 1.2})
    return make_model("Ruin", d)


@pytest.fixture(scope="session")
def ruin_regen(ruin_model):
    return make_regen(ruin_model, {"scheme": "atom"})


@pytest.fixture(scope="session")
def lognormal_model():
    d = make_driver("lognormal", {"mu": -0.05, "sigma": 0.2, "B": {"dist": "normal", "mean": 1.0, "sd": 1.0},
                                  "D": 0.0})
    return make_model("LetacE", d)


# one line per acceptance criterion, printed at the end of the session
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
