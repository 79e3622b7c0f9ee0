import numpy as np
import pytest
from hypothesis import settings

from mmpf.synthetic import GaussianPiecewiseSpec, reference_three_group_spec, two_group_tradeoff_spec

settings.register_profile("default", deadline=None, max_examples=60)
settings.load_profile("default")


@pytest.fixture(scope="session")
def three_group_spec():
    return reference_three_group_spec()


@pytest.fixture(scope="session")
def tradeoff_spec():
    return two_group_tradeoff_spec()


@pytest.fixture(scope="session")
def identical_spec():
    return GaussianPiecewiseSpec(means=(0.0, 0.0, 0.0), thresholds=(0.1, 0.1, 0.1), low=(0.2, 0.2, 0.2),
                                 high=(0.7, 0.7, 0.7))


# criterion number -> (title, passed, detail); filled by the acceptance suite
ACCEPTANCE = {}


@pytest.fixture(scope="session")
def acceptance():
    def record(number, title, passed, detail):
        ACCEPTANCE[number] = (title, bool(passed), detail)
        return bool(passed)

    return record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE, key=lambda k: (int(str(k).rstrip("ab")), str(k))):
        title, passed, detail = ACCEPTANCE[number]
        status = "PASS" if passed else "FAIL"
        if passed is None:
            status = "SKIP"
        terminalreporter.write_line(f"[{status}] criterion {number}: {title} ({detail})")


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)
