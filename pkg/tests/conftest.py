import pytest

from proxbias.moments import treatment_moments_quadrature
from proxbias.sweep import preset_spec


@pytest.fixture(scope="session")
def zw6():
    return preset_spec("zw_section6")


@pytest.fixture(scope="session")
def ay6():
    return preset_spec("ay_section6")


@pytest.fixture(scope="session")
def base_case():
    return preset_spec("base_case")


@pytest.fixture(scope="session")
def zw6_mom(zw6):
    return treatment_moments_quadrature(zw6)


@pytest.fixture(scope="session")
def ay6_mom(ay6):
    return treatment_moments_quadrature(ay6)


def pytest_terminal_summary(terminalreporter):
    from tests.test_acceptance import RESULTS

    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for key in sorted(RESULTS):
            terminalreporter.write_line(RESULTS[key])
