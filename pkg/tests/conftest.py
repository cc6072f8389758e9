import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from ctxengage import synthgen
from ctxengage.pipeline import dataset as ds

settings.register_profile("ci", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow, HealthCheck.function_scoped_fixture])
settings.load_profile("ci")


SMALL = synthgen.SynthConfig(n_users=60, span_days=10, n_zips=8, seed=3)


@pytest.fixture(scope="session")
def small_world():
    """(cohort, tables, log) for a 60-user, 10-day cohort."""
    cohort = synthgen.generate_cohort(SMALL.n_users, SMALL.seed, SMALL)
    tables = synthgen.generate_context_tables(SMALL.n_zips, SMALL.span_days * 24, SMALL.seed, SMALL)
    log = synthgen.simulate(cohort, tables, SMALL.span_days, SMALL.seed, SMALL)
    return cohort, tables, log


@pytest.fixture(scope="session")
def small_bundle(small_world):
    _, tables, log = small_world
    return ds.prepare(log, tables)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    import helpers

    if helpers.ACCEPTANCE:
        terminalreporter.write_sep("=", "acceptance criteria")
        for n in sorted(helpers.ACCEPTANCE):
            terminalreporter.write_line(helpers.ACCEPTANCE[n])
