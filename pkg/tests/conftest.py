import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from skilltree import envsuite
from skilltree.skillvq import train_skills

settings.register_profile("repo", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("repo")


@pytest.fixture(scope="session")
def small_data():
    return envsuite.generate_dataset(60, seed=3)


@pytest.fixture(scope="session")
def small_model(small_data):
    """A quickly trained, low-capacity skill model for plumbing tests."""
    model, history = train_skills(small_data, h=10, n_skills=4, code_dim=4, epochs=3, batch=32,
                                  hidden=32, depth=2, seed=1)
    return model


@pytest.fixture
def rng():
    return np.random.default_rng(0)


def pytest_terminal_summary(terminalreporter):
    from acceptance_report import LINES
    if LINES:
        terminalreporter.section("acceptance criteria")
        for n in sorted(LINES):
            terminalreporter.write_line(LINES[n])


def pytest_collection_modifyitems(config, items):
    # acceptance checks run last so the quick suites report first
    items.sort(key=lambda item: "test_acceptance" in item.nodeid)
