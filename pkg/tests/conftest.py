from functools import lru_cache

import pytest

from ctxaug.contexts.profiles import get_profile
from ctxaug.lm.mock import MockLM, MockLmConfig
from ctxaug.records import StringRecord
from ctxaug import sim
from ctxaug.sim import make_strings

# criterion number -> (passed, detail), filled by test_acceptance
ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")


@pytest.fixture
def mock():
    return MockLM(MockLmConfig())


@pytest.fixture
def profile():
    return get_profile("synthetic-categories")


@pytest.fixture
def two_groups():
    """Eight animals strings in A, eight food strings in B."""
    return make_strings("animals", 8, 3, "A", "a") + make_strings("food", 8, 3, "B", "b")


def records(*texts, group=None):
    return [StringRecord(f"s{i}", t, group) for i, t in enumerate(texts)]


# Monte Carlo studies shared by test_sim and test_acceptance; computed once per session

@lru_cache(maxsize=None)
def budget_table(reference_mode="large_budget"):
    cfg = sim.SimConfig(n_per_group=20, J=4, b=2.0, sigma=0.5, seeds=range(50))
    return sim.budget_sweep(cfg, nc_grid=(1, 2, 4, 8), M_grid=(5, 10, 20), reference_mode=reference_mode)


@lru_cache(maxsize=None)
def self_reference(beta_self):
    return sim.self_reference_demo(sim.SimConfig(beta_self=beta_self, seeds=range(400)))
