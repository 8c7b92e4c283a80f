"""Session fixtures shared across the suite."""
from __future__ import annotations

import sys

import numpy as np
import pytest

from stepbench.ingestion import SyntheticConfig, generate_synthetic
from stepbench.sampling import assemble_corpus
from stepbench.scene import DataParams


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def road_corpus():
    """Straight-road corpus with noise and one speed change per agent."""
    ss = generate_synthetic(SyntheticConfig(scene_count=8, agents_per_scene=2, noise_sigma=0.05, seed=2))
    dp = DataParams(n_I=5, n_O=6, dt=0.5, t0_policy="regular_spacing", gap=2.0)
    return assemble_corpus([(ss, None)], dp)


@pytest.fixture(scope="session")
def linear_corpus():
    ss = generate_synthetic(SyntheticConfig(scene_count=6, agents_per_scene=3, speed_changes=0, seed=4))
    dp = DataParams(n_I=5, n_O=6, dt=0.5, t0_policy="regular_spacing", gap=2.0)
    return assemble_corpus([(ss, None)], dp)


@pytest.fixture(scope="session")
def gap_corpus():
    ss = generate_synthetic(SyntheticConfig(scenario_kind="roundabout_gap", scene_count=30, agents_per_scene=2,
                                            seed=6))
    dp = DataParams(n_I=5, n_O=8, dt=0.5, t0_policy="first_available")
    return assemble_corpus([(ss, None)], dp)



def pytest_terminal_summary(terminalreporter):
    """Repeat the acceptance PASS/FAIL lines at the end of the run."""
    mod = sys.modules.get("tests.test_acceptance")
    if mod is None or not mod.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for line in sorted(mod.RESULTS, key=lambda x: int(x.split()[1])):
        terminalreporter.write_line(line)
