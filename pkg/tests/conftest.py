import math

import numpy as np
import pytest

from plsgd import problems


@pytest.fixture(scope="session")
def linear_instance():
    spec = problems.ProblemSpec(
        family="linear_realizable", dim=5, input_scale=math.sqrt(3.0),
        w_star=tuple(np.ones(5) / math.sqrt(5)), operating_radius=2.0, seed=101,
    )
    return problems.generate_problem(spec)


@pytest.fixture(scope="session")
def noisy_instance():
    spec = problems.ProblemSpec(
        family="linear_noisy", dim=5, input_scale=math.sqrt(3.0),
        w_star=tuple(np.ones(5) / math.sqrt(5)), operating_radius=2.0,
        noise_std=0.1, seed=202,
    )
    return problems.generate_problem(spec)


@pytest.fixture(scope="session")
def sine_instance():
    # small oracles keep certification cheap in unit tests
    spec = problems.ProblemSpec(
        family="sine_link_realizable", dim=5, input_scale=0.8,
        w_star=tuple(0.8 * np.ones(5) / math.sqrt(5)), operating_radius=1.0,
        link_amplitude=0.5, seed=303,
        m_oracle=200_000, pl_probes=400, pl_oracle_samples=40_000,
    )
    return problems.generate_problem(spec)
