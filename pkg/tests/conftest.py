import numpy as np
import pytest

from prsmpc.gaussians import GaussianSequence
from prsmpc.lti import ClosedLoopGain, LtiModel
from prsmpc.prs import Polytope

DI_A = np.array([[1.0, 1.0], [0.0, 1.0]])
DI_B = np.array([[0.5], [1.0]])
DI_K = np.array([[-0.2, -0.6]])
DI_SIGMA_W = np.array([[0.25, 0.5], [0.5, 1.0]])


@pytest.fixture
def di_model():
    return LtiModel(DI_A, DI_B)


@pytest.fixture
def di_gain(di_model):
    return ClosedLoopGain.from_model(di_model, DI_K)


@pytest.fixture
def di_velocity_box():
    return Polytope(np.array([[0.0, 1.0], [0.0, -1.0]]), np.array([3.0, 3.0]))


def di_disturbance(n_blocks):
    return GaussianSequence.iid(DI_SIGMA_W, n_blocks)


def random_correlated_sequence(rng, n_x, n_blocks, scale=0.5):
    """Full-covariance Gaussian sequence with a random nonzero mean."""
    d = n_x * n_blocks
    L = rng.standard_normal((d, d)) / np.sqrt(d)
    cov = scale * (L @ L.T) + 0.05 * np.eye(d)
    return GaussianSequence(rng.standard_normal(d), 0.5 * (cov + cov.T), n_x)


def random_stable(rng, n, radius=0.9):
    A = rng.standard_normal((n, n))
    return radius * A / max(np.max(np.abs(np.linalg.eigvals(A))), 1e-12)


def pytest_terminal_summary(terminalreporter):
    import test_acceptance

    lines = getattr(test_acceptance, "RESULTS", [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
