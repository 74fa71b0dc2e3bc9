import numpy as np
import pytest

from prsmpc.exceptions import DimensionMismatch
from prsmpc.qp import (INFEASIBLE, OPTIMAL, AdmmSettings, AdmmSolver, QuadraticProgram,
                       kkt_residuals, solve)

from oracles import dual_projected_gradient


def random_qp(rng, n_max=30, m_max=60):
    """Strictly convex QP with a known strictly feasible point."""
    n = int(rng.integers(2, n_max + 1))
    m = int(rng.integers(1, m_max + 1))
    n_eq = min(int(rng.integers(0, n // 2 + 1)), m)
    M = rng.standard_normal((n, n))
    H = M @ M.T / n + 0.1 * np.eye(n)
    A = rng.standard_normal((m, n))
    y0 = rng.standard_normal(n)
    b = A @ y0
    b[n_eq:] += rng.uniform(0.05, 1.0, m - n_eq)
    g = 3.0 * rng.standard_normal(n)
    return H, g, A, b, n_eq


def as_qp(H, g, A, b, n_eq):
    return QuadraticProgram(H, g, A[:n_eq], b[:n_eq], A[n_eq:], b[n_eq:])


def test_unconstrained():
    sol = solve(QuadraticProgram(np.eye(2), [-1.0, -2.0]))
    assert sol.status == OPTIMAL
    np.testing.assert_allclose(sol.y, [1.0, 2.0], atol=1e-8)


def test_lower_bound():
    sol = solve(QuadraticProgram([[1.0]], [0.0], A_in=[[-1.0]], b_in=[-1.0]))
    assert sol.status == OPTIMAL
    assert sol.y[0] == pytest.approx(1.0, abs=1e-8)
    assert sol.objective == pytest.approx(0.5, abs=1e-8)
    assert sol.multipliers[0] == pytest.approx(1.0, abs=1e-6)


def test_equality():
    sol = solve(QuadraticProgram(np.eye(2), np.zeros(2), A_eq=[[1.0, 1.0]], b_eq=[1.0]))
    np.testing.assert_allclose(sol.y, [0.5, 0.5], atol=1e-8)


def test_problem_validation():
    with pytest.raises(ValueError):
        QuadraticProgram([[1.0, 2.0], [0.0, 1.0]], [0.0, 0.0])
    with pytest.raises(ValueError):
        QuadraticProgram(-np.eye(2), [0.0, 0.0])
    with pytest.raises(DimensionMismatch):
        QuadraticProgram(np.eye(2), [0.0, 0.0, 0.0])


def test_random_qps_match_oracle():
    rng = np.random.default_rng(123)
    for _ in range(50):
        data = random_qp(rng)
        sol = solve(as_qp(*data))
        _, dual_value = dual_projected_gradient(*data)
        assert sol.status == OPTIMAL
        assert max(sol.kkt_residuals) <= 1e-6
        assert abs(sol.objective - dual_value) <= 1e-5 * max(1.0, abs(dual_value))


def test_warm_start_reaches_same_optimum():
    rng = np.random.default_rng(5)
    for _ in range(10):
        qp = as_qp(*random_qp(rng))
        cold = solve(qp)
        warm = solve(qp, warm_start=cold.y + 0.01 * rng.standard_normal(qp.n))
        assert warm.status == OPTIMAL
        assert warm.objective == pytest.approx(cold.objective, rel=1e-6, abs=1e-6)


def test_deterministic():
    qp = as_qp(*random_qp(np.random.default_rng(9)))
    a, b = solve(qp), solve(qp)
    np.testing.assert_array_equal(a.y, b.y)


@pytest.mark.parametrize("seed", range(10))
def test_contradictory_bounds_are_infeasible(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(1, 6))
    j = int(rng.integers(n))
    A = np.zeros((2, n))
    A[0, j], A[1, j] = 1.0, -1.0
    H = np.eye(n)
    sol = solve(QuadraticProgram(H, rng.standard_normal(n), A_in=A, b_in=[0.0, -1.0]))
    assert sol.status == INFEASIBLE
    v = sol.certificate
    assert np.abs(A.T @ v).max() <= 1e-4 * np.abs(v).max()
    assert np.array([0.0, -1.0]) @ np.maximum(v, 0) < 0


def test_batch_members_are_independent():
    rng = np.random.default_rng(11)
    H, g, A, b, n_eq = random_qp(rng, 10, 20)
    qp = as_qp(H, g, A, b, n_eq)
    A_box, l, u, is_eq = qp.box_form()
    solver = AdmmSolver(H, A_box, is_eq)
    G = np.vstack([g, g + rng.standard_normal(g.size), g])
    batch = solver.solve(G, np.tile(l, (3, 1)), np.tile(u, (3, 1)))
    single = solver.solve(g[None], l[None], u[None])
    # identical up to rounding in batched BLAS calls
    np.testing.assert_allclose(batch.y[0], single.y[0], rtol=1e-12, atol=1e-12)
    np.testing.assert_array_equal(batch.y[0], batch.y[2])
    assert len(batch) == 3 and batch[1].status == OPTIMAL


def test_max_iter_is_reported():
    rng = np.random.default_rng(2)
    qp = as_qp(*random_qp(rng, 20, 40))
    sol = solve(qp, settings=AdmmSettings(max_iter=10, polish=False, check_every=10))
    assert sol.status in ("max_iter", OPTIMAL)


def test_kkt_residuals_zero_at_optimum():
    H = np.eye(1)
    A = np.array([[-1.0]])
    r = kkt_residuals(H, np.zeros((1, 1)), A, np.full((1, 1), -np.inf), np.array([[-1.0]]),
                      np.array([[1.0]]), np.array([[1.0]]))
    np.testing.assert_allclose(r, 0.0, atol=1e-14)
