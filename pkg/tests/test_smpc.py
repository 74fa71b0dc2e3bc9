import numpy as np
import pytest
from sklearn.base import clone

from prsmpc import simulate
from prsmpc.exceptions import AssumptionViolated, Infeasible, NotStable
from prsmpc.gaussians import GaussianSequence
from prsmpc.lti import ClosedLoopGain, LtiModel
from prsmpc.prs import Polytope
from prsmpc.qp import OPTIMAL
from prsmpc.smpc import (ControllerState, CostSpec, PredictedMoments, SmpcController,
                         condensed_maps, error_covariance_pair, expected_cost_terms,
                         shift_candidate, step, terminal_weight, verify_terminal)

from conftest import DI_A, DI_B, DI_K, DI_SIGMA_W, di_disturbance, random_correlated_sequence
from oracles import dual_projected_gradient, matrix_powers

TIGHT_VELOCITY = 1.4682529


def di_controller(variant="rec", horizon=30, dist=None, **kw):
    model = LtiModel(DI_A, DI_B)
    X = Polytope(np.array([[0.0, 1.0], [0.0, -1.0]]), np.array([3.0, 3.0]))
    kw.setdefault("tightening", "stationary")
    ctrl = SmpcController(horizon=horizon, variant=variant, K=DI_K, p_x=0.8, **kw)
    return ctrl.fit(model, di_disturbance(131) if dist is None else dist, X)


# -- terminal ingredients ------------------------------------------------------------

def test_terminal_weight_scalar():
    model = LtiModel([[0.5]], [[1.0]])
    gain = ClosedLoopGain.from_model(model, [[0.0]])
    assert terminal_weight(gain, [[1.0]], [[1.0]])[0, 0] == pytest.approx(4.0 / 3.0)


def test_terminal_weight_residual(di_gain):
    P = terminal_weight(di_gain, np.eye(2), np.eye(1))
    K, A_K = di_gain.K, di_gain.A_K
    res = A_K.T @ P @ A_K - P + np.eye(2) + K.T @ K
    assert np.linalg.norm(res) <= 1e-9
    # exact value of the double-integrator constant
    assert np.trace(P @ DI_SIGMA_W) == pytest.approx(50.0 / 7.0, abs=1e-9)


def test_terminal_weight_with_zero_gain_is_series():
    A = np.array([[0.5, 0.2], [0.0, 0.3]])
    gain = ClosedLoopGain.from_model(LtiModel(A, np.ones((2, 1))), np.zeros((1, 2)))
    Q = np.diag([1.0, 2.0])
    series = sum(P.T @ Q @ P for P in matrix_powers(A, 200))
    np.testing.assert_allclose(terminal_weight(gain, Q, np.eye(1)), series, atol=1e-12)


def test_cost_spec_requires_pd_R():
    with pytest.raises(ValueError):
        CostSpec(np.eye(2), np.zeros((1, 1)), np.eye(2))
    spec = CostSpec(np.eye(2), np.eye(1), np.eye(2))
    np.testing.assert_array_equal(spec.reference, np.zeros(2))


def test_verify_terminal_cases(di_model, di_gain, di_velocity_box):
    assert verify_terminal(np.zeros(2), di_model, di_gain, di_velocity_box)
    with pytest.raises(AssumptionViolated) as err:
        verify_terminal([0.0, 5.0], di_model, di_gain)
    assert err.value.condition == "invariance"
    tight = Polytope(di_velocity_box.A, np.array([-0.5, 3.0]))
    with pytest.raises(AssumptionViolated) as err:
        verify_terminal(np.zeros(2), di_model, di_gain, tight)
    assert err.value.condition == "state"


def test_verify_terminal_polytope(di_model, di_gain):
    big = Polytope.box([-1.0, -1.0], [1.0, 1.0])
    # the double-integrator closed loop rotates the unit box out of itself
    with pytest.raises(AssumptionViolated) as err:
        verify_terminal(big, di_model, di_gain)
    assert err.value.condition == "invariance"
    # a diagonal contraction keeps the box invariant
    model = LtiModel(np.diag([0.5, 0.2]), np.eye(2))
    gain = ClosedLoopGain.from_model(model, np.zeros((2, 2)))
    assert verify_terminal(big, model, gain, Polytope.box([-2, -2], [2, 2]),
                           Polytope.box([-1, -1], [1, 1]))
    with pytest.raises(AssumptionViolated) as err:
        verify_terminal(big, model, gain, Polytope.box([-0.5, -2], [0.5, 2]))
    assert err.value.condition == "state"
    gain = ClosedLoopGain.from_model(model, 0.1 * np.eye(2))
    with pytest.raises(AssumptionViolated) as err:
        verify_terminal(big, model, gain, None, Polytope.box([-0.05, -1], [0.05, 1]))
    assert err.value.condition == "input"


def test_building_terminal_point_passes():
    sc = simulate.building()
    ctrl = sc.controller("rec")
    assert np.allclose(ctrl.z_eq_, 21.75)
    nxt = sc.model.A @ ctrl.z_eq_ + sc.model.B @ ctrl.v_eq_ + sc.model.affine
    np.testing.assert_allclose(nxt, ctrl.z_eq_, atol=1e-9)


def test_unstable_gain_rejected(di_model):
    ctrl = SmpcController(horizon=5, K=[[0.0, 0.0]])
    with pytest.raises(NotStable):
        ctrl.fit(di_model, di_disturbance(40))


# -- moments and cost ------------------------------------------------------------------

def test_condensed_maps_against_rollout(di_model):
    rng = np.random.default_rng(0)
    mp = condensed_maps(di_model, 6, DI_K, np.array([0.3]))
    z0, c = rng.standard_normal(2), rng.standard_normal(6)
    z, Z, V = z0.copy(), [z0], []
    for i in range(6):
        v = DI_K @ z + c[i] + 0.3
        V.append(v)
        z = DI_A @ z + DI_B @ v
        Z.append(z)
    np.testing.assert_allclose(mp.Zz @ z0 + mp.Zc @ c + mp.Zk, np.concatenate(Z), atol=1e-12)
    np.testing.assert_allclose(mp.Vz @ z0 + mp.Vc @ c + mp.Vk, np.concatenate(V), atol=1e-12)


def test_moments_examples():
    ctrl = di_controller(horizon=5)
    z0 = np.array([1.0, -0.5])
    mom = ctrl.propagate_moments(z0, np.zeros(2))
    c = np.random.default_rng(1).standard_normal(5)
    mp = ctrl.maps_
    np.testing.assert_allclose(mom.mean_x(c).ravel(), mp.Zz @ z0 + mp.Zc @ c + mp.Zk, atol=1e-12)
    mean, cov = ctrl.window(0)
    mom = ctrl.propagate_moments(z0, np.array([0.3, 0.1]), mean, cov)
    np.testing.assert_array_equal(mom.cov_x[0], 0.0)
    np.testing.assert_allclose(mom.cov_u, np.einsum("ij,tjk,lk->til", DI_K, mom.cov_x[:5], DI_K))
    A_K = DI_A + DI_B @ DI_K
    np.testing.assert_allclose(mom.error_mean[3], np.linalg.matrix_power(A_K, 3) @ [0.3, 0.1])


def test_scalar_moment_two_step_variance():
    model = LtiModel([[1.0]], [[1.0]])
    ctrl = SmpcController(horizon=3, K=[[-0.5]], p_x=0.8, p_u=0.8)
    ctrl.fit(model, GaussianSequence.iid(np.eye(1), 10))
    mean, cov = ctrl.window(0)
    mom = ctrl.propagate_moments(np.zeros(1), np.zeros(1), mean, cov)
    assert mom.cov_x[2, 0, 0] == pytest.approx(1.25)


def test_expected_cost_zero_variance_is_deterministic():
    ctrl = di_controller(horizon=4)
    mom = ctrl.propagate_moments(np.array([2.0, 0.0]), np.zeros(2))
    H, g, c = expected_cost_terms(mom, ctrl.cost_)
    y = np.random.default_rng(2).standard_normal(4)
    X, U = mom.mean_x(y), mom.mean_u(y)
    det = sum(x @ x for x in X[:4]) + X[4] @ ctrl.cost_.P @ X[4] + sum(u @ u for u in U)
    assert 0.5 * y @ H @ y + g @ y + c == pytest.approx(det, rel=1e-10)


def test_expected_cost_monte_carlo():
    rng = np.random.default_rng(3)
    n, N = 2, 3
    cov_x = np.zeros((N + 1, n, n))
    for i in range(1, N + 1):
        L = rng.standard_normal((n, n))
        cov_x[i] = L @ L.T
    cov_u = np.zeros((N, 1, 1))
    cov_u[1:] = 0.5
    mom = PredictedMoments(Gx=np.zeros(((N + 1) * n, 1)), Gu=np.zeros((N, 1)),
                           x_offset=rng.standard_normal((N + 1, n)), u_offset=rng.standard_normal((N, 1)),
                           cov_x=cov_x, cov_u=cov_u)
    Q = np.diag([1.0, 2.0])
    cost = CostSpec(Q, np.eye(1), 3.0 * np.eye(2), reference=[0.5, -0.5])
    _, _, c = expected_cost_terms(mom, cost)
    count = 1_000_000
    total = np.zeros(count)
    for i in range(N + 1):
        x = mom.x_offset[i] + rng.standard_normal((count, n)) @ np.linalg.cholesky(cov_x[i] + 1e-300 * np.eye(n)).T \
            if i else np.tile(mom.x_offset[0], (count, 1))
        W = Q if i < N else cost.P
        d = x - cost.reference
        total += np.einsum("bi,ij,bj->b", d, W, d)
    for i in range(N):
        u = mom.u_offset[i] + np.sqrt(cov_u[i, 0, 0]) * rng.standard_normal((count, 1))
        total += u[:, 0] ** 2
    assert abs(total.mean() - c) <= 3 * total.std() / np.sqrt(count)


# -- stepping --------------------------------------------------------------------------

def deterministic_mpc_first_input(x0, N):
    """Plain condensed MPC over v without tightening, solved by the dual oracle."""
    n = 2
    P = terminal_weight(ClosedLoopGain.from_model(LtiModel(DI_A, DI_B), DI_K), np.eye(2), np.eye(1))
    pw = matrix_powers(DI_A, N)
    Phi = np.vstack(pw)
    Gam = np.zeros(((N + 1) * n, N))
    for i in range(1, N + 1):
        for j in range(i):
            Gam[i * n:(i + 1) * n, j] = (pw[i - 1 - j] @ DI_B)[:, 0]
    Wx = np.kron(np.eye(N + 1), np.eye(2))
    Wx[N * n:, N * n:] = P
    H = 2 * (Gam.T @ Wx @ Gam + np.eye(N))
    g = 2 * Gam.T @ Wx @ Phi @ x0
    rows, rhs = [Gam[N * n:]], [-Phi[N * n:] @ x0]
    for i in range(1, N):
        r = Gam[i * n + 1]
        rows += [r[None], -r[None]]
        rhs += [[3.0 - Phi[i * n + 1] @ x0], [3.0 + Phi[i * n + 1] @ x0]]
    y, _ = dual_projected_gradient(H, g, np.vstack(rows), np.concatenate(rhs), n_eq=2, tol=1e-10)
    return y[0]


def test_zero_noise_matches_deterministic_mpc():
    dist = GaussianSequence.iid(np.zeros((2, 2)), 60)
    ctrl = di_controller(horizon=10, dist=dist, tightening="per_step")
    x0 = np.array([5.0, 0.0])
    res, _ = ctrl.step(ctrl.initial_state(x0), x0)
    assert res.status == OPTIMAL
    assert res.u[0] == pytest.approx(deterministic_mpc_first_input(x0, 10), abs=1e-5)


def test_first_solve_respects_tightening():
    ctrl = di_controller()
    x0 = np.array([10.0, 0.0])
    res, new = ctrl.step(ctrl.initial_state(x0), x0)
    assert res.status == OPTIMAL
    assert np.all(np.abs(res.z_pred[1:, 1]) <= TIGHT_VELOCITY + 1e-6)
    np.testing.assert_allclose(res.z_pred[-1], 0.0, atol=1e-7)
    np.testing.assert_allclose(res.u, DI_K @ (x0 - res.z_pred[0]) + res.v0)
    np.testing.assert_allclose(new.z, res.z_pred[1])
    assert ctrl.bx_[0] == pytest.approx([TIGHT_VELOCITY] * 2, abs=1e-7)


def test_shift_candidate_is_feasible_for_next_step():
    ctrl = di_controller()
    rng = np.random.default_rng(4)
    x = np.array([10.0, 0.0])
    state = ctrl.initial_state(x)
    for _ in range(5):
        res, state = ctrl.step(state, x)
        V, Z = shift_candidate(res.v_pred, res.z_pred, ctrl)
        np.testing.assert_allclose(Z[0], state.z)
        assert np.all(Z[1:-1] @ ctrl.state_constraints_.A.T <= ctrl.bx_[0] + 1e-7)
        np.testing.assert_allclose(Z[-1], 0.0, atol=1e-7)
        for i in range(ctrl.horizon):
            np.testing.assert_allclose(Z[i + 1], DI_A @ Z[i] + DI_B @ V[i], atol=1e-9)
        x = DI_A @ x + DI_B @ res.u + rng.multivariate_normal(np.zeros(2), DI_SIGMA_W)


def test_warm_start_reduces_iterations():
    ctrl = di_controller()
    rng = np.random.default_rng(5)
    W = rng.multivariate_normal(np.zeros(2), DI_SIGMA_W, size=100)
    counts = {}
    for warm in (True, False):
        x = np.array([10.0, 0.0])
        state = ctrl.initial_state(x)
        its = []
        for k in range(100):
            if not warm:
                state = ControllerState(z=state.z, k=state.k)
            res, state = ctrl.step(state, x)
            its.append(res.iterations)
            x = DI_A @ x + DI_B @ res.u + W[k]
        counts[warm] = np.mean(its)
    assert counts[True] < counts[False]


def test_recsc_slack_covers_violated_mean():
    ctrl = di_controller("recSC")
    state = ControllerState(z=np.zeros(2), k=5)
    res, _ = ctrl.step(state, np.array([0.0, 8.0]))
    assert res.status == OPTIMAL
    assert res.slack.max() > 0.2
    rows = ctrl.state_constraints_.A
    b = ctrl.bx_[0]
    s = res.slack.reshape(ctrl.horizon, -1)
    assert np.all(res.mu_x[1:] @ rows.T - s <= b + 1e-6)
    # hard constraints on the nominal trajectory still hold
    assert np.all(np.abs(res.z_pred[1:, 1]) <= TIGHT_VELOCITY + 1e-6)


def test_strict_step_raises_when_infeasible(di_model):
    X = Polytope(np.array([[0.0, 1.0], [0.0, -1.0]]), np.array([3.0, 3.0]))
    U = Polytope.box([-1.5], [1.5])
    ctrl = SmpcController(horizon=5, K=DI_K, tightening="stationary").fit(
        di_model, di_disturbance(40), X, U)
    state = ctrl.initial_state(np.array([100.0, 0.0]))
    with pytest.raises(Infeasible):
        step(ctrl, state, np.array([100.0, 0.0]), strict=True)
    res, _ = step(ctrl, state, np.array([100.0, 0.0]))
    assert res.fallback


def test_df_resets_to_measurement_when_feasible():
    ctrl = di_controller("df")
    x = np.array([10.0, 0.0])
    state = ctrl.initial_state(x)
    res, state = ctrl.step(state, x)
    x2 = np.array([9.0, -0.5])
    res, _ = ctrl.step(state, x2)
    assert res.reset
    np.testing.assert_allclose(res.z_pred[0], x2)
    np.testing.assert_allclose(res.u, res.v0)
    # a measurement outside the tightened set keeps the carried nominal state
    res, _ = ctrl.step(state, np.array([9.0, -2.5]))
    assert not res.reset


def test_correlated_window_requires_history(di_model):
    dist = random_correlated_sequence(np.random.default_rng(6), 2, 30, scale=0.05)
    ctrl = SmpcController(horizon=5, K=DI_K).fit(di_model, dist)
    state = ControllerState(z=np.zeros(2), k=2)
    with pytest.raises(ValueError):
        ctrl.step(state, np.zeros(2))
    res, _ = ctrl.step(state, np.zeros(2), observed=np.zeros(4))
    assert res.status == OPTIMAL


def test_window_padding_beyond_model_end():
    ctrl = di_controller(horizon=5, dist=di_disturbance(8))
    mean, cov = ctrl.window(6)
    assert mean.size == 12 and cov.shape == (12, 12)
    np.testing.assert_allclose(cov[10:, 10:], DI_SIGMA_W)


def test_sklearn_parameters_round_trip():
    ctrl = SmpcController(horizon=7, variant="df", p_x=0.9)
    clone_ = clone(ctrl)
    assert clone_.get_params()["horizon"] == 7 and clone_.variant == "df"
    with pytest.raises(ValueError):
        SmpcController(variant="bogus").fit(LtiModel(DI_A, DI_B), di_disturbance(40))


# -- structural properties ---------------------------------------------------------------

def test_rec_error_dynamics_are_linear():
    sc = simulate.double_integrator()
    rec = simulate.run_trial(sc, "rec", 3)
    A_K = DI_A + DI_B @ DI_K
    e = rec.x - rec.z
    w = rec.x[1:] - rec.x[:-1] @ DI_A.T - rec.u[:-1] @ DI_B.T
    np.testing.assert_allclose(e[1:], e[:-1] @ A_K.T + w, atol=1e-9)


def test_nom_nominal_trajectory_ignores_noise():
    sc = simulate.double_integrator()
    a = simulate.run_trial(sc, "nom", 1)
    b = simulate.run_trial(sc, "nom", 2)
    assert not np.allclose(a.x, b.x)
    np.testing.assert_allclose(a.z, b.z, atol=1e-9)


@pytest.mark.parametrize("case", ["iid", "correlated"])
def test_predicted_error_covariance_matches_closed_loop(case):
    rng = np.random.default_rng(7)
    A_K = DI_A + DI_B @ DI_K
    dist = di_disturbance(12) if case == "iid" else random_correlated_sequence(rng, 2, 12, 0.3)
    for k, i in [(0, 3), (2, 1), (3, 4), (5, 5)]:
        pred, closed = error_covariance_pair(A_K, dist, k, i)
        np.testing.assert_allclose(pred, closed, atol=1e-10)
