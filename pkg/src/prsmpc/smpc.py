"""Stochastic MPC with PRS-tightened constraints on a nominal trajectory.

The predicted policy is ``u_i = K e_i + v_i`` with nominal dynamics
``z_{i+1} = A z_i + B v_i + affine`` and error ``e_{i+1} = A_K e_i + w_i``.
Constraints act on ``(z_i, v_i)`` only, tightened by the PRS of the
*closed-loop* error, while the expected cost uses the error mean and
covariance given the measurement.  The nominal state is carried forward by
its own prediction, ``z_0(k) = z_1(k-1)``, which keeps the closed-loop error
dynamics linear.

The QP is condensed (states eliminated).  Nominal inputs are parametrized
around the terminal controller, ``v_i = v_eq + K (z_i - z_eq) + c_i``, and
the QP is solved over ``c``; this is a one-to-one change of variables that
keeps the condensed Hessian well conditioned for long horizons on
marginally stable plants.

All per-step work is vectorized over a leading batch axis so that many
Monte Carlo trials advance in one call to the QP solver.
"""

from dataclasses import dataclass, field

import numpy as np
import scipy.optimize
from sklearn.base import BaseEstimator

from . import gaussians, prs
from ._validation import as_psd, as_vector
from .exceptions import (AssumptionViolated, DimensionMismatch, Infeasible,
                         WindowExceedsHorizon)
from .lti import ClosedLoopGain, dlyap, lqr_gain, prediction_stack, sequence_moments
from .qp import OPTIMAL, AdmmSettings, AdmmSolver

VARIANTS = ("nom", "rec", "df", "recSC")


def terminal_weight(gain, Q, R):
    """Terminal weight ``P`` with ``A_K^T P A_K - P = -(Q + K^T R K)``."""
    K = gain.K
    Q = as_psd(Q, "Q", gain.n_x)
    R = as_psd(R, "R", K.shape[0])
    return dlyap(gain.A_K.T, Q + K.T @ R @ K)


@dataclass(frozen=True)
class CostSpec:
    """Stage cost ``|x - r|_Q^2 + |u|_R^2 + l1 |u|_1``, terminal ``|x - r|_P^2``.

    ``slack_weight`` prices soft-constraint slacks (0 disables them).
    """

    Q: np.ndarray
    R: np.ndarray
    P: np.ndarray
    reference: np.ndarray = None
    input_l1_weight: float = 0.0
    slack_weight: float = 0.0

    def __post_init__(self):
        Q = as_psd(self.Q, "Q")
        R = as_psd(self.R, "R")
        if np.linalg.eigvalsh(R).min() <= 0.0:
            raise ValueError("R must be positive definite")
        P = as_psd(self.P, "P", Q.shape[0], tol=1e-8)
        r = np.zeros(Q.shape[0]) if self.reference is None else as_vector(self.reference, "reference", Q.shape[0])
        if self.input_l1_weight < 0 or self.slack_weight < 0:
            raise ValueError("weights must be nonnegative")
        object.__setattr__(self, "Q", Q)
        object.__setattr__(self, "R", R)
        object.__setattr__(self, "P", P)
        object.__setattr__(self, "reference", r)


@dataclass
class ControllerState:
    """Nominal state ``z(k)`` and time index ``k``, plus solver warm starts.

    ``z`` carries a leading batch axis when the controller runs several
    trials at once.
    """

    z: np.ndarray
    k: int = 0
    solution: np.ndarray = None
    dual: np.ndarray = None


@dataclass
class StepResult:
    """Outcome of one controller step (batched arrays from ``step_batch``).

    ``u = K (x - z_0) + v_0``; ``z_pred`` and ``v_pred`` are the optimal
    nominal trajectory and inputs, ``mu_x`` the predicted state means and
    ``cost`` the optimal expected cost including variance terms and
    ``iterations`` the solver iteration count.
    """

    u: np.ndarray
    v0: np.ndarray
    z_pred: np.ndarray
    v_pred: np.ndarray
    mu_x: np.ndarray
    status: np.ndarray
    slack: np.ndarray
    cost: np.ndarray
    reset: np.ndarray = None
    fallback: np.ndarray = None
    iterations: np.ndarray = None


@dataclass(frozen=True)
class CondensedMaps:
    """Affine maps from ``(z0, c)`` to stacked nominal states and inputs.

    ``Z = Zz z0 + Zc c + Zk`` with ``Z = [z_0; ...; z_N]`` and
    ``V = Vz z0 + Vc c + Vk`` with ``V = [v_0; ...; v_{N-1}]``.
    """

    Zz: np.ndarray
    Zc: np.ndarray
    Zk: np.ndarray
    Vz: np.ndarray
    Vc: np.ndarray
    Vk: np.ndarray


def condensed_maps(model, N, K=None, v_offset=None):
    """Condense ``z+ = A z + B v + affine`` with ``v_i = K z_i + c_i + v_offset``.

    ``K = None`` gives the plain parametrization ``v_i = c_i``.
    """
    n, m = model.n_x, model.n_u
    K = np.zeros((m, n)) if K is None else np.asarray(K, dtype=float)
    v_off = np.zeros(m) if v_offset is None else as_vector(v_offset, "v_offset", m)
    Zz = np.zeros(((N + 1) * n, n))
    Zc = np.zeros(((N + 1) * n, N * m))
    Zk = np.zeros((N + 1) * n)
    Vz = np.zeros((N * m, n))
    Vc = np.zeros((N * m, N * m))
    Vk = np.zeros(N * m)
    Zz[:n] = np.eye(n)
    for i in range(N):
        zi, vi, zn = slice(i * n, (i + 1) * n), slice(i * m, (i + 1) * m), slice((i + 1) * n, (i + 2) * n)
        Vz[vi] = K @ Zz[zi]
        Vc[vi] = K @ Zc[zi]
        Vc[vi, vi] += np.eye(m)
        Vk[vi] = K @ Zk[zi] + v_off
        Zz[zn] = model.A @ Zz[zi] + model.B @ Vz[vi]
        Zc[zn] = model.A @ Zc[zi] + model.B @ Vc[vi]
        Zk[zn] = model.A @ Zk[zi] + model.B @ Vk[vi] + model.affine
    return CondensedMaps(Zz, Zc, Zk, Vz, Vc, Vk)


@dataclass
class PredictedMoments:
    """Moments of the predicted state and input, affine in the decision vector.

    ``mu_x = x_offset + Gx y`` reshaped to ``(N+1, n_x)`` and
    ``mu_u = u_offset + Gu y`` reshaped to ``(N, n_u)``.  Offsets may carry
    a leading batch axis; covariances never do.
    """

    Gx: np.ndarray
    Gu: np.ndarray
    x_offset: np.ndarray
    u_offset: np.ndarray
    cov_x: np.ndarray
    cov_u: np.ndarray
    error_mean: np.ndarray = field(repr=False, default=None)

    @property
    def horizon(self):
        return self.cov_u.shape[0]

    def mean_x(self, y):
        y = np.asarray(y, dtype=float)
        N1, n = self.cov_x.shape[:2]
        return self.x_offset + (y @ self.Gx.T).reshape(y.shape[:-1] + (N1, n))

    def mean_u(self, y):
        y = np.asarray(y, dtype=float)
        N, m = self.cov_u.shape[:2]
        return self.u_offset + (y @ self.Gu.T).reshape(y.shape[:-1] + (N, m))


def _stage_weights(cost, N, n):
    Qb = np.kron(np.eye(N + 1), cost.Q)
    Qb[N * n:, N * n:] = cost.P
    return Qb, np.kron(np.eye(N), cost.R)


def _traces(moments, cost):
    N = moments.horizon
    t = sum(np.trace(cost.Q @ S) for S in moments.cov_x[:N]) + np.trace(cost.P @ moments.cov_x[N])
    return t + sum(np.trace(cost.R @ S) for S in moments.cov_u)


def expected_cost_terms(moments, cost):
    """Quadratic form ``(H, g, c)`` with ``E[cost] = 1/2 y^T H y + g^T y + c``.

    Uses ``E|x - r|_Q^2 = |mu - r|_Q^2 + tr(Q Sigma)``; the trace terms do
    not depend on ``y`` and are returned inside ``c``.  The l1 input term is
    not quadratic and is left to the caller.
    """
    N, n = moments.horizon, moments.cov_x.shape[1]
    Qb, Rb = _stage_weights(cost, N, n)
    Gx, Gu = moments.Gx, moments.Gu
    dx = (moments.x_offset - cost.reference).reshape(moments.x_offset.shape[:-2] + (-1,))
    du = moments.u_offset.reshape(moments.u_offset.shape[:-2] + (-1,))
    H = 2.0 * (Gx.T @ Qb @ Gx + Gu.T @ Rb @ Gu)
    g = 2.0 * (dx @ Qb @ Gx + du @ Rb @ Gu)
    c = np.einsum("...i,ij,...j->...", dx, Qb, dx) + np.einsum("...i,ij,...j->...", du, Rb, du)
    return 0.5 * (H + H.T), g, c + _traces(moments, cost)


def verify_terminal(terminal, model, gain, state_set=None, input_set=None, v_eq=None, tol=1e-8):
    """Check the terminal-set conditions for ``v = v_eq + K (z - z_eq)``.

    Parameters
    ----------
    terminal : vector or Polytope
        A single point ``z_f`` (then ``z_eq = z_f``) or a polytope given in
        coordinates where ``z_eq = 0``.
    state_set, input_set : Polytope, optional
        Constraint sets already tightened by ``R_f`` and ``K R_f``.
    v_eq : vector, optional
        Equilibrium input; zero when omitted.

    Returns ``True`` or raises :class:`AssumptionViolated` naming the
    condition that fails.
    """
    n, m = model.n_x, model.n_u
    v_eq = np.zeros(m) if v_eq is None else as_vector(v_eq, "v_eq", m)
    if isinstance(terminal, prs.Polytope):
        F, f = terminal.A, terminal.b
        # one-step invariance: max F_j A_K z over Z_f <= f_j
        for j in range(F.shape[0]):
            if _lp_max(F[j] @ gain.A_K, F, f) > f[j] + tol:
                raise AssumptionViolated("invariance", f"row {j} of A_K Z_f leaves Z_f")
        if state_set is not None:
            for j in range(state_set.n_rows):
                if _lp_max(state_set.A[j], F, f) > state_set.b[j] + tol:
                    raise AssumptionViolated("state", f"Z_f leaves the tightened state set (row {j})")
        if input_set is not None:
            for j in range(input_set.n_rows):
                if _lp_max(input_set.A[j] @ gain.K, F, f) + input_set.A[j] @ v_eq > input_set.b[j] + tol:
                    raise AssumptionViolated("input", f"K Z_f leaves the tightened input set (row {j})")
        return True
    z_f = as_vector(terminal, "terminal", n)
    nxt = model.A @ z_f + model.B @ v_eq + model.affine
    if np.abs(nxt - z_f).max() > tol * max(1.0, np.abs(z_f).max()):
        raise AssumptionViolated("invariance", "terminal point is not an equilibrium of the nominal dynamics")
    if state_set is not None and not state_set.contains(z_f, tol):
        raise AssumptionViolated("state", "terminal point outside the tightened state set")
    if input_set is not None and not input_set.contains(v_eq, tol):
        raise AssumptionViolated("input", "terminal input outside the tightened input set")
    return True


def _lp_max(c, F, f):
    res = scipy.optimize.linprog(-c, A_ub=F, b_ub=f, bounds=[(None, None)] * F.shape[1], method="highs")
    if res.status == 3:
        return np.inf
    if res.status == 2:
        return -np.inf
    return -res.fun


def equilibrium_input(model, z_f):
    """Input holding the nominal dynamics at ``z_f`` (least squares)."""
    rhs = z_f - model.A @ z_f - model.affine
    v, *_ = np.linalg.lstsq(model.B, rhs, rcond=None)
    return v


def shift_candidate(V, Z, controller):
    """Shifted solution ``{v_1, ..., v_{N-1}, v_eq + K (z_N - z_eq)}``.

    ``V`` is ``(..., N, n_u)`` and ``Z`` is ``(..., N+1, n_x)``; returns the
    candidate inputs and the matching nominal trajectory.
    """
    V = np.asarray(V, dtype=float)
    Z = np.asarray(Z, dtype=float)
    c = controller
    v_last = c.v_eq_ + (Z[..., -1, :] - c.z_eq_) @ c.gain_.K.T
    V_new = np.concatenate([V[..., 1:, :], v_last[..., None, :]], axis=-2)
    z_last = Z[..., -1, :] @ c.model_.A.T + v_last @ c.model_.B.T + c.model_.affine
    Z_new = np.concatenate([Z[..., 1:, :], z_last[..., None, :]], axis=-2)
    return V_new, Z_new


class SmpcController(BaseEstimator):
    """Stochastic MPC controller.

    Parameters
    ----------
    horizon : int
        Prediction horizon ``N``.
    variant : {"rec", "nom", "df", "recSC"}
        ``rec`` carries the nominal state by its prediction; ``nom`` also
        ignores the measured error in the cost; ``df`` resets the nominal
        state to the measurement whenever that is feasible; ``recSC`` adds
        soft constraints on the predicted state mean.
    Q, R : array_like
        Stage weights; ``P`` defaults to :func:`terminal_weight`.
    K : array_like, optional
        Tube gain.  When omitted an LQR gain for ``(Q_lqr, R_lqr)`` (default
        ``(Q, R)``) is used.
    p_x, p_u : float
        Chance-constraint levels.
    level_rule : {"gaussian", "chebyshev"}
    tightening : {"per_step", "stationary"}
        ``stationary`` uses one set built from the stationary error
        covariance (i.i.d. disturbances only).
    reference, input_l1_weight, slack_weight
        See :class:`CostSpec`; ``slack_weight=None`` means ``1e3 * max(Q)``
        for ``recSC`` and 0 otherwise.
    solver_settings : AdmmSettings, optional
    """

    def __init__(self, horizon=30, variant="rec", Q=None, R=None, P=None, K=None,
                 Q_lqr=None, R_lqr=None, p_x=0.8, p_u=0.8, level_rule="gaussian",
                 tightening="per_step", reference=None, input_l1_weight=0.0,
                 slack_weight=None, solver_settings=None):
        self.horizon = horizon
        self.variant = variant
        self.Q = Q
        self.R = R
        self.P = P
        self.K = K
        self.Q_lqr = Q_lqr
        self.R_lqr = R_lqr
        self.p_x = p_x
        self.p_u = p_u
        self.level_rule = level_rule
        self.tightening = tightening
        self.reference = reference
        self.input_l1_weight = input_l1_weight
        self.slack_weight = slack_weight
        self.solver_settings = solver_settings

    # ------------------------------------------------------------------ fit

    def fit(self, model, disturbance, state_constraints=None, input_constraints=None,
            terminal=None, n_steps=None):
        """Build gain, terminal ingredients, tightening schedule and QP data.

        Parameters
        ----------
        model : LtiModel
        disturbance : GaussianSequence
            Disturbance model; it should cover the run length plus ``N + 1``
            blocks so the prediction window never shrinks.
        state_constraints, input_constraints : Polytope, optional
        terminal : vector, optional
            Terminal point ``z_f``; defaults to the origin.
        n_steps : int, optional
            Number of steps the per-step schedule must cover.
        """
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}")
        N = int(self.horizon)
        if N < 1:
            raise ValueError("horizon must be >= 1")
        n, m = model.n_x, model.n_u
        if disturbance.n_x != n:
            raise DimensionMismatch(f"disturbance block size {disturbance.n_x} != n_x={n}")
        Q = np.eye(n) if self.Q is None else np.asarray(self.Q, dtype=float)
        R = np.eye(m) if self.R is None else np.asarray(self.R, dtype=float)
        if self.K is None:
            Kmat = lqr_gain(model, Q if self.Q_lqr is None else self.Q_lqr, R if self.R_lqr is None else self.R_lqr)
        else:
            Kmat = self.K
        gain = ClosedLoopGain.from_model(model, Kmat)
        P = terminal_weight(gain, Q, R) if self.P is None else self.P
        slack = self.slack_weight
        if slack is None:
            slack = 1e3 * float(np.max(Q)) if self.variant == "recSC" else 0.0
        cost = CostSpec(Q, R, P, self.reference, float(self.input_l1_weight), float(slack))

        self.model_ = model
        self.gain_ = gain
        self.cost_ = cost
        self.disturbance_ = disturbance
        self.state_constraints_ = state_constraints
        self.input_constraints_ = input_constraints
        self.iid_ = disturbance.is_block_diagonal()

        if self.tightening == "stationary":
            mu0, S0 = disturbance.block(0)
            if np.any(mu0) or not self.iid_:
                raise ValueError("stationary tightening needs zero-mean i.i.d. disturbances")
            sdof = state_constraints.normal_rank() if state_constraints is not None else n
            udof = input_constraints.normal_rank() if input_constraints is not None else m
            schedule = prs.constant_schedule(gain, S0, self.p_x, self.p_u, self.level_rule, sdof, udof)
        elif self.tightening == "per_step":
            steps = disturbance.n_blocks if n_steps is None else min(int(n_steps), disturbance.n_blocks)
            schedule = prs.prs_schedule(model, gain, disturbance, self.p_x, self.p_u, self.level_rule, steps,
                                        state_constraints, input_constraints)
        else:
            raise ValueError(f"unknown tightening {self.tightening!r}")
        self.schedule_ = schedule

        z_f = np.zeros(n) if terminal is None else as_vector(terminal, "terminal", n)
        v_eq = equilibrium_input(model, z_f)
        self.z_eq_, self.v_eq_ = z_f, v_eq
        # a point terminal set only needs the row-wise union bound; the
        # scaled-shape R_f is a (looser) outer set of the same union
        xs_f = us_f = None
        if state_constraints is not None:
            xs_f = prs.Polytope(state_constraints.A, state_constraints.b
                                - prs.union_margins(state_constraints, schedule.state_sets))
        if input_constraints is not None:
            us_f = prs.Polytope(input_constraints.A, input_constraints.b
                                - prs.union_margins(input_constraints, schedule.input_sets))
        verify_terminal(z_f, model, gain, xs_f, us_f, v_eq)

        self._build_qp(N)
        return self

    @property
    def N_(self):
        return self.maps_.Vc.shape[0] // self.model_.n_u

    def _tightened_bounds(self, constraints, sets, count):
        if constraints is None:
            return np.zeros((count, 0))
        return np.array([constraints.b - prs.tightening_margins(constraints, sets(k)) for k in range(count)])

    def _build_qp(self, N):
        model, cost = self.model_, self.cost_
        n, m = model.n_x, model.n_u
        K = self.gain_.K
        self.maps_ = mp = condensed_maps(model, N, K, self.v_eq_ - K @ self.z_eq_)
        stack = prediction_stack(self.gain_.A_K, N)
        self.A0_, self.Abar_ = stack.A0, stack.Abar

        Xc, Uc = self.state_constraints_, self.input_constraints_
        Ax = np.zeros((0, n)) if Xc is None else Xc.A
        Au = np.zeros((0, m)) if Uc is None else Uc.A
        rx, ru = Ax.shape[0], Au.shape[0]
        count = max(len(self.schedule_), 1) + N + 1
        self.bx_ = self._tightened_bounds(Xc, self.schedule_.state, count)
        self.bu_ = self._tightened_bounds(Uc, self.schedule_.input, count)

        nc = N * m
        use_l1 = cost.input_l1_weight > 0
        use_soft = cost.slack_weight > 0 and rx > 0
        nt = nc if use_l1 else 0
        ns = N * rx if use_soft else 0
        ny = nc + nt + ns
        self._nc, self._nt, self._ns = nc, nt, ns
        self._rx, self._ru = rx, ru
        self._Ax, self._Au = Ax, Au
        self._use_l1, self._use_soft = use_l1, use_soft

        Qb, Rb = _stage_weights(cost, N, n)
        self._Qb, self._Rb = Qb, Rb
        H = np.zeros((ny, ny))
        Hc = 2.0 * (mp.Zc.T @ Qb @ mp.Zc + mp.Vc.T @ Rb @ mp.Vc)
        H[:nc, :nc] = 0.5 * (Hc + Hc.T)
        self._gx = 2.0 * Qb @ mp.Zc
        self._gu = 2.0 * Rb @ mp.Vc
        self._g_lin = np.concatenate([np.zeros(nc), np.full(nt, cost.input_l1_weight),
                                      np.full(ns, cost.slack_weight)])

        blocks, groups = [], []
        row = 0

        def add(block, per_step, steps):
            nonlocal row
            blocks.append(block)
            groups.append((row, per_step, steps))
            row += block.shape[0]

        def zrow(i):
            return mp.Zc[i * n:(i + 1) * n]

        def vrow(i):
            return mp.Vc[i * m:(i + 1) * m]

        # hard state rows i = 1..N-1 (row 0 is fixed by z_0)
        G = np.zeros(((N - 1) * rx, ny))
        for i in range(1, N):
            G[(i - 1) * rx:i * rx, :nc] = Ax @ zrow(i)
        add(G, rx, N - 1)
        # input rows i = 0..N-1
        G = np.zeros((N * ru, ny))
        for i in range(N):
            G[i * ru:(i + 1) * ru, :nc] = Au @ vrow(i)
        add(G, ru, N)
        # -T <= mu_u <= T
        if use_l1:
            I = np.eye(nt)
            add(np.hstack([mp.Vc, -I, np.zeros((nt, ns))]), m, N)
            add(np.hstack([-mp.Vc, -I, np.zeros((nt, ns))]), m, N)
        # soft rows on the predicted mean, i = 1..N, and slack >= 0
        if use_soft:
            G = np.zeros((ns, ny))
            for i in range(1, N + 1):
                r = slice((i - 1) * rx, i * rx)
                G[r, :nc] = Ax @ zrow(i)
                G[r, nc + nt + (i - 1) * rx:nc + nt + i * rx] = -np.eye(rx)
            add(G, rx, N)
            add(np.hstack([np.zeros((ns, nc + nt)), np.eye(ns)]), rx, N)
        # terminal equality z_N = z_f
        G = np.zeros((n, ny))
        G[:, :nc] = zrow(N)
        add(G, n, 1)

        Acon = np.vstack(blocks)
        is_eq = np.zeros(Acon.shape[0], dtype=bool)
        is_eq[-n:] = True
        self._groups = groups
        self._H, self._Acon, self._is_eq = H, Acon, is_eq
        self.solver_ = AdmmSolver(H, Acon, is_eq, self.solver_settings or AdmmSettings())
        self._dual_shift = self._shift_index()
        self._window_cache = {}

    def _shift_index(self):
        idx = []
        for start, per_step, steps in self._groups:
            for t in range(steps):
                src = min(t + 1, steps - 1)
                idx.extend(range(start + src * per_step, start + (src + 1) * per_step))
        return np.array(idx, dtype=int)

    # ---------------------------------------------------------- predictions

    def window(self, k, observed=None):
        """Conditional disturbance window ``w(k) .. w(k+N)`` given ``w(0..k-1)``.

        Returns ``(mean, cov)``; ``mean`` is ``(batch, (N+1) n_x)`` when
        ``observed`` is batched.  Blocks beyond the end of the disturbance
        model are treated as zero mean with the covariance of the last
        available block.
        """
        dist, N, n = self.disturbance_, self.N_, self.model_.n_x
        win = min(N, dist.n_blocks - k - 1)
        if win < 0:
            raise WindowExceedsHorizon(f"no disturbance blocks left at k={k}")
        batched = observed is not None and np.ndim(observed) == 2
        if self.iid_ or k == 0:
            sl = slice(k * n, (k + win + 1) * n)
            mean = dist.mean[sl]
            if batched:
                mean = np.broadcast_to(mean, (len(observed), mean.size))
            cov = dist.cov[sl, sl]
        else:
            if observed is None:
                raise ValueError("correlated disturbances need the observed history")
            observed = np.asarray(observed, dtype=float)[..., :k * n]
            key = (k, win)
            if key not in self._window_cache:
                a = slice(0, k * n)
                b = slice(k * n, (k + win + 1) * n)
                G = gaussians._conditioning_gain(dist.cov[a, a], dist.cov[b, a])
                cov = dist.cov[b, b] - G @ dist.cov[a, b]
                self._window_cache[key] = (G, 0.5 * (cov + cov.T))
            G, cov = self._window_cache[key]
            mean = dist.mean[k * n:(k + win + 1) * n] + (observed - dist.mean[:k * n]) @ G.T
        if win < N:
            _, last = dist.block(dist.n_blocks - 1)
            mean = np.concatenate([mean, np.zeros(mean.shape[:-1] + ((N - win) * n,))], axis=-1)
            big = np.zeros(((N + 1) * n,) * 2)
            big[:cov.shape[0], :cov.shape[0]] = cov
            for j in range(win + 1, N + 1):
                big[j * n:(j + 1) * n, j * n:(j + 1) * n] = last
            cov = big
        return mean, cov

    def propagate_moments(self, z0, e0, window_mean=None, window_cov=None, nominal=False):
        """Predicted state/input moments over the horizon, affine in ``c``.

        ``mu^x_i = z_i + E[e_i]`` and ``mu^u_i = v_i + K E[e_i]`` with
        ``E[e_i] = A_K^i e0 + sum_j A_K^(i-1-j) E[w_j]``; the covariances are
        ``Sigma^x_i = Cov(e_i)`` and ``Sigma^u_i = K Sigma^x_i K^T``.  With
        ``nominal=True`` the error is ignored altogether.
        """
        N, n = self.N_, self.model_.n_x
        mp = self.maps_
        z0 = np.asarray(z0, dtype=float)
        e0 = np.asarray(e0, dtype=float)
        batch = np.broadcast_shapes(z0.shape[:-1], e0.shape[:-1])
        K = self.gain_.K
        cov_x = np.zeros((N + 1, n, n))
        if nominal:
            err = np.zeros(batch + (N + 1, n))
        else:
            mu_w = np.zeros(N * n) if window_mean is None else np.asarray(window_mean)[..., :N * n]
            rest = e0 @ self.A0_.T + mu_w @ self.Abar_.T
            err = np.concatenate([np.broadcast_to(e0, batch + (n,))[..., None, :],
                                  np.broadcast_to(rest, batch + (N * n,)).reshape(batch + (N, n))], axis=-2)
            if window_cov is not None:
                S = self.Abar_ @ window_cov[:N * n, :N * n] @ self.Abar_.T
                S = 0.5 * (S + S.T)
                cov_x[1:] = np.array([S[i * n:(i + 1) * n, i * n:(i + 1) * n] for i in range(N)])
        zs = (z0 @ mp.Zz.T + mp.Zk).reshape(batch + (N + 1, n))
        vs = (z0 @ mp.Vz.T + mp.Vk).reshape(batch + (N, -1))
        cov_u = np.einsum("ij,tjk,lk->til", K, cov_x[:N], K)
        return PredictedMoments(Gx=mp.Zc, Gu=mp.Vc, x_offset=zs + err, u_offset=vs + err[..., :N, :] @ K.T,
                                cov_x=cov_x, cov_u=cov_u, error_mean=err)

    # ------------------------------------------------------------ stepping

    def initial_state(self, x0):
        """``z(0) = x(0)``; keeps the batch shape of ``x0``."""
        return ControllerState(z=np.array(x0, dtype=float), k=0)

    def _qp_data(self, k, moments):
        """Per-instance ``(g, l, u, const)`` of the condensed QP at time ``k``."""
        N, n = self.N_, self.model_.n_x
        cost = self.cost_
        x_off = moments.x_offset
        b = x_off.shape[0]
        dx = (x_off - cost.reference).reshape(b, -1)
        du = moments.u_offset.reshape(b, -1)
        g = np.zeros((b, self._H.shape[0]))
        g[:, :self._nc] = dx @ self._gx + du @ self._gu
        g += self._g_lin
        const = np.einsum("bi,ij,bj->b", dx, self._Qb, dx) + np.einsum("bi,ij,bj->b", du, self._Rb, du)
        const += _traces(moments, cost)

        zs = x_off - moments.error_mean          # nominal states at c = 0
        vs = moments.u_offset - moments.error_mean[:, :N] @ self.gain_.K.T
        steps = np.arange(k, k + N + 1)
        bx = self.bx_[np.minimum(steps, len(self.bx_) - 1)]
        bu = self.bu_[np.minimum(steps, len(self.bu_) - 1)]
        ls, us = [], []

        def one_sided(upper):
            us.append(upper)
            ls.append(np.full_like(upper, -np.inf))

        one_sided((bx[1:N] - zs[:, 1:N] @ self._Ax.T).reshape(b, -1))
        one_sided((bu[:N] - vs @ self._Au.T).reshape(b, -1))
        if self._use_l1:
            one_sided(-du)
            one_sided(du)
        if self._use_soft:
            one_sided((bx[1:N + 1] - x_off[:, 1:N + 1] @ self._Ax.T).reshape(b, -1))
            us.append(np.full((b, self._ns), np.inf))
            ls.append(np.zeros((b, self._ns)))
        term = self.z_eq_ - zs[:, N]
        us.append(term)
        ls.append(term)
        return g, np.concatenate(ls, axis=1), np.concatenate(us, axis=1), const

    def _state_row_ok(self, k, z0):
        if not self._rx:
            return np.ones(z0.shape[0], dtype=bool)
        bx = self.bx_[min(k, len(self.bx_) - 1)]
        return np.all(z0 @ self._Ax.T <= bx + 1e-9, axis=1)

    def _shifted(self, y, dual):
        """Shift a previous solution by one step (the recursive-feasibility candidate)."""
        b = y.shape[0]
        N, m = self.N_, self.model_.n_u
        nc, nt = self._nc, self._nt
        out = np.zeros_like(y)
        # in the c-parametrization the appended terminal input is c = 0
        out[:, :nc - m] = y[:, m:nc]
        if nt:
            out[:, nc:nc + nt - m] = y[:, nc + m:nc + nt]
            out[:, nc + nt - m:nc + nt] = np.abs(self.v_eq_)
        if self._ns:
            r = self._rx
            out[:, nc + nt:-r] = y[:, nc + nt + r:]
        return out, (None if dual is None else dual[:, self._dual_shift])

    def _default_start(self, b):
        y = np.zeros((b, self._H.shape[0]))
        if self._nt:
            y[:, self._nc:self._nc + self._nt] = np.tile(np.abs(self.v_eq_), self.N_)
        return y

    def _solve(self, k, z0, x, observed, warm, warm_dual):
        if self.variant == "nom":
            moments = self.propagate_moments(z0, np.zeros_like(z0), nominal=True)
        else:
            if observed is None and not self.iid_ and k > 0:
                raise ValueError("correlated disturbances need the observed history")
            mean, cov = self.window(k, observed if observed is not None else np.zeros((x.shape[0], 0)))
            moments = self.propagate_moments(z0, x - z0, mean, cov)
        g, l, u, const = self._qp_data(k, moments)
        sol = self.solver_.solve(g, l, u, warm_start=warm, warm_dual=warm_dual)
        return sol, moments, const

    def step_batch(self, state, x, observed=None):
        """Advance every trial in the batch by one step.

        Parameters
        ----------
        state : ControllerState
            ``state.z`` has shape ``(b, n_x)``.
        x : ndarray of shape (b, n_x)
            Measured states.
        observed : ndarray of shape (b, k * n_x), optional
            Realized disturbances ``w(0..k-1)``; only needed for correlated
            disturbance models.

        Returns ``(StepResult, ControllerState)``.  A trial whose QP is not
        solved applies the shifted previous solution (``fallback``).
        """
        x = np.atleast_2d(np.asarray(x, dtype=float))
        b = x.shape[0]
        N, n, m = self.N_, self.model_.n_x, self.model_.n_u
        mp = self.maps_
        k = state.k
        z = np.broadcast_to(np.asarray(state.z, dtype=float), (b, n)).copy()
        if state.solution is None:
            warm, warm_dual, candidate = self._default_start(b), None, None
        else:
            prev = np.asarray(state.solution).reshape(b, -1)
            dual = None if state.dual is None else np.asarray(state.dual).reshape(b, -1)
            warm, warm_dual = self._shifted(prev, dual)
            candidate = warm

        reset = np.zeros(b, dtype=bool)
        if self.variant == "df":
            reset = self._state_row_ok(k, x)
        z0 = np.where(reset[:, None], x, z)
        sol, moments, const = self._solve(k, z0, x, observed, warm, warm_dual)
        y, status, dual, obj = sol.y.copy(), sol.status.copy(), sol.multipliers.copy(), sol.objective.copy()
        iters = sol.iterations.copy()
        err = moments.error_mean.copy()

        # df: fall back to the carried nominal state when the reset is infeasible
        retry = reset & (status != OPTIMAL)
        if np.any(retry):
            sub = np.flatnonzero(retry)
            obs_sub = None if observed is None else np.asarray(observed)[sub]
            d_sub = None if warm_dual is None else warm_dual[sub]
            sol2, mom2, const2 = self._solve(k, z[sub], x[sub], obs_sub, warm[sub], d_sub)
            y[sub], status[sub], dual[sub], obj[sub] = sol2.y, sol2.status, sol2.multipliers, sol2.objective
            iters[sub] += sol2.iterations
            err[sub], const[sub] = mom2.error_mean, const2
            z0[sub] = z[sub]
            reset[sub] = False

        fallback = status != OPTIMAL
        if np.any(fallback):
            fb = np.flatnonzero(fallback)
            y[fb] = candidate[fb] if candidate is not None else self._default_start(fb.size)

        c = y[:, :self._nc]
        V = (z0 @ mp.Vz.T + c @ mp.Vc.T + mp.Vk).reshape(b, N, m)
        Z = (z0 @ mp.Zz.T + c @ mp.Zc.T + mp.Zk).reshape(b, N + 1, n)
        v0 = V[:, 0]
        u = (x - z0) @ self.gain_.K.T + v0
        slack = y[:, self._nc + self._nt:] if self._ns else np.zeros((b, 0))
        result = StepResult(u=u, v0=v0, z_pred=Z, v_pred=V, mu_x=Z + err, status=status, slack=slack,
                            cost=obj + const, reset=reset, fallback=fallback, iterations=iters)
        return result, ControllerState(z=Z[:, 1].copy(), k=k + 1, solution=y, dual=dual)

    def step(self, state, x, observed=None):
        """Single-trial version of :meth:`step_batch`."""
        x = as_vector(x, "x", self.model_.n_x)
        st = ControllerState(z=np.atleast_2d(state.z), k=state.k,
                             solution=None if state.solution is None else np.atleast_2d(state.solution),
                             dual=None if state.dual is None else np.atleast_2d(state.dual))
        obs = None if observed is None else np.atleast_2d(np.asarray(observed, dtype=float))
        res, new = self.step_batch(st, x[None, :], obs)
        single = StepResult(u=res.u[0], v0=res.v0[0], z_pred=res.z_pred[0], v_pred=res.v_pred[0],
                            mu_x=res.mu_x[0], status=str(res.status[0]), slack=res.slack[0],
                            cost=float(res.cost[0]), reset=bool(res.reset[0]), fallback=bool(res.fallback[0]),
                            iterations=int(res.iterations[0]))
        return single, ControllerState(z=new.z[0], k=new.k, solution=new.solution[0], dual=new.dual[0])


def step(controller, state, x_measured, observed_disturbances=None, strict=False):
    """Functional form of :meth:`SmpcController.step`.

    With ``strict=True`` a non-optimal solve raises :class:`Infeasible`
    instead of falling back to the shifted previous solution.
    """
    result, new_state = controller.step(state, x_measured, observed_disturbances)
    if strict and result.status != OPTIMAL:
        raise Infeasible(f"QP status {result.status} at k={state.k}")
    return result, new_state


def error_covariance_pair(A_K, dist, k, i):
    """Covariance of the predicted error ``e_i(k)`` computed two ways.

    Returns ``(predicted, closed_loop)``.  ``predicted`` combines the
    conditional window covariance propagated over ``i`` steps with the
    spread of the conditional mean over past disturbances (law of total
    covariance, starting from ``e(0) = 0``).  ``closed_loop`` is the
    marginal of ``e(k+i)`` from the stacked closed-loop error prediction.
    The two agree whenever the closed-loop error dynamics are linear.
    """
    A_K = np.asarray(A_K, dtype=float)
    n = dist.n_x
    total = k + i
    if total < 1:
        return np.zeros((n, n)), np.zeros((n, n))
    stack = prediction_stack(A_K, total)
    _, cov = sequence_moments(stack, np.zeros(n), dist)
    closed = cov[(total - 1) * n:, (total - 1) * n:]

    powers = [np.eye(n)]
    for _ in range(total):
        powers.append(powers[-1] @ A_K)
    # e(k) = M_e W_past and e_i(k) = A_K^i e(k) + M_w [w(k); ...; w(k+i-1)]
    M_e = np.hstack([powers[k - 1 - j] for j in range(k)]) if k else np.zeros((n, 0))
    M_w = np.hstack([powers[i - 1 - j] for j in range(i)]) if i else np.zeros((n, 0))
    a = slice(0, k * n)
    fut = slice(k * n, total * n)
    if k and i:
        G = gaussians._conditioning_gain(dist.cov[a, a], dist.cov[fut, a])
        S_cond = dist.cov[fut, fut] - G @ dist.cov[a, fut]
    else:
        G = np.zeros((i * n, k * n))
        S_cond = dist.cov[fut, fut]
    L = powers[i] @ M_e + M_w @ G
    pred = M_w @ S_cond @ M_w.T + L @ dist.cov[a, a] @ L.T
    return 0.5 * (pred + pred.T), closed
