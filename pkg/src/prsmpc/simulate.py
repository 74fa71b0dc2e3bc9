"""Closed-loop Monte Carlo harness, metrics and the shipped scenarios.

Trials run in lockstep: one :class:`~prsmpc.smpc.SmpcController` advances a
whole batch of trials per call.  Each trial draws its disturbance sequence
from its own random stream, derived from a master seed and the trial index,
so results do not depend on how trials are grouped into chunks or workers.
"""

import csv
import functools
import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import gaussians
from .exceptions import UnstableDiscretization
from .gaussians import GaussianSequence
from .lti import LtiModel, spectral_radius
from .prs import Polytope
from .smpc import SmpcController

#: Trials per lockstep batch; fixed so that results do not depend on n_jobs.
CHUNK_SIZE = 250


@dataclass
class Scenario:
    """Everything needed to build a controller and simulate it.

    ``disturbance(n_blocks)`` returns the disturbance model over
    ``n_blocks`` steps.  ``B_sim`` overrides the input matrix of the
    simulated plant (model mismatch).
    """

    name: str
    model: LtiModel
    disturbance: object
    state_constraints: Polytope
    input_constraints: Polytope
    p_x: float
    p_u: float
    Q: np.ndarray
    R: np.ndarray
    x0: np.ndarray
    horizon: int = 30
    n_steps: int = 100
    K: np.ndarray = None
    Q_lqr: np.ndarray = None
    R_lqr: np.ndarray = None
    reference: np.ndarray = None
    input_l1_weight: float = 0.0
    terminal: np.ndarray = None
    tightening: str = "per_step"
    level_rule: str = "gaussian"
    variants: tuple = ("rec",)
    B_sim: np.ndarray = None
    cost_skip: int = 20

    def __post_init__(self):
        for p in (self.p_x, self.p_u):
            if not 0.0 < p < 1.0:
                raise ValueError(f"chance levels must lie in (0, 1), got {p}")
        if not 1 <= self.horizon <= self.n_steps:
            raise ValueError(f"need 1 <= N <= N_bar, got N={self.horizon}, N_bar={self.n_steps}")

    def disturbance_model(self):
        # enough blocks that the prediction window never runs past the end
        return self.disturbance(self.n_steps + self.horizon + 1)

    def estimator(self, variant, solver_settings=None):
        """Unfitted controller for ``variant`` with this scenario's settings."""
        return SmpcController(
            horizon=self.horizon, variant=variant, Q=self.Q, R=self.R, K=self.K,
            Q_lqr=self.Q_lqr, R_lqr=self.R_lqr, p_x=self.p_x, p_u=self.p_u,
            level_rule=self.level_rule, tightening=self.tightening,
            reference=self.reference, input_l1_weight=self.input_l1_weight,
            solver_settings=solver_settings)

    def controller(self, variant, solver_settings=None, disturbance=None):
        """Controller for ``variant`` fitted to this scenario."""
        ctrl = self.estimator(variant, solver_settings)
        dist = self.disturbance_model() if disturbance is None else disturbance
        return ctrl.fit(self.model, dist, self.state_constraints, self.input_constraints,
                        terminal=self.terminal, n_steps=self.n_steps + self.horizon)

    def stage_cost(self, x, u):
        """``|x - r|_Q^2 + |u|_R^2 + l1 |u|_1`` over the trailing axis."""
        r = 0.0 if self.reference is None else self.reference
        d = x - r
        Q, R = np.atleast_2d(self.Q), np.atleast_2d(self.R)
        c = np.einsum("...i,ij,...j->...", d, Q, d) + np.einsum("...i,ij,...j->...", u, R, u)
        if self.input_l1_weight:
            c = c + self.input_l1_weight * np.abs(u).sum(axis=-1)
        return c


@dataclass
class TrialRecord:
    """One closed-loop run over ``k = 0..N_bar``.

    Arrays have ``N_bar + 1`` rows.  ``status`` holds the QP status of each
    solve and ``fallback`` marks steps that applied the shifted previous
    solution instead.
    """

    x: np.ndarray
    u: np.ndarray
    z: np.ndarray
    status: np.ndarray
    state_violation: np.ndarray
    input_violation: np.ndarray
    stage_cost: np.ndarray
    fallback: np.ndarray
    seed: tuple
    reset: np.ndarray = None

    @property
    def n_steps(self):
        return self.x.shape[0] - 1

    @property
    def infeasible_count(self):
        return int(np.sum(self.status != "optimal"))


@dataclass
class MetricsReport:
    variant: str
    n_trials: int
    j_cl_0: float
    j_cl_20: float
    max_violation: float
    violation_curve: np.ndarray = field(repr=False)
    state_violation_curve: np.ndarray = field(repr=False)
    input_violation_curve: np.ndarray = field(repr=False)
    infeasible_count: int = 0
    fallback_count: int = 0
    cost_skip: int = 20

    def to_dict(self):
        d = asdict(self)
        for key in ("violation_curve", "state_violation_curve", "input_violation_curve"):
            d[key] = [float(v) for v in d[key]]
        for key in ("j_cl_0", "j_cl_20", "max_violation"):
            d[key] = float(d[key])
        return d


def trial_seed(master_seed, index):
    """Independent stream for trial ``index`` (counter-based split of the master seed)."""
    return np.random.SeedSequence(entropy=int(master_seed), spawn_key=(int(index),))


def _violations(constraints, values, tol=0.0):
    if constraints is None:
        return np.zeros(values.shape[:-1], dtype=bool)
    return np.any(values @ constraints.A.T > constraints.b + tol, axis=-1)


def _draw(dist, seeds, root=None):
    root = gaussians.psd_sqrt(dist.cov) if root is None else root
    draws = np.empty((len(seeds), dist.mean.size))
    for i, s in enumerate(seeds):
        rng = np.random.default_rng(s)
        draws[i] = dist.mean + rng.standard_normal(dist.mean.size) @ root.T
    return draws


def _run_chunk(scenario, variant, seeds, solver_settings=None):
    ctrl = scenario.controller(variant, solver_settings)
    dist = ctrl.disturbance_
    n, m = scenario.model.n_x, scenario.model.n_u
    Nbar = scenario.n_steps
    b = len(seeds)
    W = _draw(dist, seeds).reshape(b, -1, n)
    B_true = scenario.model.B if scenario.B_sim is None else np.asarray(scenario.B_sim, dtype=float)
    A, c = scenario.model.A, scenario.model.affine

    xs = np.zeros((b, Nbar + 1, n))
    us = np.zeros((b, Nbar + 1, m))
    zs = np.zeros((b, Nbar + 1, n))
    status = np.empty((b, Nbar + 1), dtype=object)
    fallback = np.zeros((b, Nbar + 1), dtype=bool)
    reset = np.zeros((b, Nbar + 1), dtype=bool)
    x = np.tile(np.asarray(scenario.x0, dtype=float), (b, 1))
    state = ctrl.initial_state(x.copy())
    for k in range(Nbar + 1):
        observed = None if ctrl.iid_ else W[:, :k].reshape(b, -1)
        res, new_state = ctrl.step_batch(state, x, observed)
        xs[:, k], us[:, k] = x, res.u
        zs[:, k] = res.z_pred[:, 0]
        status[:, k] = res.status
        fallback[:, k] = res.fallback
        reset[:, k] = res.reset
        x = x @ A.T + res.u @ B_true.T + c + W[:, k]
        state = new_state

    sv = _violations(scenario.state_constraints, xs)
    iv = _violations(scenario.input_constraints, us)
    cost = scenario.stage_cost(xs, us)
    return [TrialRecord(x=xs[i], u=us[i], z=zs[i], status=status[i], state_violation=sv[i],
                        input_violation=iv[i], stage_cost=cost[i], fallback=fallback[i],
                        seed=tuple(seeds[i].spawn_key) if hasattr(seeds[i], "spawn_key") else seeds[i],
                        reset=reset[i])
            for i in range(b)]


def run_trial(scenario, variant, seed, solver_settings=None):
    """Simulate one closed-loop trial; deterministic for a given seed.

    ``seed`` may be an int or a :class:`numpy.random.SeedSequence`.
    """
    if not isinstance(seed, np.random.SeedSequence):
        seed = np.random.SeedSequence(int(seed))
    return _run_chunk(scenario, variant, [seed], solver_settings)[0]


def run_trials(scenario, variant, n_trials, master_seed=0, n_jobs=1, chunk_size=CHUNK_SIZE,
               solver_settings=None):
    """Run ``n_trials`` trials with seeds ``trial_seed(master_seed, i)``.

    Trials are processed in chunks of ``chunk_size`` (independent of
    ``n_jobs``), optionally spread over worker processes.
    """
    n_trials = int(n_trials)
    if n_trials < 1:
        raise ValueError("n_trials must be >= 1")
    seeds = [trial_seed(master_seed, i) for i in range(n_trials)]
    chunks = [seeds[i:i + chunk_size] for i in range(0, n_trials, chunk_size)]
    if n_jobs == 1 or len(chunks) == 1:
        parts = [_run_chunk(scenario, variant, ch, solver_settings) for ch in chunks]
    else:
        with ProcessPoolExecutor(max_workers=n_jobs) as pool:
            parts = list(pool.map(_run_chunk, [scenario] * len(chunks), [variant] * len(chunks),
                                  chunks, [solver_settings] * len(chunks)))
    return [r for part in parts for r in part]


def aggregate(records, variant="", cost_skip=20):
    """Average closed-loop cost and per-step violation rates.

    ``J_cl(x(0)) = 1/N_bar sum_{k=0}^{N_bar} l(x, u)`` and
    ``J_cl(x(s)) = 1/(N_bar - s) sum_{k=s}^{N_bar} l(x, u)`` for
    ``s = cost_skip``, both averaged over trials; ``n_v(k)`` is the
    fraction of trials violating a state or input constraint at ``k``.
    """
    records = list(records)
    if not records:
        raise ValueError("need at least one record")
    Nbar = records[0].n_steps
    cost = np.array([r.stage_cost for r in records])
    sv = np.array([r.state_violation for r in records])
    iv = np.array([r.input_violation for r in records])
    curve = (sv | iv).mean(axis=0)
    return MetricsReport(
        variant=variant, n_trials=len(records),
        j_cl_0=float(cost.sum(axis=1).mean() / Nbar),
        j_cl_20=float(cost[:, cost_skip:].sum(axis=1).mean() / (Nbar - cost_skip)),
        max_violation=float(curve.max()), violation_curve=curve,
        state_violation_curve=sv.mean(axis=0), input_violation_curve=iv.mean(axis=0),
        infeasible_count=int(sum(r.infeasible_count for r in records)),
        fallback_count=int(sum(int(r.fallback.sum()) for r in records)),
        cost_skip=cost_skip)


# -- scenarios ------------------------------------------------------------------

def double_integrator(level_rule="gaussian", horizon=30, n_steps=100, variants=("nom", "rec", "df")):
    """Velocity-constrained double integrator under i.i.d. correlated-component noise."""
    A = np.array([[1.0, 1.0], [0.0, 1.0]])
    B = np.array([[0.5], [1.0]])
    Sigma_w = np.array([[0.25, 0.5], [0.5, 1.0]])
    X = Polytope(np.array([[0.0, 1.0], [0.0, -1.0]]), np.array([3.0, 3.0]))
    return Scenario(
        name="double_integrator", model=LtiModel(A, B),
        disturbance=functools.partial(GaussianSequence.iid, Sigma_w),
        state_constraints=X, input_constraints=None, p_x=0.8, p_u=0.8,
        Q=np.eye(2), R=np.eye(1), x0=np.array([10.0, 0.0]), horizon=horizon, n_steps=n_steps,
        K=np.array([[-0.2, -0.6]]), tightening="stationary", level_rule=level_rule,
        variants=tuple(variants))


def double_integrator_mismatch(level_rule="gaussian", horizon=30, n_steps=100,
                               variants=("nom", "rec", "df", "recSC")):
    """Same controller design; the simulated plant has a fifth of the actuator gain."""
    sc = double_integrator(level_rule, horizon, n_steps, variants)
    return replace(sc, name="double_integrator_mismatch", B_sim=sc.model.B / 5.0)


BUILDING_H = 1000.0 * np.array([[0.0, 2.1, 2.0, 0.0],
                                [2.1, 0.0, 0.0, 1.9],
                                [2.0, 0.0, 0.0, 1.0],
                                [0.0, 1.9, 1.0, 0.0]])
BUILDING_h = 1000.0 * np.array([0.3, 0.5, 0.4, 0.6])
BUILDING_C = 1e6 * np.array([50.0, 110.0, 80.0, 90.0])
BUILDING_DT = 3600.0


def building_input_matrices(h, C, dt):
    """``(B, B_d) = (dt C^-1, dt C^-1 h)`` for power inputs and outside temperature."""
    Cinv = 1.0 / np.asarray(C, dtype=float)
    return dt * np.diag(Cinv), dt * Cinv * np.asarray(h, dtype=float)


def building_model(H=BUILDING_H, h=BUILDING_h, C=BUILDING_C, dt=BUILDING_DT, T_out_mean=0.0):
    """Forward-Euler model of a thermal resistance network.

    ``A = I + dt C^-1 (H - D)`` with ``D = diag(H 1 + h)``: each room loses
    heat to its neighbours and to the outside.  ``B = dt C^-1`` and
    ``B_d = dt C^-1 h``, so a uniform temperature equal to the outside
    temperature is an equilibrium (``A 1 + B_d = 1``).  The mean outside
    temperature enters as the affine term ``B_d T_out_mean``.
    """
    H = np.asarray(H, dtype=float)
    h = np.asarray(h, dtype=float)
    C = np.asarray(C, dtype=float)
    if np.any(C <= 0):
        raise ValueError("capacities must be positive")
    if np.any(H < 0) or np.any(h < 0) or np.abs(H - H.T).max(initial=0.0) > 0:
        raise ValueError("conductances must be symmetric and nonnegative")
    n = C.size
    D = np.diag(H.sum(axis=1) + h)
    A = np.eye(n) + dt * (H - D) / C[:, None]
    B, B_d = building_input_matrices(h, C, dt)
    rho = spectral_radius(A)
    if rho > 1.0 + 1e-12:
        raise UnstableDiscretization(f"Euler step too large: spectral radius {rho:.6g} > 1")
    return LtiModel(A, B, B_d * T_out_mean)


def diurnal_kernel(lags, sigma=1.5, length_scale=12.0, period=24.0, periodic_scale=1.0):
    """Squared-exponential times daily-periodic covariance over hour lags."""
    lags = np.asarray(lags, dtype=float)
    se = np.exp(-0.5 * (lags / length_scale) ** 2)
    per = np.exp(-2.0 * np.sin(np.pi * lags / period) ** 2 / periodic_scale ** 2)
    return sigma ** 2 * se * per


def building_disturbance(n_blocks, B_d, amplitude=4.0, peak_hour=15.0, start_hour=12.0,
                         sigma=1.5, length_scale=12.0, period=24.0, periodic_scale=1.0,
                         process_std=0.02):
    """Disturbance ``w(k) = B_d (T_out(k) - T_mean) + v(k)``.

    The outside temperature deviation follows a sinusoid peaking at
    ``peak_hour`` plus a zero-mean Gaussian process with
    :func:`diurnal_kernel` covariance; ``v(k)`` is i.i.d. process noise of
    standard deviation ``process_std`` (kelvin per step) on every room.
    """
    B_d = np.asarray(B_d, dtype=float)
    n = B_d.size
    hours = start_hour + np.arange(n_blocks)
    profile = amplitude * np.cos(2.0 * np.pi * (hours - peak_hour) / period)
    lags = hours[:, None] - hours[None, :]
    Kt = diurnal_kernel(lags, sigma, length_scale, period, periodic_scale)
    cov = np.kron(Kt, np.outer(B_d, B_d)) + process_std ** 2 * np.eye(n * n_blocks)
    mean = np.kron(profile, B_d)
    return GaussianSequence(mean, 0.5 * (cov + cov.T), n)


def building(horizon=24, n_steps=48, T_out_mean=18.0, level_rule="gaussian", variants=("rec",),
             **disturbance_kw):
    """Four-room building with comfort band 20..23.5 C and +-6 kW actuators."""
    model = building_model(T_out_mean=T_out_mean)
    _, B_d = building_input_matrices(BUILDING_h, BUILDING_C, BUILDING_DT)
    n = model.n_x
    X = Polytope.box(20.0 * np.ones(n), 23.5 * np.ones(n))
    U = Polytope.box(-6e3 * np.ones(n), 6e3 * np.ones(n))
    ref = 21.75 * np.ones(n)
    return Scenario(
        name="building", model=model,
        disturbance=functools.partial(building_disturbance, B_d=B_d, **disturbance_kw),
        state_constraints=X, input_constraints=U, p_x=0.9, p_u=0.99,
        Q=550.0 * np.eye(n), R=1e-6 * np.eye(n), x0=22.5 * np.ones(n),
        horizon=horizon, n_steps=n_steps, Q_lqr=1e5 * np.eye(n), R_lqr=0.03 * np.eye(n),
        reference=ref, input_l1_weight=1.0, terminal=ref, tightening="per_step",
        level_rule=level_rule, variants=tuple(variants), cost_skip=min(20, n_steps - 1))


SCENARIOS = {
    "double_integrator": double_integrator,
    "double_integrator_mismatch": double_integrator_mismatch,
    "building": building,
}


# -- output ---------------------------------------------------------------------

def trace_rows(records, scenario=None, controller=None):
    """One row per (trial, step) with states, inputs, nominal states and flags.

    When a controller is given, the tightened bounds on the nominal state
    and input at each step are appended (``xbound_j`` / ``ubound_j``).
    """
    rows = []
    for t, rec in enumerate(records):
        for k in range(rec.n_steps + 1):
            row = {"trial": t, "k": k}
            row.update({f"x{i + 1}": float(v) for i, v in enumerate(rec.x[k])})
            row.update({f"u{i + 1}": float(v) for i, v in enumerate(rec.u[k])})
            row.update({f"z{i + 1}": float(v) for i, v in enumerate(rec.z[k])})
            row["status"] = str(rec.status[k])
            row["fallback"] = int(rec.fallback[k])
            row["state_violation"] = int(rec.state_violation[k])
            row["input_violation"] = int(rec.input_violation[k])
            row["stage_cost"] = float(rec.stage_cost[k])
            if controller is not None:
                bx = controller.bx_[min(k, len(controller.bx_) - 1)]
                bu = controller.bu_[min(k, len(controller.bu_) - 1)]
                row.update({f"xbound{j + 1}": float(v) for j, v in enumerate(bx)})
                row.update({f"ubound{j + 1}": float(v) for j, v in enumerate(bu)})
            rows.append(row)
    return rows


def schedule_rows(controller, n_steps):
    """Per-step tightening: margin removed from and tightened value of each row."""
    rows = []
    Xc, Uc = controller.state_constraints_, controller.input_constraints_
    for k in range(n_steps + 1):
        row = {"k": k}
        bx = controller.bx_[min(k, len(controller.bx_) - 1)]
        bu = controller.bu_[min(k, len(controller.bu_) - 1)]
        if Xc is not None:
            row.update({f"x_margin{j + 1}": float(Xc.b[j] - bx[j]) for j in range(Xc.n_rows)})
            row.update({f"x_bound{j + 1}": float(bx[j]) for j in range(Xc.n_rows)})
        if Uc is not None:
            row.update({f"u_margin{j + 1}": float(Uc.b[j] - bu[j]) for j in range(Uc.n_rows)})
            row.update({f"u_bound{j + 1}": float(bu[j]) for j in range(Uc.n_rows)})
        rows.append(row)
    return rows


def write_csv(path, rows):
    if not rows:
        raise ValueError("nothing to write")
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0].keys()))
        writer.writeheader()
        writer.writerows(rows)


def metrics_rows(reports):
    """One row per variant with the summary statistics."""
    return [{"variant": r.variant, "n_trials": r.n_trials, "j_cl_0": r.j_cl_0, "j_cl_20": r.j_cl_20,
             "max_violation": r.max_violation, "infeasible_count": r.infeasible_count,
             "fallback_count": r.fallback_count} for r in reports]


def write_json(path, payload):
    def clean(obj):
        if isinstance(obj, dict):
            return {k: clean(v) for k, v in obj.items()}
        if isinstance(obj, (list, tuple)):
            return [clean(v) for v in obj]
        if isinstance(obj, np.ndarray):
            return clean(obj.tolist())
        if isinstance(obj, (np.floating, float)):
            v = float(obj)
            return v if math.isfinite(v) else None
        if isinstance(obj, np.integer):
            return int(obj)
        return obj

    with open(path, "w") as fh:
        json.dump(clean(payload), fh, indent=2, sort_keys=True)
        fh.write("\n")
