"""Command-line front end.

``prsmpc run`` simulates one scenario for a list of controller variants and
writes, to ``--out``:

* ``trace_<variant>.csv`` -- one row per trial and step,
* ``metrics.json`` / ``metrics.csv`` -- one entry per variant,
* ``schedule.csv`` -- per-step tightening margins and tightened bounds.

``prsmpc validate`` checks a scenario (stability, tightening, terminal set)
without simulating.  Exit codes: 0 success, 1 runtime failure (or failed
checks), 2 invalid configuration; failures print a JSON object to stderr.
"""

import argparse
import json
import os
import sys
from dataclasses import dataclass, replace
import functools

import numpy as np

from . import prs, simulate
from .exceptions import (AssumptionViolated, ConfigError, EmptyResult, NotStable,
                         PrsMpcError)
from .gaussians import GaussianSequence
from .lti import ClosedLoopGain, LtiModel, check_stable, lqr_gain
from .smpc import VARIANTS

LEVEL_RULES = ("gaussian", "chebyshev")


@dataclass
class RunConfig:
    scenario: str = "double_integrator"
    variants: tuple = None
    trials: int = 100
    seed: int = 0
    level_rule: str = "gaussian"
    horizon: int = None
    out: str = "results"
    config: str = None
    n_jobs: int = 1

    def __post_init__(self):
        if self.scenario not in simulate.SCENARIOS and self.scenario != "custom":
            raise ConfigError("scenario", f"unknown scenario {self.scenario!r}; "
                              f"choose from {sorted(simulate.SCENARIOS) + ['custom']}")
        if self.scenario == "custom" and not self.config:
            raise ConfigError("config", "scenario 'custom' needs --config")
        if self.trials < 1:
            raise ConfigError("trials", "must be >= 1")
        if self.level_rule not in LEVEL_RULES:
            raise ConfigError("level_rule", f"must be one of {LEVEL_RULES}")
        if self.horizon is not None and self.horizon < 1:
            raise ConfigError("horizon", "must be >= 1")
        if self.n_jobs < 1:
            raise ConfigError("n_jobs", "must be >= 1")
        if self.variants is not None:
            bad = [v for v in self.variants if v not in VARIANTS]
            if bad:
                raise ConfigError("variants", f"unknown variant(s) {bad}; choose from {list(VARIANTS)}")


# -- custom scenarios -----------------------------------------------------------

def _field(doc, key, required=True, default=None):
    if key not in doc:
        if required:
            raise ConfigError(key, "missing")
        return default
    return doc[key]


def _array(doc, key, ndim, required=True):
    value = _field(doc, key, required)
    if value is None:
        return None
    try:
        arr = np.array(value, dtype=float)
    except (TypeError, ValueError) as exc:
        raise ConfigError(key, f"not numeric: {exc}") from None
    if ndim == 2:
        arr = np.atleast_2d(arr)
    if arr.ndim != ndim or not np.all(np.isfinite(arr)):
        raise ConfigError(key, f"expected a finite {ndim}-d array")
    return arr


def _polytope(doc, key):
    spec = _field(doc, key, required=False)
    if spec is None:
        return None
    try:
        if "lower" in spec or "upper" in spec:
            return prs.Polytope.box(spec["lower"], spec["upper"])
        return prs.Polytope(spec["A"], spec["b"])
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(key, f"expected {{A, b}} or {{lower, upper}}: {exc}") from None


def _sequence_slice(n_blocks, mean, cov, n):
    need = n_blocks * n
    if mean.size < need:
        raise ConfigError("disturbance", f"covers {mean.size // n} steps, need {n_blocks}")
    return GaussianSequence(mean[:need], cov[:need, :need], n)


def _disturbance(doc, n):
    spec = _field(doc, "disturbance")
    if not isinstance(spec, dict):
        raise ConfigError("disturbance", "expected an object")
    if "Sigma_w" in spec:
        S = _array(spec, "Sigma_w", 2)
        mean = _array(spec, "mean", 1, required=False)
        if S.shape != (n, n):
            raise ConfigError("disturbance", f"Sigma_w must be {n}x{n}")
        return functools.partial(GaussianSequence.iid, S, mean=mean)
    mean = _array(spec, "mean", 1)
    cov = _array(spec, "cov", 2)
    if mean.size % n or cov.shape != (mean.size, mean.size):
        raise ConfigError("disturbance", "mean/cov sizes do not match the state dimension")
    return functools.partial(_sequence_slice, mean=mean, cov=cov, n=n)


def load_scenario(path):
    """Build a :class:`~prsmpc.simulate.Scenario` from a JSON document.

    Matrices are nested row-major arrays.  Required keys: ``A``, ``B``,
    ``disturbance`` (``{"Sigma_w": ...}`` for i.i.d. blocks or
    ``{"mean": ..., "cov": ...}`` for a full sequence), ``Q``, ``R``,
    ``x0``.  Optional: ``affine``, ``state_constraints`` /
    ``input_constraints`` (``{"A", "b"}`` or ``{"lower", "upper"}``),
    ``p_x``, ``p_u``, ``K``, ``horizon``, ``n_steps``, ``terminal``,
    ``reference``, ``input_l1_weight``, ``tightening``, ``level_rule``,
    ``variants``, ``B_sim``, ``name``.
    """
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except OSError as exc:
        raise ConfigError("config", f"cannot read {path}: {exc.strerror}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError("config", f"invalid JSON: {exc}") from None
    if not isinstance(doc, dict):
        raise ConfigError("config", "expected a JSON object")
    A = _array(doc, "A", 2)
    B = _array(doc, "B", 2)
    affine = _array(doc, "affine", 1, required=False)
    try:
        model = LtiModel(A, B, affine)
    except ValueError as exc:
        raise ConfigError("B", str(exc)) from None
    n = model.n_x
    kw = {}
    for key in ("K", "B_sim"):
        kw[key] = _array(doc, key, 2, required=False)
    for key in ("terminal", "reference"):
        kw[key] = _array(doc, key, 1, required=False)
    for key, default in (("p_x", 0.8), ("p_u", 0.8), ("input_l1_weight", 0.0)):
        kw[key] = float(_field(doc, key, False, default))
    for key, default in (("horizon", 30), ("n_steps", 100)):
        value = _field(doc, key, False, default)
        if not isinstance(value, int):
            raise ConfigError(key, "must be an integer")
        kw[key] = value
    kw["tightening"] = _field(doc, "tightening", False, "per_step")
    if kw["tightening"] not in ("per_step", "stationary"):
        raise ConfigError("tightening", "must be 'per_step' or 'stationary'")
    kw["level_rule"] = _field(doc, "level_rule", False, "gaussian")
    if kw["level_rule"] not in LEVEL_RULES:
        raise ConfigError("level_rule", f"must be one of {LEVEL_RULES}")
    kw["variants"] = tuple(_field(doc, "variants", False, ["rec"]))
    try:
        return simulate.Scenario(
            name=str(_field(doc, "name", False, "custom")), model=model,
            disturbance=_disturbance(doc, n),
            state_constraints=_polytope(doc, "state_constraints"),
            input_constraints=_polytope(doc, "input_constraints"),
            Q=_array(doc, "Q", 2), R=_array(doc, "R", 2), x0=_array(doc, "x0", 1), **kw)
    except ConfigError:
        raise
    except ValueError as exc:
        raise ConfigError("config", str(exc)) from None


def make_scenario(cfg):
    """Scenario selected by a :class:`RunConfig` with its overrides applied."""
    if cfg.scenario == "custom":
        sc = load_scenario(cfg.config)
        sc = replace(sc, level_rule=cfg.level_rule) if cfg.level_rule != "gaussian" else sc
    else:
        sc = simulate.SCENARIOS[cfg.scenario](level_rule=cfg.level_rule)
    if cfg.horizon is not None:
        if cfg.horizon > sc.n_steps:
            raise ConfigError("horizon", f"must not exceed the run length {sc.n_steps}")
        sc = replace(sc, horizon=cfg.horizon)
    if cfg.variants is not None:
        sc = replace(sc, variants=tuple(cfg.variants))
    bad = [v for v in sc.variants if v not in VARIANTS]
    if bad:
        raise ConfigError("variants", f"unknown variant(s) {bad}")
    return sc


# -- commands -------------------------------------------------------------------

def run(cfg, log=print):
    """Simulate every variant of the configured scenario and write the outputs."""
    sc = make_scenario(cfg)
    try:
        os.makedirs(cfg.out, exist_ok=True)
    except OSError as exc:
        raise ConfigError("out", f"cannot create {cfg.out}: {exc.strerror}") from None
    reports = []
    schedule_written = False
    for variant in sc.variants:
        records = simulate.run_trials(sc, variant, cfg.trials, cfg.seed, n_jobs=cfg.n_jobs)
        ctrl = sc.controller(variant)
        report = simulate.aggregate(records, variant, sc.cost_skip)
        reports.append(report)
        simulate.write_csv(os.path.join(cfg.out, f"trace_{variant}.csv"),
                           simulate.trace_rows(records, sc, ctrl))
        if not schedule_written:
            simulate.write_csv(os.path.join(cfg.out, "schedule.csv"),
                               simulate.schedule_rows(ctrl, sc.n_steps))
            schedule_written = True
        log(f"{variant:>6}: J_cl(x(0)) = {report.j_cl_0:.4g}  J_cl(x({sc.cost_skip})) = "
            f"{report.j_cl_20:.4g}  max n_v = {100 * report.max_violation:.1f}%  "
            f"non-optimal solves = {report.infeasible_count}")
    payload = {"scenario": sc.name, "trials": cfg.trials, "seed": cfg.seed,
               "level_rule": sc.level_rule, "horizon": sc.horizon, "n_steps": sc.n_steps,
               "variants": {r.variant: r.to_dict() for r in reports}}
    simulate.write_json(os.path.join(cfg.out, "metrics.json"), payload)
    simulate.write_csv(os.path.join(cfg.out, "metrics.csv"), simulate.metrics_rows(reports))
    return reports


def validate(cfg):
    """Check stability, tightening non-emptiness and the terminal set.

    Returns a list of ``(check, passed, detail)`` tuples; no simulation.
    """
    sc = make_scenario(cfg)
    checks = []
    try:
        K = sc.K if sc.K is not None else lqr_gain(
            sc.model, sc.Q if sc.Q_lqr is None else sc.Q_lqr, sc.R if sc.R_lqr is None else sc.R_lqr)
        gain = ClosedLoopGain.from_model(sc.model, K)
        rho = check_stable(gain.A_K)
        checks.append(("stability", True, f"spectral radius of A+BK = {rho:.4f}"))
    except (NotStable, ValueError) as exc:
        checks.append(("stability", False, f"{type(exc).__name__}: {exc}"))
        checks.append(("tightening", False, "skipped"))
        checks.append(("terminal", False, "skipped"))
        return checks
    for variant in sc.variants:
        ctrl = sc.estimator(variant)
        try:
            ctrl.fit(sc.model, sc.disturbance_model(), sc.state_constraints, sc.input_constraints,
                     terminal=sc.terminal, n_steps=sc.n_steps + sc.horizon)
            terminal = (True, "terminal point satisfies invariance and tightened constraints")
        except AssumptionViolated as exc:
            terminal = (False, f"AssumptionViolated({exc.condition}): {exc}")
        except PrsMpcError as exc:
            terminal = (False, f"{type(exc).__name__}: {exc}")
        if not hasattr(ctrl, "schedule_"):
            checks.append((f"tightening[{variant}]", False, "schedule not built"))
        else:
            checks.append((f"tightening[{variant}]",) + _check_tightening(sc, ctrl.schedule_))
        checks.append((f"terminal[{variant}]",) + terminal)
    return checks


def _check_tightening(sc, schedule):
    pairs = [(sc.state_constraints, schedule.state_sets, "state"),
             (sc.input_constraints, schedule.input_sets, "input")]
    for constraints, sets, label in pairs:
        if constraints is None:
            continue
        for k, region in enumerate(sets):
            try:
                prs.tighten(constraints, region)
            except EmptyResult:
                return False, f"EmptyResult: {label} tightening at k={k} removes the whole set"
    return True, f"{len(schedule)} per-step sets leave nonempty constraint sets"


# -- entry point ----------------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError("arguments", message)


def _variants(text):
    return tuple(v.strip() for v in text.split(",") if v.strip())


def build_parser():
    parser = _Parser(prog="prsmpc", description="Stochastic MPC with PRS constraint tightening.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name, help_text in (("run", "simulate a scenario and write CSV/JSON results"),
                            ("validate", "check a scenario without simulating")):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--scenario", default="double_integrator",
                       help="double_integrator, double_integrator_mismatch, building or custom")
        p.add_argument("--variants", type=_variants, default=None,
                       help="comma-separated list of nom, rec, df, recSC (default: scenario's list)")
        p.add_argument("--level-rule", default="gaussian", help="gaussian or chebyshev")
        p.add_argument("--horizon", type=int, default=None, help="prediction horizon N")
        p.add_argument("--config", default=None, help="JSON file describing a custom scenario")
        if name == "run":
            p.add_argument("--trials", type=int, default=100, help="number of Monte Carlo trials")
            p.add_argument("--seed", type=int, default=0, help="master seed")
            p.add_argument("--out", default="results", help="output directory")
            p.add_argument("--n-jobs", type=int, default=1, help="worker processes")
    return parser


def _fail(code, kind, message, field=None):
    err = {"error": kind, "message": message}
    if field is not None:
        err["field"] = field
    print(json.dumps(err), file=sys.stderr)
    return code


def main(argv=None):
    try:
        args = build_parser().parse_args(argv)
        opts = {k: v for k, v in vars(args).items() if k != "command"}
        if args.scenario == "custom" or args.config:
            opts["scenario"] = "custom" if args.config else args.scenario
        cfg = RunConfig(**opts)
        if args.command == "validate":
            checks = validate(cfg)
            width = max(len(c[0]) for c in checks)
            for name, ok, detail in checks:
                print(f"{name:<{width}}  {'PASS' if ok else 'FAIL'}  {detail}")
            return 0 if all(ok for _, ok, _ in checks) else 1
        run(cfg)
        return 0
    except ConfigError as exc:
        return _fail(2, "ConfigError", str(exc), exc.field)
    except OSError as exc:
        return _fail(1, "IoError", str(exc))
    except (PrsMpcError, ValueError, np.linalg.LinAlgError) as exc:
        return _fail(1, type(exc).__name__, str(exc))


if __name__ == "__main__":
    sys.exit(main())
