"""Stochastic MPC with probabilistic-reachable-set constraint tightening."""

from . import gaussians, lti, prs, qp, simulate, smpc
from .exceptions import (AssumptionViolated, CenterMismatch, ConfigError, DimensionMismatch,
                         EmptyResult, EmptySchedule, IndexOutOfRange, Infeasible,
                         InvalidProbability, MaxIterations, NotStable, PrsMpcError,
                         UnstableDiscretization, WindowExceedsHorizon)
from .gaussians import GaussianSequence
from .lti import ClosedLoopGain, LtiModel
from .prs import Ellipsoid, Polytope, TighteningSchedule
from .qp import AdmmSettings, QuadraticProgram
from .simulate import MetricsReport, Scenario, TrialRecord
from .smpc import ControllerState, CostSpec, SmpcController, StepResult

__version__ = "0.1.0"
