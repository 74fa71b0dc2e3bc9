"""Probabilistic reachable sets (PRS) and polytope tightening.

Sets are ellipsoids ``{e : (e-c)^T M^+ (e-c) <= 1}`` whose shape ``M`` may be
singular (flat along directions that carry no uncertainty).  Tightening only
ever needs support functions ``a^T c + sqrt(a^T M a)``, so ``M`` is never
inverted there.
"""

from dataclasses import dataclass

import numpy as np
import scipy.optimize

from . import gaussians
from ._validation import as_matrix, as_psd, as_vector, check_probability
from .exceptions import CenterMismatch, EmptyResult, EmptySchedule
from .lti import check_stable, dlyap, error_moments


@dataclass(frozen=True)
class Ellipsoid:
    center: np.ndarray
    shape: np.ndarray

    def __post_init__(self):
        c = as_vector(self.center, "center")
        M = as_psd(self.shape, "shape", c.size, tol=1e-9)
        object.__setattr__(self, "center", c)
        object.__setattr__(self, "shape", M)

    @classmethod
    def point(cls, c):
        c = as_vector(c, "center")
        return cls(c, np.zeros((c.size, c.size)))

    @property
    def dim(self):
        return self.center.size

    @property
    def is_point(self):
        return not np.any(self.shape)

    def support(self, a):
        """Support function ``max_{e in set} a^T e``; ``a`` may be a row stack."""
        a = np.asarray(a, dtype=float)
        quad = np.einsum("...i,ij,...j->...", a, self.shape, a)
        return a @ self.center + np.sqrt(np.clip(quad, 0.0, None))

    def linear_image(self, K):
        """Image under ``e -> K e``."""
        K = np.atleast_2d(np.asarray(K, dtype=float))
        return Ellipsoid(K @ self.center, K @ self.shape @ K.T)

    def half_widths(self):
        """Half-width of the set along each coordinate axis."""
        return np.sqrt(np.clip(np.diag(self.shape), 0.0, None))

    def contains_point(self, x, tol=1e-9):
        d = np.asarray(x, dtype=float) - self.center
        lam, U = np.linalg.eigh(self.shape)
        big = lam > tol * max(1.0, lam.max(initial=0.0))
        coords = d @ U
        flat = np.abs(coords[..., ~big]).max(axis=-1, initial=0.0) if np.any(~big) else 0.0
        q = np.sum(coords[..., big] ** 2 / lam[big], axis=-1)
        return (q <= 1.0 + tol) & (flat <= tol)


@dataclass(frozen=True)
class Polytope:
    """Halfspace representation ``{x : A x <= b}``."""

    A: np.ndarray
    b: np.ndarray

    def __post_init__(self):
        A = as_matrix(self.A, "A")
        b = as_vector(self.b, "b", A.shape[0])
        if np.any(np.linalg.norm(A, axis=1) == 0.0):
            raise ValueError("polytope rows must have nonzero normals")
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "b", b)

    @classmethod
    def box(cls, lower, upper):
        lower = as_vector(lower, "lower")
        upper = as_vector(upper, "upper", lower.size)
        eye = np.eye(lower.size)
        return cls(np.vstack([eye, -eye]), np.concatenate([upper, -lower]))

    @property
    def dim(self):
        return self.A.shape[1]

    @property
    def n_rows(self):
        return self.A.shape[0]

    def contains(self, x, tol=1e-9):
        x = np.asarray(x, dtype=float)
        return np.all(x @ self.A.T <= self.b + tol, axis=-1)

    def is_empty(self):
        res = scipy.optimize.linprog(
            np.zeros(self.dim), A_ub=self.A, b_ub=self.b,
            bounds=[(None, None)] * self.dim, method="highs")
        return res.status == 2

    def normal_rank(self):
        """Dimension of the subspace spanned by the row normals."""
        return int(np.linalg.matrix_rank(self.A))


def tighten(constraints, region, check_empty=True):
    """Pontryagin difference ``constraints (-) region`` for an ellipsoidal region.

    Exact row by row: ``b_j' = b_j - a_j^T c - sqrt(a_j^T M a_j)``.
    """
    b = constraints.b - region.support(constraints.A)
    out = Polytope(constraints.A.copy(), b)
    if check_empty and out.is_empty():
        raise EmptyResult("tightening set is larger than the constraint set")
    return out


def tightening_margins(constraints, region):
    """Row-wise amount ``a_j^T c + sqrt(a_j^T M a_j)`` removed by :func:`tighten`."""
    return region.support(constraints.A)


def union_margins(constraints, regions):
    """Row-wise margin ``max_k h_{R_k}(a_j)`` removed by the union of ``regions``.

    ``constraints (-) union(R_k)`` equals the intersection of the individual
    differences, so these margins give the exact tightening by any set that
    contains every ``R_k`` and has no larger support along the row normals.
    """
    return np.max([region.support(constraints.A) for region in regions], axis=0)


def contains(outer, inner, tol=1e-9):
    """Whether ``inner`` lies within ``outer``; both must share their center.

    For concentric ellipsoids containment is exactly ``M_outer - M_inner >= 0``.
    """
    if np.abs(outer.center - inner.center).max(initial=0.0) > 1e-9:
        raise CenterMismatch("containment test requires concentric ellipsoids")
    diff = outer.shape - inner.shape
    scale = max(1.0, np.abs(outer.shape).max(initial=0.0))
    return bool(np.linalg.eigvalsh(0.5 * (diff + diff.T)).min() >= -tol * scale)


@dataclass(frozen=True)
class TighteningSchedule:
    """Per-step state and input PRS plus the terminal sets.

    ``state_sets[k]`` and ``input_sets[k]`` serve time step ``k``; indices
    beyond the stored length reuse the last entry (constant tails).
    """

    state_sets: tuple
    input_sets: tuple
    terminal_state: Ellipsoid
    terminal_input: Ellipsoid
    K: np.ndarray = None

    def state(self, k):
        return self.state_sets[min(k, len(self.state_sets) - 1)]

    def input(self, k):
        return self.input_sets[min(k, len(self.input_sets) - 1)]

    def __len__(self):
        return len(self.state_sets)

    def check_containment(self):
        """Verify ``R_f`` covers every state set and ``K R_f`` every input set."""
        Rf, KRf = self.terminal_state, self.terminal_input
        ok_x = all(contains(Rf, _absorb_center(R, Rf.center)) for R in self.state_sets)
        ok_u = all(contains(KRf, _absorb_center(R, KRf.center)) for R in self.input_sets)
        return ok_x and ok_u


def _dof(constraints, default):
    return default if constraints is None else max(1, constraints.normal_rank())


def prs_schedule(model, gain, dist, p_x, p_u, level_rule="gaussian", n_steps=None,
                 state_constraints=None, input_constraints=None):
    """Per-step PRS for ``e(k+1) = A_K e(k) + w(k)`` started at ``e(0) = 0``.

    The scaling of each ellipsoid uses as many degrees of freedom as the
    constraint normals span (all states when no constraints are given):
    only the error component along those normals can cause a violation.

    Returns a :class:`TighteningSchedule` covering ``k = 0..n_steps``.
    """
    p_x = check_probability(p_x, "p_x")
    p_u = check_probability(p_u, "p_u")
    check_stable(gain.A_K)
    n_steps = dist.n_blocks if n_steps is None else int(n_steps)
    means, covs = error_moments(gain.A_K, dist, n_steps)
    lev_x = gaussians.level(_dof(state_constraints, model.n_x), p_x, level_rule)
    lev_u = gaussians.level(_dof(input_constraints, model.n_u), p_u, level_rule)
    K = gain.K
    state_sets = [Ellipsoid.point(means[0])]
    input_sets = [Ellipsoid.point(K @ means[0])]
    for mu, S in zip(means[1:], covs[1:]):
        state_sets.append(Ellipsoid(mu, lev_x * S))
        input_sets.append(Ellipsoid(K @ mu, lev_u * (K @ S @ K.T)))
    Rf, KRf = terminal_prs(state_sets, input_sets, K)
    return TighteningSchedule(tuple(state_sets), tuple(input_sets), Rf, KRf, K)


def stationary_prs(gain, Sigma_w, p, level_rule="gaussian", dof=None):
    """PRS valid for all horizons under zero-mean i.i.d. disturbances.

    Shape ``level * Sigma_inf`` with ``Sigma_inf = A_K Sigma_inf A_K^T + Sigma_w``.
    """
    p = check_probability(p)
    S = dlyap(gain.A_K, Sigma_w)
    dof = S.shape[0] if dof is None else int(dof)
    return Ellipsoid(np.zeros(S.shape[0]), gaussians.level(dof, p, level_rule) * S)


def constant_schedule(gain, Sigma_w, p_x, p_u, level_rule="gaussian", state_dof=None, input_dof=None):
    """Time-invariant schedule built from the stationary PRS."""
    Rx = stationary_prs(gain, Sigma_w, p_x, level_rule, state_dof)
    S = dlyap(gain.A_K, Sigma_w)
    K = gain.K
    dof_u = K.shape[0] if input_dof is None else int(input_dof)
    lev_u = gaussians.level(dof_u, check_probability(p_u, "p_u"), level_rule)
    Ru = Ellipsoid(np.zeros(K.shape[0]), lev_u * (K @ S @ K.T))
    Rf, KRf = terminal_prs([Rx], [Ru], K)
    return TighteningSchedule((Rx,), (Ru,), Rf, KRf, K)


def _absorb_center(region, origin):
    """Ellipsoid centered at ``origin`` containing ``region``.

    Uses ``(c + d)(c + d)^T <= (1 + 1/t) c c^T + (1 + t) d d^T`` with ``t``
    chosen to minimize the trace.
    """
    c = region.center - origin
    if not np.any(c):
        return Ellipsoid(origin, region.shape)
    tr = np.trace(region.shape)
    if tr <= 0.0:
        return Ellipsoid(origin, np.outer(c, c))
    t = np.linalg.norm(c) / np.sqrt(tr)
    return Ellipsoid(origin, (1.0 + t) * region.shape + (1.0 + 1.0 / t) * np.outer(c, c))


def _pinv_sqrt(S, rtol=1e-12):
    lam, U = np.linalg.eigh(0.5 * (S + S.T))
    keep = lam > rtol * max(lam.max(initial=0.0), 0.0)
    inv = np.zeros_like(lam)
    inv[keep] = 1.0 / np.sqrt(lam[keep])
    return (U * inv) @ U.T, U[:, ~keep]


def _scale_factor(reference, shapes):
    """Smallest ``alpha`` with ``alpha * reference >= M`` for every ``M`` in ``shapes``."""
    W, null = _pinv_sqrt(reference)
    alpha = 0.0
    for M in shapes:
        if null.size and np.abs(null.T @ M @ null).max(initial=0.0) > 1e-12 * max(1.0, np.abs(M).max()):
            return np.inf
        alpha = max(alpha, np.linalg.eigvalsh(W @ M @ W).max(initial=0.0))
    return alpha


def terminal_prs(state_sets, input_sets=None, K=None):
    """Scaled-shape outer bounds ``(R_f, K R_f)`` of the per-step sets.

    The reference shape is the state set with the largest trace; ``R_f``
    scales it by the smallest factor covering every state set and, through
    ``K``, every input set.  Off-center sets are first enlarged to sets
    centered at the origin.
    """
    if isinstance(state_sets, TighteningSchedule):
        schedule = state_sets
        state_sets, input_sets, K = schedule.state_sets, schedule.input_sets, schedule.K
    state_sets = list(state_sets)
    input_sets = list(input_sets or [])
    if not state_sets:
        raise EmptySchedule("no per-step sets to bound")
    n = state_sets[0].dim
    origin = np.zeros(n)
    xs = [_absorb_center(R, origin).shape for R in state_sets]
    ref = max(xs, key=np.trace)
    if not np.any(ref):
        Rf = Ellipsoid.point(origin)
    else:
        alpha = _scale_factor(ref, xs)
        if K is not None and input_sets:
            K = np.atleast_2d(K)
            us = [_absorb_center(R, np.zeros(K.shape[0])).shape for R in input_sets]
            alpha_u = _scale_factor(K @ ref @ K.T, us)
            if not np.isfinite(alpha_u):
                raise EmptySchedule("input sets are not covered by any scaling of K R_f")
            alpha = max(alpha, alpha_u)
        Rf = Ellipsoid(origin, alpha * ref)
    KRf = Rf.linear_image(K) if K is not None else None
    return Rf, KRf
