"""Linear time-invariant models, Lyapunov solves and stacked prediction matrices.

Everything here is dense; the systems of interest have at most ten states.
"""

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from ._validation import as_matrix, as_psd, as_square, as_vector
from .exceptions import DimensionMismatch, IndexOutOfRange, NotStable

#: Margin below one that a spectral radius must respect to count as stable.
STABILITY_MARGIN = 1e-9


def spectral_radius(A):
    A = as_square(A, "A")
    return float(np.max(np.abs(np.linalg.eigvals(A)))) if A.size else 0.0


def check_stable(A, name="A_K"):
    rho = spectral_radius(A)
    if rho >= 1.0 - STABILITY_MARGIN:
        raise NotStable(f"{name} has spectral radius {rho:.6g} >= 1 - {STABILITY_MARGIN:g}")
    return rho


@dataclass(frozen=True)
class LtiModel:
    """Discrete-time model ``x+ = A x + B u + affine + w``.

    ``affine`` is a constant offset (zero by default), e.g. the effect of
    the mean outside temperature on a building.
    """

    A: np.ndarray
    B: np.ndarray
    affine: np.ndarray = None

    def __post_init__(self):
        A = as_square(self.A, "A")
        B = as_matrix(self.B, "B", (A.shape[0], None))
        affine = np.zeros(A.shape[0]) if self.affine is None else as_vector(self.affine, "affine", A.shape[0])
        if A.shape[0] < 1 or B.shape[1] < 1:
            raise DimensionMismatch("need at least one state and one input")
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "B", B)
        object.__setattr__(self, "affine", affine)

    @property
    def n_x(self):
        return self.A.shape[0]

    @property
    def n_u(self):
        return self.B.shape[1]

    def step(self, x, u, w=0.0):
        """Propagate one step; broadcasts over a leading batch axis."""
        x = np.asarray(x, dtype=float)
        u = np.asarray(u, dtype=float)
        return x @ self.A.T + u @ self.B.T + self.affine + w


@dataclass(frozen=True)
class ClosedLoopGain:
    """Stabilizing error feedback ``u = K e`` for a given model."""

    K: np.ndarray
    A_K: np.ndarray = field(repr=False)

    @classmethod
    def from_model(cls, model, K):
        K = as_matrix(K, "K", (model.n_u, model.n_x))
        return cls(K=K, A_K=model.A + model.B @ K)

    def __post_init__(self):
        check_stable(self.A_K)

    @property
    def n_x(self):
        return self.A_K.shape[0]


def lqr_gain(model, Q, R):
    """Infinite-horizon discrete LQR gain with the ``u = K x`` sign convention."""
    Q = as_psd(Q, "Q", model.n_x)
    R = as_psd(R, "R", model.n_u)
    X = scipy.linalg.solve_discrete_are(model.A, model.B, Q, R)
    BtX = model.B.T @ X
    return -np.linalg.solve(R + BtX @ model.B, BtX @ model.A)


def dlyap(A_K, Q):
    """Solve ``Sigma = A_K Sigma A_K^T + Q`` for a Schur-stable ``A_K``.

    Uses the Kronecker form ``(I - A_K (x) A_K) vec(Sigma) = vec(Q)`` with a
    single step of iterative refinement.
    """
    A_K = as_square(A_K, "A_K")
    n = A_K.shape[0]
    Q = as_psd(Q, "Q", n, tol=1e-8)
    check_stable(A_K)
    L = np.eye(n * n) - np.kron(A_K, A_K)
    lu = scipy.linalg.lu_factor(L)
    q = Q.ravel()
    s = scipy.linalg.lu_solve(lu, q)
    s += scipy.linalg.lu_solve(lu, q - L @ s)
    S = s.reshape(n, n)
    return 0.5 * (S + S.T)


@dataclass(frozen=True)
class PredictionStack:
    """Stacked maps from ``e(0)`` and ``W`` to ``E = [e(1); ...; e(N)]``.

    Block ``i`` of ``A0`` is ``A_K^(i+1)``; block ``(i, j)`` of ``Abar`` is
    ``A_K^(i-j)`` below the diagonal, the identity on it and zero above.
    """

    A0: np.ndarray
    Abar: np.ndarray
    n_x: int
    horizon: int


def prediction_stack(A_K, horizon):
    A_K = as_square(A_K, "A_K")
    horizon = int(horizon)
    if horizon < 1:
        raise DimensionMismatch(f"horizon must be >= 1, got {horizon}")
    n = A_K.shape[0]
    powers = [np.eye(n)]
    for _ in range(horizon):
        powers.append(powers[-1] @ A_K)
    A0 = np.vstack(powers[1:])
    Abar = np.zeros((horizon * n, horizon * n))
    for i in range(horizon):
        for j in range(i + 1):
            Abar[i * n:(i + 1) * n, j * n:(j + 1) * n] = powers[i - j]
    return PredictionStack(A0=A0, Abar=Abar, n_x=n, horizon=horizon)


def sequence_moments(stack, e0, dist):
    """Mean and covariance of the stacked error sequence ``E``.

    Only the first ``stack.horizon`` disturbance blocks of ``dist`` enter.
    ``e0`` may carry a leading batch axis, in which case the mean does too.
    """
    n, N = stack.n_x, stack.horizon
    e0 = np.asarray(e0, dtype=float)
    if e0.shape[-1] != n:
        raise DimensionMismatch(f"e0 has trailing size {e0.shape[-1]}, expected {n}")
    if dist.n_x != n:
        raise DimensionMismatch(f"disturbance block size {dist.n_x} != {n}")
    if dist.n_blocks < N:
        raise DimensionMismatch(f"disturbance covers {dist.n_blocks} steps, need {N}")
    mu = dist.mean[:N * n]
    Sigma = dist.cov[:N * n, :N * n]
    mean = e0 @ stack.A0.T + stack.Abar @ mu
    cov = stack.Abar @ Sigma @ stack.Abar.T
    return mean, 0.5 * (cov + cov.T)


def marginal(mean, cov, step, block):
    """Extract the ``step``-th (1-based) block of a stacked mean and covariance."""
    mean = np.asarray(mean, dtype=float)
    cov = np.asarray(cov, dtype=float)
    block = int(block)
    n_steps = cov.shape[0] // block
    if not 1 <= step <= n_steps:
        raise IndexOutOfRange(f"step {step} outside 1..{n_steps}")
    sl = slice((step - 1) * block, step * block)
    return mean[..., sl], cov[sl, sl]


def error_moments(A_K, dist, n_steps, e0=None):
    """Per-step moments of ``e(k+1) = A_K e(k) + w(k)`` for ``k = 0..n_steps``.

    Returns ``(means, covs)`` with shapes ``(n_steps+1, n)`` and
    ``(n_steps+1, n, n)``; step 0 is the deterministic ``e0``.  Computed by
    the block recursion, which equals the marginals of :func:`sequence_moments`
    without forming the full stack.
    """
    A_K = as_square(A_K, "A_K")
    n = A_K.shape[0]
    e0 = np.zeros(n) if e0 is None else as_vector(e0, "e0", n)
    if dist.n_blocks < n_steps:
        raise DimensionMismatch(f"disturbance covers {dist.n_blocks} steps, need {n_steps}")
    means = np.zeros((n_steps + 1, n))
    covs = np.zeros((n_steps + 1, n, n))
    means[0] = e0
    # cross[j] = cov(e(k), w(j)) for the current k, j >= k
    W = dist.cov[:n_steps * n, :n_steps * n].reshape(n_steps, n, n_steps, n).transpose(0, 2, 1, 3)
    cross = np.zeros((n_steps, n, n))
    for k in range(n_steps):
        mu_w = dist.mean[k * n:(k + 1) * n]
        means[k + 1] = A_K @ means[k] + mu_w
        P = covs[k]
        C = cross[k]
        cov = A_K @ P @ A_K.T + A_K @ C + C.T @ A_K.T + W[k, k]
        covs[k + 1] = 0.5 * (cov + cov.T)
        # cov(e(k+1), w(j)) = A_K cov(e(k), w(j)) + cov(w(k), w(j))
        cross[k + 1:] = np.einsum("ab,jbc->jac", A_K, cross[k + 1:]) + W[k, k + 1:]
    return means, covs
