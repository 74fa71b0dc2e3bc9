"""Independent reference computations used only by the tests."""

import math

import numpy as np


def normal_cdf(x):
    return 0.5 * (1.0 + math.erf(x / math.sqrt(2.0)))


def chi2_1_quantile(p):
    """``z^2`` with ``Phi(z) = (1 + p) / 2``, by bisection on the erf-based CDF."""
    target = 0.5 * (1.0 + p)
    lo, hi = 0.0, 40.0
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if normal_cdf(mid) < target:
            lo = mid
        else:
            hi = mid
    return (0.5 * (lo + hi)) ** 2


def lyapunov_series(A, Q, terms=4000):
    """``sum_j A^j Q (A^j)^T`` by direct summation."""
    S = np.zeros_like(Q)
    term = Q.copy()
    for _ in range(terms):
        S += term
        term = A @ term @ A.T
    return S


def matrix_powers(A, count):
    out = [np.eye(A.shape[0])]
    for _ in range(count):
        out.append(out[-1] @ A)
    return out


def dual_projected_gradient(H, g, A, b, n_eq, iters=200_000, tol=1e-8):
    """Solve ``min 1/2 y'Hy + g'y s.t. A[:n_eq] y = b[:n_eq], A[n_eq:] y <= b[n_eq:]``.

    Accelerated projected gradient ascent on the dual (multipliers of the
    inequalities projected onto the nonnegative orthant, equalities free)
    with adaptive restart.  Returns ``(y, dual_value)``; the dual value is a
    lower bound on the optimum that converges to it.
    """
    Hinv = np.linalg.inv(H)
    M = A @ Hinv @ A.T
    L = np.linalg.eigvalsh(M).max()
    c = A @ Hinv @ g + b

    def project(lam):
        lam = lam.copy()
        lam[n_eq:] = np.maximum(lam[n_eq:], 0.0)
        return lam

    def dual(lam):
        q = g + A.T @ lam
        return -0.5 * q @ Hinv @ q - b @ lam

    lam = np.zeros(A.shape[0])
    mom = lam.copy()
    t = 1.0
    best = dual(lam)
    it = 0
    for _ in range(iters):
        grad = -(M @ mom + c)  # gradient of the dual at mom
        new = project(mom + grad / L)
        val = dual(new)
        if val < best - 1e-15 * max(1.0, abs(best)) and t > 1.0:
            # adaptive restart (a plain gradient step from lam never decreases the dual)
            t, mom = 1.0, lam.copy()
            continue
        t_new = 0.5 * (1.0 + math.sqrt(1.0 + 4.0 * t * t))
        mom = new + (t - 1.0) / t_new * (new - lam)
        lam, t, best = new, t_new, val
        it += 1
        if it % 25 == 0:
            # stop on a certified duality gap and primal feasibility
            y = -Hinv @ (g + A.T @ lam)
            r = A @ y - b
            viol = max(np.abs(r[:n_eq]).max(initial=0.0), r[n_eq:].max(initial=0.0))
            primal = 0.5 * y @ H @ y + g @ y
            if viol < tol and abs(primal - best) < tol * max(1.0, abs(best)):
                break
    y = -Hinv @ (g + A.T @ lam)
    return y, best
