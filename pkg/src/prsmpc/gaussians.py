"""Gaussian disturbance sequences: conditioning, sampling and chi-squared levels."""

import math
from dataclasses import dataclass

import numpy as np
import scipy.linalg

from ._validation import as_vector, check_probability
from .exceptions import DimensionMismatch, WindowExceedsHorizon


@dataclass(frozen=True)
class GaussianSequence:
    """Stacked disturbance ``W = [w(0); ...; w(n_blocks-1)] ~ N(mean, cov)``.

    Attributes
    ----------
    mean : ndarray of shape (n_blocks * n_x,)
    cov : ndarray of shape (n_blocks * n_x, n_blocks * n_x)
    n_x : int
        Size of each block ``w(k)``.
    """

    mean: np.ndarray
    cov: np.ndarray
    n_x: int

    def __post_init__(self):
        mean = as_vector(self.mean, "mean")
        cov = np.asarray(self.cov, dtype=float)
        n_x = int(self.n_x)
        if n_x < 1 or mean.size % n_x:
            raise DimensionMismatch(f"mean length {mean.size} is not a multiple of n_x={n_x}")
        if cov.shape != (mean.size, mean.size):
            raise DimensionMismatch(f"cov has shape {cov.shape}, expected {(mean.size, mean.size)}")
        scale = max(1.0, np.abs(cov).max(initial=0.0))
        if np.abs(cov - cov.T).max(initial=0.0) > 1e-12 * scale:
            raise ValueError("cov is not symmetric")
        cov = 0.5 * (cov + cov.T)
        if cov.size and np.linalg.eigvalsh(cov).min() < -1e-10 * scale:
            raise ValueError("cov is not positive semi-definite")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "cov", cov)
        object.__setattr__(self, "n_x", n_x)

    @classmethod
    def iid(cls, cov, n_blocks, mean=None):
        """Independent, identically distributed blocks with covariance ``cov``."""
        cov = np.atleast_2d(np.asarray(cov, dtype=float))
        n = cov.shape[0]
        mu = np.zeros(n) if mean is None else as_vector(mean, "mean", n)
        return cls(np.tile(mu, n_blocks), np.kron(np.eye(n_blocks), cov), n)

    @property
    def n_blocks(self):
        return self.mean.size // self.n_x

    @property
    def horizon(self):
        """Index of the last block, i.e. ``n_blocks - 1``."""
        return self.n_blocks - 1

    def block(self, k):
        sl = slice(k * self.n_x, (k + 1) * self.n_x)
        return self.mean[sl], self.cov[sl, sl]

    def is_block_diagonal(self, tol=0.0):
        n, m = self.n_x, self.n_blocks
        blocks = self.cov.reshape(m, n, m, n)
        mask = ~np.eye(m, dtype=bool)
        return bool(np.abs(blocks.transpose(0, 2, 1, 3)[mask]).max(initial=0.0) <= tol)


@dataclass(frozen=True)
class ConditionalWindow:
    """Distribution of ``[w(k); ...; w(k+N)]`` given ``w(0..k-1)``.

    ``mean`` has a leading batch axis when several observed prefixes were
    conditioned on at once; the covariance never depends on the observed
    values.
    """

    mean: np.ndarray
    cov: np.ndarray
    n_x: int
    start: int

    @property
    def length(self):
        return self.cov.shape[0] // self.n_x


def condition(seq, observed, window):
    """Condition ``seq`` on a realized prefix and return the next ``window + 1`` blocks.

    Parameters
    ----------
    seq : GaussianSequence
    observed : array_like of shape (k * n_x,) or (batch, k * n_x)
        Realized disturbances ``w(0), ..., w(k-1)``.
    window : int
        Prediction horizon ``N``; the result covers ``w(k), ..., w(k+N)``.
    """
    observed = np.asarray(observed, dtype=float)
    n = seq.n_x
    if observed.shape[-1] % n:
        raise DimensionMismatch(f"observed length {observed.shape[-1]} is not a multiple of {n}")
    k = observed.shape[-1] // n
    window = int(window)
    if window < 0 or k + window + 1 > seq.n_blocks:
        raise WindowExceedsHorizon(
            f"window w({k})..w({k + window}) exceeds the sequence end w({seq.n_blocks - 1})")
    a = slice(0, k * n)
    b = slice(k * n, (k + window + 1) * n)
    mu_b = seq.mean[b]
    S_bb = seq.cov[b, b]
    if k == 0:
        mean = np.broadcast_to(mu_b, observed.shape[:-1] + mu_b.shape).copy()
        return ConditionalWindow(mean, S_bb.copy(), n, 0)
    gain = _conditioning_gain(seq.cov[a, a], seq.cov[b, a])
    mean = mu_b + (observed - seq.mean[a]) @ gain.T
    cov = S_bb - gain @ seq.cov[a, b]
    return ConditionalWindow(mean, 0.5 * (cov + cov.T), n, k)


def _conditioning_gain(S_aa, S_ba):
    """Return ``S_ba S_aa^{-1}``, regularizing a numerically singular ``S_aa``."""
    S_aa = 0.5 * (S_aa + S_aa.T)
    lam_min = np.linalg.eigvalsh(S_aa)[0]
    if lam_min < 1e-12:
        S_aa = S_aa + 1e-10 * np.trace(S_aa) / S_aa.shape[0] * np.eye(S_aa.shape[0])
    return scipy.linalg.solve(S_aa, S_ba.T, assume_a="pos").T


def psd_sqrt(S):
    """Symmetric square root with negative eigenvalues clamped to zero."""
    lam, U = np.linalg.eigh(0.5 * (S + S.T))
    return (U * np.sqrt(np.clip(lam, 0.0, None))) @ U.T


def sample(seq, rng_seed, count):
    """Draw ``count`` stacked realizations, shape ``(count, n_blocks * n_x)``.

    Deterministic for a given seed.
    """
    count = int(count)
    if count < 1:
        raise ValueError("count must be >= 1")
    rng = np.random.default_rng(rng_seed)
    root = psd_sqrt(seq.cov)
    return seq.mean + rng.standard_normal((count, seq.mean.size)) @ root.T


# -- chi-squared levels ------------------------------------------------------

_GAMMA_EPS = 1e-16
_GAMMA_MAX_ITER = 10_000


def _gamma_series(a, x):
    term = 1.0 / a
    total = term
    ap = a
    for _ in range(_GAMMA_MAX_ITER):
        ap += 1.0
        term *= x / ap
        total += term
        if abs(term) < abs(total) * _GAMMA_EPS:
            break
    return total * math.exp(-x + a * math.log(x) - math.lgamma(a))


def _gamma_continued_fraction(a, x):
    # modified Lentz evaluation of the upper incomplete gamma continued fraction
    tiny = 1e-300
    b = x + 1.0 - a
    c = 1.0 / tiny
    d = 1.0 / b
    h = d
    for i in range(1, _GAMMA_MAX_ITER):
        an = -i * (i - a)
        b += 2.0
        d = an * d + b
        if abs(d) < tiny:
            d = tiny
        c = b + an / c
        if abs(c) < tiny:
            c = tiny
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < _GAMMA_EPS:
            break
    return math.exp(-x + a * math.log(x) - math.lgamma(a)) * h


def regularized_gamma_p(a, x):
    """Regularized lower incomplete gamma function ``P(a, x)``."""
    if x <= 0.0:
        return 0.0
    if x < a + 1.0:
        return _gamma_series(a, x)
    return 1.0 - _gamma_continued_fraction(a, x)


def chi2_cdf(x, dof):
    return regularized_gamma_p(0.5 * dof, 0.5 * x)


def chi2_quantile(dof, p):
    """Quantile of the chi-squared distribution with ``dof`` degrees of freedom.

    Bisection on :func:`chi2_cdf` over ``[0, dof + 40 sqrt(dof)]``.
    """
    p = check_probability(p)
    dof = int(dof)
    if dof < 1:
        raise ValueError(f"dof must be >= 1, got {dof}")
    lo, hi = 0.0, dof + 40.0 * math.sqrt(dof)
    while chi2_cdf(hi, dof) < p:
        hi *= 2.0
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if chi2_cdf(mid, dof) < p:
            lo = mid
        else:
            hi = mid
        if hi - lo <= 1e-13 * max(1.0, hi):
            break
    return 0.5 * (lo + hi)


def chebyshev_level(dim, p):
    """Scaling ``dim / (1 - p)`` giving distribution-free coverage ``p``."""
    p = check_probability(p)
    return dim / (1.0 - p)


def level(dim, p, rule):
    """Ellipsoid scaling for ``rule`` in ``{"gaussian", "chebyshev"}``."""
    if rule == "gaussian":
        return chi2_quantile(dim, p)
    if rule == "chebyshev":
        return chebyshev_level(dim, p)
    raise ValueError(f"unknown level rule {rule!r}")
