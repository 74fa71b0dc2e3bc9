"""Input validation helpers in the spirit of ``sklearn.utils.validation``."""

import numpy as np

from .exceptions import DimensionMismatch, InvalidProbability


def as_matrix(a, name="array", shape=None):
    """Return ``a`` as a 2-D float array, optionally checking its shape.

    ``None`` entries in ``shape`` are wildcards.
    """
    arr = np.atleast_2d(np.asarray(a, dtype=float))
    if arr.ndim != 2:
        raise DimensionMismatch(f"{name} must be 2-D, got shape {arr.shape}")
    if shape is not None:
        for got, want in zip(arr.shape, shape):
            if want is not None and got != want:
                raise DimensionMismatch(f"{name} has shape {arr.shape}, expected {shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite entries")
    return arr


def as_vector(a, name="vector", size=None):
    arr = np.atleast_1d(np.asarray(a, dtype=float)).ravel()
    if size is not None and arr.size != size:
        raise DimensionMismatch(f"{name} has length {arr.size}, expected {size}")
    return arr


def as_square(a, name="matrix", n=None):
    arr = as_matrix(a, name)
    if arr.shape[0] != arr.shape[1]:
        raise DimensionMismatch(f"{name} must be square, got shape {arr.shape}")
    if n is not None and arr.shape[0] != n:
        raise DimensionMismatch(f"{name} must be {n}x{n}, got shape {arr.shape}")
    return arr


def as_psd(a, name="matrix", n=None, tol=1e-10):
    """Validate a symmetric positive semi-definite matrix and symmetrize it."""
    arr = as_square(a, name, n)
    scale = max(1.0, np.abs(arr).max(initial=0.0))
    if np.abs(arr - arr.T).max(initial=0.0) > tol * scale:
        raise ValueError(f"{name} is not symmetric")
    arr = 0.5 * (arr + arr.T)
    if arr.size and np.linalg.eigvalsh(arr).min() < -tol * scale:
        raise ValueError(f"{name} is not positive semi-definite")
    return arr


def check_probability(p, name="p"):
    p = float(p)
    if not 0.0 < p < 1.0:
        raise InvalidProbability(f"{name} must lie in (0, 1), got {p}")
    return p
