"""Input validation helpers used at module boundaries."""

import numbers

import numpy as np
import scipy.sparse as sp

from .errors import InvalidArgumentError


def check_positive_int(value, name, minimum=1):
    if isinstance(value, bool) or not isinstance(value, numbers.Integral):
        raise InvalidArgumentError(f"{name} must be an integer, got {value!r}")
    if value < minimum:
        raise InvalidArgumentError(f"{name} must be >= {minimum}, got {value}")
    return int(value)


def check_open_unit(value, name):
    """Return ``value`` as float after checking ``0 < value < 1``."""
    value = float(value)
    if not 0.0 < value < 1.0:
        raise InvalidArgumentError(f"{name} must lie in (0, 1), got {value}")
    return value


def check_vector(x, name, size=None):
    x = np.asarray(x, dtype=float)
    if x.ndim != 1:
        raise InvalidArgumentError(f"{name} must be one-dimensional, got shape {x.shape}")
    if size is not None and x.shape[0] != size:
        raise InvalidArgumentError(f"{name} has length {x.shape[0]}, expected {size}")
    if not np.all(np.isfinite(x)):
        raise InvalidArgumentError(f"{name} contains non-finite entries")
    return x


def check_matrix(A, name, square=False):
    if not sp.issparse(A):
        raise InvalidArgumentError(f"{name} must be a sparse matrix, got {type(A).__name__}")
    if square and A.shape[0] != A.shape[1]:
        raise InvalidArgumentError(f"{name} must be square, got shape {A.shape}")
    return A.tocsr()
