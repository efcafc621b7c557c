"""Input validation helpers shared by the estimators."""
import numpy as np

from .exceptions import ContractViolation

IMAGE_SIZE = 64


def check_images(X, name="X", allow_single=False):
    """Return ``X`` as a float32 array of shape (n, 64, 64) with values in [0, 1]."""
    X = np.asarray(X, dtype=np.float32)
    if allow_single and X.ndim == 2:
        X = X[None]
    if X.ndim == 4 and X.shape[1] == 1:
        X = X[:, 0]
    if X.ndim != 3 or X.shape[1:] != (IMAGE_SIZE, IMAGE_SIZE):
        raise ContractViolation(f"{name} must have shape (n, {IMAGE_SIZE}, {IMAGE_SIZE}), got {X.shape}")
    if X.shape[0] == 0:
        raise ContractViolation(f"{name} is empty")
    if not np.all(np.isfinite(X)):
        raise ContractViolation(f"{name} contains non-finite values")
    if X.min() < 0.0 or X.max() > 1.0:
        raise ContractViolation(f"{name} intensities must lie in [0, 1]")
    return X


def check_labels(y, n, name="y"):
    y = np.asarray(y)
    if y.ndim != 1 or y.shape[0] != n:
        raise ContractViolation(f"{name} must be a 1-D array of length {n}, got shape {y.shape}")
    if not np.issubdtype(y.dtype, np.integer):
        if not np.all(np.equal(np.mod(y, 1), 0)):
            raise ContractViolation(f"{name} must hold integer class ids")
        y = y.astype(np.int64)
    if y.min() < 0:
        raise ContractViolation(f"{name} must be non-negative")
    return y.astype(np.int64)


def check_probability(value, name):
    if not 0.0 <= value <= 1.0:
        raise ContractViolation(f"{name} must lie in [0, 1], got {value}")


def check_positive(value, name, strict=True):
    if strict and not value > 0:
        raise ContractViolation(f"{name} must be positive, got {value}")
    if not strict and not value >= 0:
        raise ContractViolation(f"{name} must be non-negative, got {value}")
