"""Input checks shared by the estimators."""

from __future__ import annotations

import numpy as np
from sklearn.utils.validation import check_array

from .exceptions import DimensionError, ValidationError


def check_images(X, n_features=None, *, name="X") -> np.ndarray:
    """Flatten an image batch to ``[n, features]`` float32 and check its range."""
    X = np.asarray(X)
    if X.ndim > 2:
        X = X.reshape(X.shape[0], -1)
    X = check_array(X, dtype=np.float32, ensure_min_samples=0)
    if n_features is not None and X.shape[1] != n_features:
        raise DimensionError(f"{name} has {X.shape[1]} features, expected {n_features}")
    return X


def check_unit_interval(X, name="X") -> None:
    if X.size and (X.min() < 0 or X.max() > 1):
        raise ValidationError(f"{name} values must lie in [0, 1]")


def check_labels(y, n, n_classes, *, name="y") -> np.ndarray:
    y = np.asarray(y)
    if y.shape != (n,):
        raise DimensionError(f"{name} must have shape ({n},), got {y.shape}")
    y = y.astype(np.int64)
    if n and (y.min() < 0 or y.max() >= n_classes):
        raise ValidationError(f"{name} must lie in [0, {n_classes})")
    return y


def one_hot(y, n_classes, dtype=np.float32) -> np.ndarray:
    return np.eye(n_classes, dtype=dtype)[np.asarray(y, dtype=np.int64)]


def glorot(rng: np.random.Generator, fan_in: int, fan_out: int, dtype=np.float32) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out)).astype(dtype)


def batches(rng: np.random.Generator, n: int, batch_size: int):
    order = rng.permutation(n)
    for start in range(0, n, batch_size):
        yield order[start:start + batch_size]
