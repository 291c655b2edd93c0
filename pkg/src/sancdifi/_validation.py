"""Input validation helpers shared by the estimators."""

import numpy as np

from .core import ParameterError


def check_images(X, *, allow_single=True, ensure_min_samples=0, dtype=np.float64):
    """Return ``X`` as a float ``(B, H, W, C)`` array.

    A single ``(H, W, C)`` image is promoted to a batch of one when
    ``allow_single`` is set.  Non-finite values are rejected.
    """
    X = np.asarray(X, dtype=dtype)
    if X.ndim == 3 and allow_single:
        X = X[None]
    if X.ndim != 4:
        raise ParameterError(f"expected images shaped (B, H, W, C), got {X.shape}")
    if X.shape[0] < ensure_min_samples:
        raise ParameterError(f"need at least {ensure_min_samples} images, got {X.shape[0]}")
    if X.size and not np.all(np.isfinite(X)):
        raise ParameterError("images contain NaN or infinity")
    return X


def check_labels(y, n_samples, n_classes=None):
    y = np.asarray(y)
    if y.ndim != 1 or y.shape[0] != n_samples:
        raise ParameterError(f"labels must be 1-d with {n_samples} entries, got shape {y.shape}")
    if y.size and (not np.issubdtype(y.dtype, np.integer) or y.min() < 0):
        raise ParameterError("labels must be non-negative integers")
    if n_classes is not None and y.size and y.max() >= n_classes:
        raise ParameterError(f"label {y.max()} out of range for {n_classes} classes")
    return y.astype(np.int64)


def check_mask(A, image_shape):
    """Return a ``(B, H, W, 1)`` float mask of exact 0/1 values broadcastable over ``image_shape``.

    Accepts ``(H, W)``, ``(H, W, 1)``, ``(B, H, W)`` or ``(B, H, W, 1)``.
    """
    A = np.asarray(A)
    b, h, w = image_shape[0], image_shape[1], image_shape[2]
    if A.ndim == 2:
        A = A[None, :, :, None]
    elif A.ndim == 3:
        A = A[None] if A.shape == (h, w, 1) else A[:, :, :, None]
    if A.ndim != 4 or A.shape[1:3] != (h, w) or A.shape[3] != 1 or A.shape[0] not in (1, b):
        raise ParameterError(f"mask shape {A.shape} does not match images {tuple(image_shape)}")
    if A.size and not np.all((A == 0) | (A == 1)):
        raise ParameterError("mask values must be exactly 0 or 1")
    return np.broadcast_to(A.astype(np.float64), (b, h, w, 1))


def check_fraction(value, name, *, open_low=False, open_high=False):
    lo_ok = value > 0 if open_low else value >= 0
    hi_ok = value < 1 if open_high else value <= 1
    if not (lo_ok and hi_ok):
        raise ParameterError(f"{name} must lie in the unit interval, got {value}")
    return float(value)
