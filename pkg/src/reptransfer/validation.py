"""Input checks shared by the estimators and the CLI."""
from __future__ import annotations

import numpy as np

from .exceptions import InputError
from .layers import IGNORE_LABEL


def check_images(X, channels: int = 3, multiple_of: int = 8, dtype=np.float32) -> np.ndarray:
    """Return X as a contiguous (N, C, H, W) float array with values in [0, 1]."""
    X = np.asarray(X)
    if X.ndim == 3:
        X = X[None]
    if X.ndim != 4 or X.shape[1] != channels:
        raise InputError(f"expected images shaped (N, {channels}, H, W), got {X.shape}")
    if X.shape[0] == 0:
        raise InputError("no images given")
    if X.shape[2] % multiple_of or X.shape[3] % multiple_of:
        raise InputError(f"image height and width must be multiples of {multiple_of}, got {X.shape[2:]}")
    if X.dtype == np.uint8:
        X = X.astype(dtype) / dtype(255)
    X = np.ascontiguousarray(X, dtype=dtype)
    if not np.isfinite(X).all() or X.min() < 0 or X.max() > 1:
        raise InputError("image values must be finite and lie in [0, 1]")
    return X


def check_label_maps(y, n_classes: int, shape: tuple[int, ...] | None = None) -> np.ndarray:
    """Return y as (N, H, W) int64, values in [0, n_classes) or IGNORE_LABEL."""
    y = np.asarray(y)
    if y.ndim == 2:
        y = y[None]
    if y.ndim != 3:
        raise InputError(f"expected label maps shaped (N, H, W), got {y.shape}")
    if shape is not None and y.shape != tuple(shape):
        raise InputError(f"label maps {y.shape} do not match images {tuple(shape)}")
    if not np.issubdtype(y.dtype, np.integer):
        raise InputError(f"label maps must be integers, got {y.dtype}")
    y = y.astype(np.int64)
    bad = (y != IGNORE_LABEL) & ((y < 0) | (y >= n_classes))
    if bad.any():
        raise InputError(f"labels must be in [0, {n_classes}) or {IGNORE_LABEL}")
    return y


def check_paired(X, X_source) -> tuple[np.ndarray, np.ndarray]:
    X = check_images(X)
    X_source = check_images(X_source)
    if X.shape != X_source.shape:
        raise InputError(f"target images {X.shape} and source images {X_source.shape} are not aligned")
    return X, X_source
