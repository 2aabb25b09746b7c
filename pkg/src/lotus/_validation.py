"""Input checks shared by the estimator facade."""

from __future__ import annotations

import numpy as np

from lotus.errors import DimensionError, InputError


def check_images(X, cfg=None, dtype=np.float32) -> np.ndarray:
    """Return ``X`` as a finite ``[N, C, H, W]`` float array.

    A single ``[C, H, W]`` image is promoted to a batch of one. When ``cfg``
    is given the channel count and spatial size must match it.
    """
    arr = np.asarray(X)
    if arr.dtype == object or not np.issubdtype(arr.dtype, np.number):
        raise InputError(f"images must be numeric, got dtype {arr.dtype}")
    if arr.ndim == 3:
        arr = arr[None]
    if arr.ndim != 4:
        raise DimensionError(f"images must be [N, C, H, W], got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise InputError("images contain NaN or inf")
    if cfg is not None:
        expected = (cfg.channels, cfg.image_size, cfg.image_size)
        if arr.shape[1:] != expected:
            raise DimensionError(f"images must be [N, {expected[0]}, {expected[1]}, {expected[2]}], "
                                 f"got {arr.shape}")
    return arr.astype(dtype, copy=False)


def check_labels(y, n: int, num_classes: int) -> np.ndarray:
    arr = np.asarray(y)
    if arr.ndim != 1 or len(arr) != n:
        raise DimensionError(f"expected {n} labels, got shape {arr.shape}")
    if len(arr) and not np.all(np.equal(np.mod(arr, 1), 0)):
        raise InputError("labels must be integers")
    arr = arr.astype(np.int64)
    if len(arr) and (arr.min() < 0 or arr.max() >= num_classes):
        raise InputError(f"labels must lie in [0, {num_classes})")
    return arr


def check_fraction(value, name: str, *, upper_inclusive: bool = False) -> float:
    v = float(value)
    ok = 0.0 <= v <= 1.0 if upper_inclusive else 0.0 <= v < 1.0
    if not ok:
        bracket = "]" if upper_inclusive else ")"
        raise InputError(f"{name} must be in [0, 1{bracket}, got {value}")
    return v
