"""Input validation for array-facing entry points."""

from __future__ import annotations

import numpy as np

from .config import INPUT_DIVISOR


def check_image_batch(X, channels: int = 3) -> np.ndarray:
    """Coerce to a float32 N x channels x H x W batch; a single CHW image gains
    a batch axis. Values must already sit in [0, 1]."""
    X = np.asarray(X, dtype=np.float32)
    if X.ndim == 3:
        X = X[None]
    if X.ndim != 4 or X.shape[1] != channels:
        raise ValueError(f"images must be N x {channels} x H x W, got shape {X.shape}")
    if X.size and (X.min() < 0.0 or X.max() > 1.0):
        raise ValueError("image values must lie in [0, 1]")
    return X


def check_mask_batch(y, n: int | None = None) -> np.ndarray:
    """Coerce binary masks to float32 N x 1 x H x W.

    Rank-3 input is read as N x H x W (a stack of single-channel masks).
    """
    y = np.asarray(y, dtype=np.float32)
    if y.ndim == 2:
        y = y[None]
    if y.ndim == 3:
        y = y[:, None]
    if y.ndim != 4 or y.shape[1] != 1:
        raise ValueError(f"masks must be N x 1 x H x W, got shape {y.shape}")
    if not np.all((y == 0.0) | (y == 1.0)):
        raise ValueError("mask values must be 0 or 1")
    if n is not None and y.shape[0] != n:
        raise ValueError(f"{y.shape[0]} masks for {n} images")
    return y


def check_divisible(h: int, w: int, divisor: int = INPUT_DIVISOR) -> None:
    if h % divisor or w % divisor:
        raise ValueError(f"spatial extents must be divisible by {divisor}, got {h}x{w}")
