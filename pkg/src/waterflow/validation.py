"""Input validation helpers used by the public API and the estimator."""

from __future__ import annotations

import numpy as np

from .errors import ContractError, DomainError, ShapeError


def check_array_rank(x: np.ndarray, rank, name: str = "array") -> np.ndarray:
    x = np.asarray(x)
    ranks = (rank,) if isinstance(rank, int) else tuple(rank)
    if x.ndim not in ranks:
        raise ShapeError(f"{name}: expected rank {ranks}, got shape {x.shape}")
    return x


def check_same_spatial(a: np.ndarray, b: np.ndarray, name_a: str = "a", name_b: str = "b") -> None:
    if a.shape[-2:] != b.shape[-2:]:
        raise ShapeError(
            f"{name_a} spatial dims {a.shape[-2:]} != {name_b} spatial dims {b.shape[-2:]}"
        )


def check_in_unit_range(x: np.ndarray, name: str = "array", tol: float = 0.0) -> None:
    lo, hi = float(np.min(x)), float(np.max(x))
    if lo < -tol or hi > 1.0 + tol:
        raise DomainError(f"{name}: values must lie in [0, 1], got [{lo:.4g}, {hi:.4g}]")


def check_finite(x: np.ndarray, name: str = "array") -> None:
    if not np.all(np.isfinite(x)):
        raise ContractError(f"{name}: contains non-finite values")


def check_binary(x: np.ndarray, name: str = "mask") -> np.ndarray:
    """Require every value to be exactly 0 or 1 and return a float64 view."""
    x = np.asarray(x, dtype=np.float64)
    if not np.all((x == 0.0) | (x == 1.0)):
        raise ContractError(f"{name}: values must be exactly 0 or 1")
    return x


def check_image_batch(X, image_size: int | None = None, name: str = "X") -> np.ndarray:
    """Validate a batch of channel-first RGB images shaped (N, 3, H, W) in [0, 1]."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 3 and X.shape[0] == 3:
        X = X[None]
    check_array_rank(X, 4, name)
    if X.shape[1] != 3:
        raise ShapeError(f"{name}: expected 3 channels, got shape {X.shape}")
    check_finite(X, name)
    check_in_unit_range(X, name, tol=1e-9)
    if image_size is not None and X.shape[-2:] != (image_size, image_size):
        raise ShapeError(
            f"{name}: expected {image_size}x{image_size} images, got {X.shape[-2]}x{X.shape[-1]}"
        )
    return X


def check_mask_batch(y, image_size: int | None = None, name: str = "y") -> np.ndarray:
    """Validate a batch of binary masks; accepts (N, H, W) or (N, 1, H, W)."""
    y = np.asarray(y, dtype=np.float64)
    if y.ndim == 2:
        y = y[None]
    if y.ndim == 4:
        if y.shape[1] != 1:
            raise ShapeError(f"{name}: expected a single mask channel, got shape {y.shape}")
        y = y[:, 0]
    check_array_rank(y, 3, name)
    y = check_binary(y, name)
    if image_size is not None and y.shape[-2:] != (image_size, image_size):
        raise ShapeError(
            f"{name}: expected {image_size}x{image_size} masks, got {y.shape[-2]}x{y.shape[-1]}"
        )
    return y


def check_depth_batch(z, like: np.ndarray, name: str = "depth") -> np.ndarray:
    """Validate per-image depth maps shaped (N, H, W); must be finite and >= 0."""
    z = np.asarray(z, dtype=np.float64)
    if z.ndim == 2:
        z = z[None]
    if z.ndim == 4 and z.shape[1] == 1:
        z = z[:, 0]
    check_array_rank(z, 3, name)
    if z.shape[0] != like.shape[0] or z.shape[-2:] != like.shape[-2:]:
        raise ShapeError(f"{name}: shape {z.shape} does not match images {like.shape}")
    check_finite(z, name)
    if np.min(z) < 0:
        raise DomainError(f"{name}: depth must be non-negative")
    return z
