"""Input validation helpers for the estimator API."""

from __future__ import annotations

import numpy as np

from .data import IMAGE_SIZE


def check_images(X, size: int | None = None, min_size: int = 64) -> np.ndarray:
    """Validate a batch of images: float32 (N, 3, H, W), finite, H=W>=min_size."""
    X = np.asarray(X, dtype=np.float32)
    if X.ndim != 4 or X.shape[1] != 3:
        raise ValueError(f"expected images of shape (N, 3, H, W), got {X.shape}")
    _, _, h, w = X.shape
    if size is not None and (h, w) != (size, size):
        raise ValueError(f"expected {size}x{size} images, got {h}x{w}")
    if min(h, w) < min_size:
        raise ValueError(f"images must be at least {min_size}x{min_size}, got {h}x{w}")
    if not np.isfinite(X).all():
        raise ValueError("images contain non-finite values")
    return X


def check_labels(y, n_samples: int) -> tuple[np.ndarray, np.ndarray]:
    """Encode labels to 0..C-1; returns (encoded, classes)."""
    y = np.asarray(y)
    if y.ndim != 1 or y.shape[0] != n_samples:
        raise ValueError(f"labels must be 1-d with {n_samples} entries, got shape {y.shape}")
    classes, encoded = np.unique(y, return_inverse=True)
    if classes.shape[0] < 2:
        raise ValueError("need at least two classes to fit")
    return encoded.astype(np.int64), classes


def check_magnifications(mags, n_samples: int) -> np.ndarray | None:
    if mags is None:
        return None
    mags = np.asarray(mags, dtype=np.int64)
    if mags.ndim != 1 or mags.shape[0] != n_samples:
        raise ValueError("magnifications must be 1-d and match the sample count")
    return mags


def check_is_fitted(estimator, attribute: str = "members_") -> None:
    if not hasattr(estimator, attribute):
        raise RuntimeError(
            f"{type(estimator).__name__} is not fitted yet; call fit(X, y) first"
        )


__all__ = ["check_images", "check_labels", "check_magnifications", "check_is_fitted", "IMAGE_SIZE"]
