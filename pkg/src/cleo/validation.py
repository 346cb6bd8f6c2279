"""Input validation helpers shared by the estimator and file readers."""

from __future__ import annotations

import numpy as np


def as_feature_matrix(X, expected_dim: int | None = None) -> np.ndarray:
    """Coerce to a finite float64 matrix of shape (n_pixels, d_in)."""
    arr = np.asarray(X, dtype=np.float64)
    if arr.ndim == 1:
        arr = arr.reshape(1, -1)
    if arr.ndim != 2:
        raise ValueError(f"features must be 2-d, got shape {arr.shape}")
    if expected_dim is not None and arr.shape[1] != expected_dim:
        raise ValueError(
            f"feature dimension mismatch: expected {expected_dim}, "
            f"got {arr.shape[1]}"
        )
    if not np.all(np.isfinite(arr)):
        raise ValueError("features contain non-finite values")
    return arr


def as_label_vector(y, n_rows: int | None = None) -> np.ndarray:
    arr = np.asarray(y)
    if arr.ndim != 1:
        raise ValueError(f"labels must be 1-d, got shape {arr.shape}")
    if not np.issubdtype(arr.dtype, np.integer):
        cast = arr.astype(np.int64)
        if not np.array_equal(cast, arr):
            raise ValueError("labels must be integers")
        arr = cast
    if n_rows is not None and arr.shape[0] != n_rows:
        raise ValueError(
            f"got {arr.shape[0]} labels for {n_rows} feature rows"
        )
    return arr.astype(np.int64, copy=False)


def encode_labels(y: np.ndarray, class_ids) -> np.ndarray:
    """Map class ids to positions in a label space; unknown ids are an error."""
    class_ids = list(class_ids)
    lookup = np.full(max(int(np.max(y)), max(class_ids)) + 1, -1, dtype=np.int64)
    for pos, cid in enumerate(class_ids):
        lookup[cid] = pos
    if y.size and y.min() < 0:
        raise ValueError("negative label id")
    encoded = lookup[y]
    if np.any(encoded < 0):
        bad = int(y[np.argmax(encoded < 0)])
        raise ValueError(f"label id {bad} is outside the label space")
    return encoded
