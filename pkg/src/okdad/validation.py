"""Input validation helpers for the estimators (ragged clip lists)."""
from __future__ import annotations

import numpy as np


def check_clips(X, frame_shape=None, name="X") -> list[np.ndarray]:
    """Return ``X`` as a list of float32 ``[N, H, W]`` arrays.

    Items may be arrays or objects with a ``frames`` attribute (already
    cropped). Raises ``ValueError`` on empty input or inconsistent shapes.
    """
    if X is None:
        raise ValueError(f"{name} must not be None")
    items = list(X)
    if not items:
        raise ValueError(f"{name} is empty")
    out = []
    for i, item in enumerate(items):
        a = np.asarray(getattr(item, "frames", item), dtype=np.float32)
        if a.ndim != 3 or a.shape[0] < 1:
            raise ValueError(f"{name}[{i}] must be a non-empty [N, H, W] frame stack, got shape {a.shape}")
        if frame_shape is not None and tuple(a.shape[1:]) != tuple(frame_shape):
            raise ValueError(f"{name}[{i}] has frames of shape {a.shape[1:]}, expected {tuple(frame_shape)}")
        if not np.isfinite(a).all():
            raise ValueError(f"{name}[{i}] contains non-finite values")
        out.append(a)
    return out


def check_labels(y, X=None, num_classes=None, name="y") -> np.ndarray:
    if y is None and X is not None:
        y = [getattr(item, "label", None) for item in X]
        if any(v is None for v in y):
            raise ValueError("labels are required when X items carry none")
    y = np.asarray(y)
    if y.ndim != 1 or not np.issubdtype(y.dtype, np.integer):
        raise ValueError(f"{name} must be a 1-D array of integer class indices")
    if X is not None and len(y) != len(X):
        raise ValueError(f"{name} has {len(y)} labels for {len(X)} samples")
    if len(y) and y.min() < 0:
        raise ValueError(f"{name} contains negative class indices")
    if num_classes is not None and len(y) and y.max() >= num_classes:
        raise ValueError(f"{name} contains class {y.max()} >= num_classes={num_classes}")
    return y.astype(np.int64)


def check_ratio(r) -> float:
    r = float(r)
    if not 0 < r <= 1:
        raise ValueError(f"observation ratio must be in (0, 1], got {r}")
    return r
