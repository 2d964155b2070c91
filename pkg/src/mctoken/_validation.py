"""Input checks shared by the estimator and the harness."""
from __future__ import annotations

import numpy as np


def check_images(X, image_size: int | None = None) -> np.ndarray:
    """Return a float32 (n, H, W, 3) array in [0, 1].

    uint8 input is rescaled; float input must already lie in [0, 1].
    A single (H, W, 3) image is promoted to a batch of one.
    """
    X = np.asarray(X)
    if X.ndim == 3:
        X = X[None]
    if X.ndim != 4 or X.shape[-1] != 3:
        raise ValueError(f"expected images of shape (n, H, W, 3), got {X.shape}")
    if X.shape[1] != X.shape[2]:
        raise ValueError(f"images must be square, got {X.shape[1]}x{X.shape[2]}")
    if image_size is not None and X.shape[1] != image_size:
        raise ValueError(f"images are {X.shape[1]}px, model expects {image_size}px")
    if X.dtype == np.uint8:
        return X.astype(np.float32) / np.float32(255.0)
    if not np.issubdtype(X.dtype, np.floating):
        raise ValueError(f"images must be uint8 or float, got {X.dtype}")
    if not np.isfinite(X).all():
        raise ValueError("images contain NaN or inf")
    if X.size and (X.min() < 0 or X.max() > 1):
        raise ValueError("float images must lie in [0, 1]")
    return X.astype(np.float32, copy=False)


def check_labels(y, n: int, num_concepts: int | None = None) -> np.ndarray:
    y = np.asarray(y)
    if y.ndim != 2:
        raise ValueError(f"labels must be a 2-D (n, concepts) array, got shape {y.shape}")
    if y.shape[0] != n:
        raise ValueError(f"{n} images but {y.shape[0]} label rows")
    if num_concepts is not None and y.shape[1] != num_concepts:
        raise ValueError(f"labels have {y.shape[1]} columns, expected {num_concepts}")
    if not np.isin(y, (0, 1)).all():
        raise ValueError("labels must be binary (0/1)")
    return y.astype(np.uint8)
