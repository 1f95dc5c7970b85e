"""Input validation helpers for image arrays.

Images travel through the public API as ``(N, H, W, C)`` float arrays in
``[0, 1]``. Internally they are converted to ``(N, C, H, W)`` tensors.
"""

from __future__ import annotations

import numpy as np
import torch


def check_images(X, *, image_shape=None, allow_single=False, name="X"):
    """Validate an image batch and return it as float32 ``(N, H, W, C)``.

    Accepts ``(N, H, W)`` (single channel) or ``(N, H, W, C)``. With
    ``allow_single`` a lone ``(H, W)`` or ``(H, W, C)`` image is promoted to a
    batch of one. ``image_shape`` is the expected ``(H, W, C)``.
    """
    if isinstance(X, torch.Tensor):
        X = X.detach().cpu().numpy()
    X = np.asarray(X, dtype=np.float32)
    if allow_single and X.ndim == 2:
        X = X[None]
    if allow_single and X.ndim == 3 and image_shape is not None and X.shape == tuple(image_shape):
        X = X[None]
    if X.ndim == 3:
        X = X[..., None]
    if X.ndim != 4:
        raise ValueError(f"{name} must have shape (N, H, W) or (N, H, W, C), got {X.shape}")
    if X.shape[0] == 0:
        raise ValueError(f"{name} is empty")
    if not np.all(np.isfinite(X)):
        raise ValueError(f"{name} contains non-finite values")
    if X.min() < 0.0 or X.max() > 1.0:
        raise ValueError(f"{name} pixel values must lie in [0, 1]")
    if image_shape is not None and tuple(X.shape[1:]) != tuple(image_shape):
        raise ValueError(
            f"{name} has image shape {tuple(X.shape[1:])}, expected {tuple(image_shape)}"
        )
    return X


def check_mask(mask, shape=None):
    """Return ``mask`` as a uint8 {0, 1} array, checking its spatial shape."""
    mask = np.asarray(mask)
    if mask.ndim == 3 and mask.shape[-1] == 1:
        mask = mask[..., 0]
    if mask.ndim != 2:
        raise ValueError(f"mask must be 2-D, got shape {mask.shape}")
    if not np.isin(mask, (0, 1)).all():
        raise ValueError("mask values must be 0 or 1")
    if shape is not None and tuple(mask.shape) != tuple(shape):
        raise ValueError(f"mask shape {mask.shape} does not match image {tuple(shape)}")
    return mask.astype(np.uint8)


def to_tensor(X, dtype=torch.float32):
    """``(N, H, W, C)`` array -> ``(N, C, H, W)`` tensor."""
    if isinstance(X, torch.Tensor):
        return X.to(dtype)
    return torch.from_numpy(np.ascontiguousarray(np.moveaxis(X, -1, 1))).to(dtype)


def to_images(t):
    """``(N, C, H, W)`` tensor -> ``(N, H, W, C)`` float32 array."""
    return np.moveaxis(t.detach().cpu().numpy(), 1, -1).astype(np.float32)
