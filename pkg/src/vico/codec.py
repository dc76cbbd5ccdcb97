"""Identity pixel codec: images are latents, normalized to [-1, 1]."""

from __future__ import annotations

import numpy as np

from . import numerics as N

__all__ = ["img_to_latent", "latent_to_img"]


def img_to_latent(img: np.ndarray, dtype=None) -> np.ndarray:
    """uint8 [H,W,3] -> float [3,H,W] in [-1, 1]."""
    if img.ndim != 3 or img.shape[-1] != 3:
        raise ValueError(f"expected an RGB image [H,W,3], got shape {img.shape}")
    arr = img.astype(np.float64) / 127.5 - 1.0
    return arr.transpose(2, 0, 1).astype(dtype or N.get_default_dtype())


def latent_to_img(latent: np.ndarray) -> np.ndarray:
    """float [3,H,W] (or [1,3,H,W]) -> uint8 [H,W,3] with clipping."""
    arr = np.asarray(latent)
    if arr.ndim == 4:
        if arr.shape[0] != 1:
            raise ValueError(f"can only decode a single latent, got batch {arr.shape[0]}")
        arr = arr[0]
    if arr.ndim != 3 or arr.shape[0] != 3:
        raise ValueError(f"expected latent [3,H,W], got shape {arr.shape}")
    pixels = np.clip((arr.astype(np.float64) + 1.0) * 127.5, 0.0, 255.0)
    return np.round(pixels).astype(np.uint8).transpose(1, 2, 0)
