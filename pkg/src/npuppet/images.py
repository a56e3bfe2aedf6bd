"""PNG image I/O. Images are float64 arrays in [0,1], RGBA channels last."""

from __future__ import annotations

import numpy as np
from PIL import Image

from .errors import ValidationError


def load_rgba(path) -> np.ndarray:
    """Load an image file as (H,W,4) float64 in [0,1]."""
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGBA"), dtype=np.float64) / 255.0
    return arr


def save_rgba(path, image: np.ndarray) -> None:
    """Save an (H,W,3) or (H,W,4) float image in [0,1] as PNG."""
    arr = np.asarray(image, dtype=np.float64)
    if arr.ndim != 3 or arr.shape[2] not in (3, 4):
        raise ValidationError(f"expected (H,W,3) or (H,W,4) image, got {arr.shape}")
    out = np.clip(np.round(arr * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(out, mode="RGBA" if arr.shape[2] == 4 else "RGB").save(path)


def composite_over_white(image: np.ndarray) -> np.ndarray:
    """Flatten an RGBA image onto a white background, returning (H,W,3)."""
    arr = np.asarray(image, dtype=np.float64)
    if arr.ndim != 3:
        raise ValidationError(f"expected rank-3 image, got shape {arr.shape}")
    if arr.shape[2] == 3:
        return arr.copy()
    a = arr[..., 3:4]
    return arr[..., :3] * a + (1.0 - a)
