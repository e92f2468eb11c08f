"""PNG image and mask I/O plus the float<->uint8 conventions used everywhere.

Images travel through the package as float32 RGB arrays of shape (H, W, 3)
with values in [0, 1]. Masks are float32 (H, W) with values in {0, 1}. Files
are 8-bit PNG; quantization is round(x * 255).
"""

from __future__ import annotations

import os
from typing import Tuple

import numpy as np
from PIL import Image

from .errors import ContractViolationError, FormatError


def to_uint8(image: np.ndarray) -> np.ndarray:
    """Quantize a float image in [0, 1] to uint8 by rounding."""
    arr = np.asarray(image, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise ContractViolationError("image contains non-finite values")
    return np.clip(np.round(arr * 255.0), 0, 255).astype(np.uint8)


def to_float(image_u8: np.ndarray) -> np.ndarray:
    return (np.asarray(image_u8, dtype=np.float32) / 255.0).astype(np.float32)


def save_image(path: str | os.PathLike, image: np.ndarray) -> None:
    """Write a float RGB image in [0, 1] as an 8-bit PNG."""
    arr = np.asarray(image)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise ContractViolationError(f"expected (H, W, 3) image, got shape {arr.shape}")
    Image.fromarray(to_uint8(arr), mode="RGB").save(os.fspath(path), format="PNG")


def load_image(path: str | os.PathLike) -> np.ndarray:
    """Read a PNG (or any PIL-readable raster) as float32 RGB in [0, 1]."""
    try:
        with Image.open(os.fspath(path)) as im:
            arr = np.asarray(im.convert("RGB"), dtype=np.uint8)
    except FileNotFoundError:
        raise
    except Exception as exc:  # PIL raises a zoo of decode errors
        raise FormatError(f"cannot decode image {path}: {exc}") from exc
    return to_float(arr)


def save_mask(path: str | os.PathLike, mask: np.ndarray) -> None:
    """Write a {0, 1} mask as a single-channel PNG with values {0, 255}."""
    arr = np.asarray(mask)
    if arr.ndim != 2:
        raise ContractViolationError(f"expected (H, W) mask, got shape {arr.shape}")
    u8 = np.where(arr >= 0.5, 255, 0).astype(np.uint8)
    Image.fromarray(u8, mode="L").save(os.fspath(path), format="PNG")


def load_mask(path: str | os.PathLike) -> np.ndarray:
    """Read a mask PNG back to float32 {0, 1} (threshold at 128)."""
    try:
        with Image.open(os.fspath(path)) as im:
            arr = np.asarray(im.convert("L"), dtype=np.uint8)
    except FileNotFoundError:
        raise
    except Exception as exc:
        raise FormatError(f"cannot decode mask {path}: {exc}") from exc
    return (arr >= 128).astype(np.float32)


def resize_image(image: np.ndarray, size: Tuple[int, int]) -> np.ndarray:
    """Bilinear-resize a float RGB image to (height, width)."""
    h, w = size
    arr = np.asarray(image, dtype=np.float32)
    if arr.shape[:2] == (h, w):
        return arr.copy()
    im = Image.fromarray(to_uint8(arr), mode="RGB").resize((w, h), Image.BILINEAR)
    return to_float(np.asarray(im))


def resize_mask(mask: np.ndarray, size: Tuple[int, int]) -> np.ndarray:
    """Nearest-neighbour resize for {0, 1} masks (keeps them binary)."""
    h, w = size
    arr = np.asarray(mask, dtype=np.float32)
    if arr.shape == (h, w):
        return arr.copy()
    im = Image.fromarray((arr >= 0.5).astype(np.uint8) * 255, mode="L").resize((w, h), Image.NEAREST)
    return (np.asarray(im) >= 128).astype(np.float32)
