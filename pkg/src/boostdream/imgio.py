"""PNG input/output and the linear <-> sRGB transfer.

Color renders are stored as 8-bit sRGB PNG (standard piecewise transfer);
normal maps are data images and are quantized directly without the
transfer. Loading inverts whichever encoding was used.
"""

from __future__ import annotations

import numpy as np
from PIL import Image


def linear_to_srgb(x: np.ndarray) -> np.ndarray:
    x = np.clip(x, 0.0, 1.0)
    return np.where(x <= 0.0031308, 12.92 * x, 1.055 * x ** (1.0 / 2.4) - 0.055)


def srgb_to_linear(x: np.ndarray) -> np.ndarray:
    x = np.clip(x, 0.0, 1.0)
    return np.where(x <= 0.04045, x / 12.92, ((x + 0.055) / 1.055) ** 2.4)


def _quantize(x: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(x * 255.0), 0, 255).astype(np.uint8)


def save_color_png(path, image: np.ndarray) -> None:
    """Write a linear [0,1] color image as 8-bit sRGB PNG."""
    Image.fromarray(_quantize(linear_to_srgb(image))).save(path)


def save_data_png(path, image: np.ndarray) -> None:
    """Write a [0,1] data image (e.g. a normal map) without gamma."""
    Image.fromarray(_quantize(image)).save(path)


def load_color_png(path) -> np.ndarray:
    """Read an sRGB PNG back into linear [0,1] floats."""
    arr = np.asarray(Image.open(path).convert("RGB"), dtype=np.float64) / 255.0
    return srgb_to_linear(arr)


def load_data_png(path) -> np.ndarray:
    return np.asarray(Image.open(path).convert("RGB"), dtype=np.float64) / 255.0


def load_image_any(path) -> np.ndarray:
    """Load a target image: .npy holds linear floats, .png is sRGB color."""
    p = str(path)
    if p.endswith(".npy"):
        arr = np.asarray(np.load(p), dtype=np.float64)
        if arr.ndim != 3 or arr.shape[2] != 3:
            raise ValueError(f"expected an HxWx3 array in {p}, got shape {arr.shape}")
        return arr
    return load_color_png(p)


def psnr(a: np.ndarray, b: np.ndarray) -> float:
    """Peak signal-to-noise ratio for [0,1] images; inf when identical."""
    mse = float(np.mean((np.asarray(a, dtype=np.float64) - b) ** 2))
    if mse == 0.0:
        return float("inf")
    return -10.0 * np.log10(mse)
