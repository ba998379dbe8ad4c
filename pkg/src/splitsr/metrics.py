"""PSNR / SSIM on the luma channel and 8-bit PNG I/O."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from PIL import Image


@dataclass
class EvalResult:
    image_id: str
    level: str
    psnr: float
    ssim: float


def rgb_to_y(image):
    """BT.601 legal-range luma of a (3, H, W) image in [0, 1]; output on the 0..255 scale."""
    r, g, b = np.asarray(image, dtype=np.float64)
    return 65.481 * r + 128.553 * g + 24.966 * b + 16.0


def psnr(x, y, peak=1.0):
    mse = np.mean((np.asarray(x, dtype=np.float64) - np.asarray(y, dtype=np.float64)) ** 2)
    if mse == 0:
        return math.inf
    return 10.0 * math.log10(peak * peak / mse)


def _gaussian_window(size=11, sigma=1.5):
    x = np.arange(size) - (size - 1) / 2
    g = np.exp(-x * x / (2 * sigma * sigma))
    return g / g.sum()


def _filter_valid(img, g):
    # separable, rows then columns, valid region only
    rows = sliding_window_view(img, len(g), axis=0) @ g
    return sliding_window_view(rows, len(g), axis=1) @ g


def ssim(x, y, peak=255.0):
    """Mean SSIM over all fully-contained 11x11 Gaussian windows (sigma 1.5)."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 2:
        raise ValueError(f"ssim expects two equal 2-d arrays, got {x.shape} and {y.shape}")
    if min(x.shape) < 11:
        raise ValueError(f"ssim needs images of at least 11x11, got {x.shape}")
    c1 = (0.01 * peak) ** 2
    c2 = (0.03 * peak) ** 2
    g = _gaussian_window()
    mu_x = _filter_valid(x, g)
    mu_y = _filter_valid(y, g)
    sxx = _filter_valid(x * x, g) - mu_x * mu_x
    syy = _filter_valid(y * y, g) - mu_y * mu_y
    sxy = _filter_valid(x * y, g) - mu_x * mu_y
    num = (2 * mu_x * mu_y + c1) * (2 * sxy + c2)
    den = (mu_x * mu_x + mu_y * mu_y + c1) * (sxx + syy + c2)
    return float(np.mean(num / den))


def shave(image, border):
    if border <= 0:
        return image
    return image[..., border:-border, border:-border]


def psnr_y(sr, hr, border=0):
    return psnr(shave(rgb_to_y(sr), border), shave(rgb_to_y(hr), border), peak=255.0)


def ssim_y(sr, hr, border=0):
    return ssim(shave(rgb_to_y(sr), border), shave(rgb_to_y(hr), border), peak=255.0)


def evaluate_pair(sr, hr, scale, image_id="", level=""):
    """Y-channel PSNR/SSIM after cropping ``scale`` pixels from each border."""
    return EvalResult(image_id, level, psnr_y(sr, hr, scale), ssim_y(sr, hr, scale))


def load_png(path):
    """Read any PNG as RGB float64 (3, H, W) in [0, 1]."""
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float64)
    return arr.transpose(2, 0, 1) / 255.0


def to_uint8(image):
    img = np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0)
    return np.floor(img * 255.0 + 0.5).astype(np.uint8)


def save_png(image, path):
    Image.fromarray(np.ascontiguousarray(to_uint8(image).transpose(1, 2, 0))).save(path, format="PNG")
