"""Small shared image utilities (float images in [0, 1], HxW or HxWx3)."""

from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image

LUMA = (0.299, 0.587, 0.114)


def clip01(img):
    return np.clip(img, 0.0, 1.0)


def to_grayscale(img: np.ndarray) -> np.ndarray:
    """Luma conversion; 2D inputs pass through."""
    if img.ndim == 2:
        return img
    return img[..., 0] * LUMA[0] + img[..., 1] * LUMA[1] + img[..., 2] * LUMA[2]


def gray_to_rgb(img: np.ndarray) -> np.ndarray:
    if img.ndim == 3:
        return img
    return np.repeat(img[:, :, None], 3, axis=2)


def bilinear_sample(img: np.ndarray, xs: np.ndarray, ys: np.ndarray) -> np.ndarray:
    """Sample `img` at float pixel coords (x, y), edge-clamped."""
    H, W = img.shape[:2]
    x0 = np.floor(xs).astype(np.int64)
    y0 = np.floor(ys).astype(np.int64)
    fx = xs - x0
    fy = ys - y0
    x0c = np.clip(x0, 0, W - 1)
    x1c = np.clip(x0 + 1, 0, W - 1)
    y0c = np.clip(y0, 0, H - 1)
    y1c = np.clip(y0 + 1, 0, H - 1)
    if img.ndim == 3:
        fx = fx[..., None]
        fy = fy[..., None]
    p00 = img[y0c, x0c]
    p01 = img[y0c, x1c]
    p10 = img[y1c, x0c]
    p11 = img[y1c, x1c]
    top = p00 * (1 - fx) + p01 * fx
    bot = p10 * (1 - fx) + p11 * fx
    return top * (1 - fy) + bot * fy


def resize(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resize; exact identity when the size is unchanged."""
    H, W = img.shape[:2]
    if (H, W) == (out_h, out_w):
        return img.copy()
    ys = (np.arange(out_h) + 0.5) * H / out_h - 0.5
    xs = (np.arange(out_w) + 0.5) * W / out_w - 0.5
    gx, gy = np.meshgrid(xs, ys)
    return bilinear_sample(img, gx, gy)


def save_png(img: np.ndarray, path) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    arr = np.round(clip01(img) * 255.0).astype(np.uint8)
    Image.fromarray(arr).save(path)


def load_png(path) -> np.ndarray:
    arr = np.asarray(Image.open(path))
    return arr.astype(np.float64) / 255.0
