"""Colour overlays of segmentation maps."""

from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image

from .core import ShapeMismatch, SegTransError, image_array, label_array


class IOFailure(SegTransError, OSError):
    pass


def voc_palette(n: int = 256) -> np.ndarray:
    """The PASCAL VOC colour map: class ``c`` spreads its bits over RGB."""
    pal = np.zeros((n, 3), dtype=np.uint8)
    for c in range(n):
        r = g = b = 0
        cid = c
        for j in range(8):
            r |= ((cid >> 0) & 1) << (7 - j)
            g |= ((cid >> 1) & 1) << (7 - j)
            b |= ((cid >> 2) & 1) << (7 - j)
            cid >>= 3
        pal[c] = (r, g, b)
    return pal


PALETTE = voc_palette()


def compose_overlay(x, pred, palette: np.ndarray = PALETTE, alpha: float = 0.5) -> np.ndarray:
    """Blend an image (C x H x W in [0, 1]) with per-class colours; returns H x W x 3 uint8."""
    img = np.asarray(image_array(x), dtype=np.float64)
    pred = np.asarray(label_array(pred))
    if img.shape[1:] != pred.shape:
        raise ShapeMismatch(f"image {img.shape[1:]} and prediction {pred.shape} differ")
    colours = np.asarray(palette, dtype=np.float64)[pred]
    rgb = img.transpose(1, 2, 0) * 255.0
    return np.round((1.0 - alpha) * rgb + alpha * colours).clip(0, 255).astype(np.uint8)


def render_overlay(x, pred, path, palette: np.ndarray = PALETTE, alpha: float = 0.5) -> np.ndarray:
    """Write the overlay as PNG and return the composed array."""
    arr = compose_overlay(x, pred, palette, alpha)
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        Image.fromarray(arr).save(path, format="PNG")
    except OSError as exc:
        raise IOFailure(f"cannot write overlay {path}: {exc}") from exc
    return arr
