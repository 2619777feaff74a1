"""PNG rendering for explanation reports and prototype galleries (PIL only)."""
from __future__ import annotations

import numpy as np
from PIL import Image, ImageDraw

# anchor colors of a blue -> cyan -> yellow -> red heat ramp
_RAMP = np.array([[0, 0, 128], [0, 160, 255], [255, 230, 0], [200, 0, 0]], dtype=np.float64)


def to_uint8(image):
    return (np.clip(np.asarray(image, dtype=np.float64), 0, 1) * 255 + 0.5).astype(np.uint8)


def heatmap(values):
    """Min-max normalized map colored on a fixed ramp, ``(H, W, 3)`` uint8."""
    v = np.asarray(values, dtype=np.float64)
    span = v.max() - v.min()
    t = (v - v.min()) / span if span > 0 else np.zeros_like(v)
    x = t * (len(_RAMP) - 1)
    lo = np.minimum(x.astype(int), len(_RAMP) - 2)
    frac = (x - lo)[..., None]
    return (_RAMP[lo] * (1 - frac) + _RAMP[lo + 1] * frac).astype(np.uint8)


def overlay(image, values, alpha=0.5):
    base = to_uint8(image).astype(np.float64)
    return (base * (1 - alpha) + heatmap(values) * alpha).astype(np.uint8)


def draw_box(rgb, box, color=(255, 255, 0)):
    top, left, bottom, right = box
    im = Image.fromarray(np.asarray(rgb, dtype=np.uint8))
    ImageDraw.Draw(im).rectangle([left, top, right, bottom], outline=color)
    return np.asarray(im)


def upscale(rgb, factor):
    if factor <= 1:
        return np.asarray(rgb)
    return np.asarray(rgb).repeat(factor, axis=0).repeat(factor, axis=1)


def save_png(path, rgb, scale=1):
    Image.fromarray(upscale(np.asarray(rgb, dtype=np.uint8), scale)).save(path)
