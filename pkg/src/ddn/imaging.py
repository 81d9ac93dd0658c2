"""PNG import/export and grid rendering. Images are float arrays in (H,W,C),
clamped to [0,1] only here, at the export boundary."""

from __future__ import annotations

import base64
import io

import numpy as np
from PIL import Image


def to_uint8(img):
    img = np.asarray(img)
    if img.ndim == 2:
        img = img[:, :, None]
    return (np.clip(img, 0.0, 1.0) * 255.0).round().astype(np.uint8)


def to_pil(img):
    arr = to_uint8(img)
    if arr.shape[2] == 1:
        return Image.fromarray(arr[:, :, 0], mode="L")
    if arr.shape[2] == 3:
        return Image.fromarray(arr, mode="RGB")
    raise ValueError(f"cannot export image with {arr.shape[2]} channels")


def png_bytes(img):
    buf = io.BytesIO()
    to_pil(img).save(buf, format="PNG")
    return buf.getvalue()


def png_base64(img):
    return base64.b64encode(png_bytes(img)).decode("ascii")


def write_png(path, img):
    with open(path, "wb") as f:
        f.write(png_bytes(img))


def read_image(path):
    """Load an image file as float32 (H,W,C) in [0,1]; grayscale keeps C=1."""
    with Image.open(path) as im:
        if im.mode in ("L", "I;16", "I"):
            arr = np.asarray(im.convert("L"), np.float32)[:, :, None] / 255.0
        else:
            arr = np.asarray(im.convert("RGB"), np.float32) / 255.0
    return arr


def image_grid(images, cols=None, pad=1, pad_value=0.25):
    """Tile (n,H,W,C) images into one grid image."""
    images = np.asarray(images)
    n, h, w, c = images.shape
    if cols is None:
        cols = int(np.ceil(np.sqrt(n)))
    rows = int(np.ceil(n / cols))
    grid = np.full((rows * (h + pad) + pad, cols * (w + pad) + pad, c),
                   pad_value, np.float32)
    for i in range(n):
        r, col = divmod(i, cols)
        y, x = pad + r * (h + pad), pad + col * (w + pad)
        grid[y:y + h, x:x + w] = images[i]
    return grid
