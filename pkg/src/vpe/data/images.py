"""Image primitives: PNG I/O, letterboxing and geometric resampling.

Images are float32 arrays shaped (C, H, W) with intensities in [0, 1].
"""

from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image

from vpe.errors import DataError


def read_png(path: str | Path) -> np.ndarray:
    """Decode an 8-bit image to (3, H, W) float32 via v / 255."""
    try:
        with Image.open(path) as im:
            arr = np.asarray(im.convert("RGB"), dtype=np.uint8)
    except (OSError, ValueError) as exc:
        raise DataError(f"unreadable image {path}: {exc}") from exc
    return (arr.transpose(2, 0, 1).astype(np.float32) / 255.0)


def to_uint8(image: np.ndarray) -> np.ndarray:
    """(C, H, W) in [0, 1] -> (H, W, C) uint8 with round-half-even."""
    img = np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0)
    arr = np.rint(img * 255.0).astype(np.uint8)
    if arr.shape[0] == 1:
        return arr[0]
    return arr.transpose(1, 2, 0)


def write_png(path: str | Path, image: np.ndarray) -> None:
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        Image.fromarray(to_uint8(image)).save(path, format="PNG", optimize=False)
    except OSError as exc:
        raise DataError(f"cannot write image {path}: {exc}") from exc


def resize(image: np.ndarray, height: int, width: int) -> np.ndarray:
    """Antialiased bilinear resize of a (C, H, W) image."""
    c, h, w = image.shape
    if (h, w) == (height, width):
        return np.array(image, dtype=np.float32)
    out = np.empty((c, height, width), dtype=np.float32)
    for i in range(c):
        ch = Image.fromarray(np.ascontiguousarray(image[i], dtype=np.float32), mode="F")
        out[i] = np.asarray(ch.resize((width, height), Image.BILINEAR))
    return np.clip(out, 0.0, 1.0)


def letterbox(image: np.ndarray, target: int) -> np.ndarray:
    """Scale the longer side to ``target`` keeping aspect, zero-pad the rest, centred."""
    if target <= 0:
        raise ValueError(f"letterbox target must be positive, got {target}")
    image = np.asarray(image, dtype=np.float32)
    if image.ndim == 2:
        image = image[None]
    c, h, w = image.shape
    if h == 0 or w == 0:
        raise ValueError(f"cannot letterbox an image with zero extent {image.shape}")
    if h >= w:
        nh, nw = target, max(1, int(round(w * target / h)))
    else:
        nh, nw = max(1, int(round(h * target / w))), target
    content = resize(image, nh, nw)
    out = np.zeros((c, target, target), dtype=np.float32)
    top = (target - nh) // 2
    left = (target - nw) // 2
    out[:, top:top + nh, left:left + nw] = content
    return out


def snapped_trig(degrees: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """cos/sin rounded to 12 decimals so quarter turns are exact."""
    rad = np.deg2rad(np.asarray(degrees, dtype=np.float64))
    c = np.round(np.cos(rad), 12) + 0.0
    s = np.round(np.sin(rad), 12) + 0.0
    return c, s


def sample(images: np.ndarray, ys: np.ndarray, xs: np.ndarray, order: str = "bilinear") -> np.ndarray:
    """Sample (B, C, H, W) images at per-batch source coordinates (B, H', W').

    Out-of-range neighbours contribute zero.
    """
    b, c, h, w = images.shape
    bi = np.arange(b)[:, None, None]
    if order == "nearest":
        yi = np.rint(ys).astype(np.int64)
        xi = np.rint(xs).astype(np.int64)
        ok = (yi >= 0) & (yi < h) & (xi >= 0) & (xi < w)
        vals = images[bi, :, np.clip(yi, 0, h - 1), np.clip(xi, 0, w - 1)]  # (B, H', W', C)
        out = np.where(ok[..., None], vals, 0)
        return np.moveaxis(out, -1, 1).astype(images.dtype)
    if order != "bilinear":
        raise ValueError(f"unknown resampling order {order!r}")
    y0 = np.floor(ys).astype(np.int64)
    x0 = np.floor(xs).astype(np.int64)
    wy = (ys - y0).astype(images.dtype)[..., None]
    wx = (xs - x0).astype(images.dtype)[..., None]
    out = 0
    for dy, fy in ((0, 1 - wy), (1, wy)):
        for dx, fx in ((0, 1 - wx), (1, wx)):
            yy = y0 + dy
            xx = x0 + dx
            ok = ((yy >= 0) & (yy < h) & (xx >= 0) & (xx < w))[..., None]
            vals = images[bi, :, np.clip(yy, 0, h - 1), np.clip(xx, 0, w - 1)]
            out = out + np.where(ok, vals, 0) * (fy * fx)
    return np.moveaxis(out, -1, 1).astype(images.dtype)


def rotate_flip(images: np.ndarray, degrees, flips, order: str = "bilinear") -> np.ndarray:
    """Mirror horizontally (where ``flips``) then rotate counter-clockwise about the centre.

    ``images`` is (B, C, H, W); ``degrees`` and ``flips`` have length B.
    """
    images = np.asarray(images)
    b, _, h, w = images.shape
    c, s = snapped_trig(np.broadcast_to(degrees, (b,)))
    flips = np.broadcast_to(np.asarray(flips, dtype=bool), (b,))
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    yy, xx = np.meshgrid(np.arange(h) - cy, np.arange(w) - cx, indexing="ij")
    c = c[:, None, None]
    s = s[:, None, None]
    xs = c * xx - s * yy
    ys = s * xx + c * yy
    xs = np.where(flips[:, None, None], -xs, xs)
    return sample(images, ys + cy, xs + cx, order)


def rotate(image: np.ndarray, degrees: float, order: str = "bilinear") -> np.ndarray:
    return rotate_flip(image[None], [degrees], [False], order)[0]


def hflip(image: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(image[..., ::-1])
