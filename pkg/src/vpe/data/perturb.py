"""Synthetic "real-world" perturbation of prototypes.

Pipeline: geometric warp -> composite onto a background -> photometric
change -> occlusion -> blur -> additive noise -> clamp to [0, 1].
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np
from scipy.ndimage import gaussian_filter

from vpe.data.images import sample, snapped_trig

# legal (low, high) per scalar field
RANGES = {
    "rotation": (-180.0, 180.0),
    "shear": (-0.5, 0.5),
    "scale": (0.3, 1.5),
    "translate_x": (-0.4, 0.4),
    "translate_y": (-0.4, 0.4),
    "perspective_x": (-0.5, 0.5),
    "perspective_y": (-0.5, 0.5),
    "brightness": (-0.5, 0.5),
    "contrast": (0.2, 2.0),
    "blur_sigma": (0.0, 3.0),
    "noise_std": (0.0, 0.3),
    "occlusion": (0.0, 0.5),
}
COLOR_SHIFT_RANGE = (-0.3, 0.3)
N_BACKGROUNDS = 64


@dataclass(frozen=True)
class PerturbationParams:
    rotation: float = 0.0          # degrees, counter-clockwise
    shear: float = 0.0
    scale: float = 1.0
    translate_x: float = 0.0       # fraction of half-width
    translate_y: float = 0.0
    perspective_x: float = 0.0
    perspective_y: float = 0.0
    brightness: float = 0.0        # additive
    contrast: float = 1.0          # about mid-grey
    color_shift: tuple[float, float, float] = (0.0, 0.0, 0.0)
    blur_sigma: float = 0.0        # pixels
    noise_std: float = 0.0
    background: int = 0            # 0 = blank (black); 1.. = procedural textures
    occlusion: float = 0.0         # fraction of image area
    resample: str = "bilinear"

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        for key, (lo, hi) in RANGES.items():
            val = getattr(self, key)
            if not lo <= val <= hi:
                raise ValueError(f"{key}={val} outside legal range [{lo}, {hi}]")
        if len(self.color_shift) != 3 or not all(
                COLOR_SHIFT_RANGE[0] <= c <= COLOR_SHIFT_RANGE[1] for c in self.color_shift):
            raise ValueError(f"color_shift {self.color_shift} must be 3 values in {COLOR_SHIFT_RANGE}")
        if not 0 <= self.background <= N_BACKGROUNDS:
            raise ValueError(f"background id {self.background} outside [0, {N_BACKGROUNDS}]")
        if self.resample not in ("bilinear", "nearest"):
            raise ValueError(f"resample must be 'bilinear' or 'nearest', got {self.resample!r}")

    @classmethod
    def identity(cls) -> "PerturbationParams":
        return cls()

    def replace(self, **changes) -> "PerturbationParams":
        return dataclasses.replace(self, **changes)

    @property
    def is_geometric_identity(self) -> bool:
        return (self.rotation % 360.0 == 0 and self.shear == 0 and self.scale == 1
                and self.translate_x == 0 and self.translate_y == 0
                and self.perspective_x == 0 and self.perspective_y == 0)

    @classmethod
    def sample(cls, rng: np.random.Generator, strength: float = 1.0) -> "PerturbationParams":
        """Draw a realistic capture condition; ``strength`` in [0, 1] scales severity."""
        k = float(np.clip(strength, 0.0, 1.0))

        def sym(lim):
            return float(rng.uniform(-lim, lim) * k)

        return cls(
            rotation=sym(15.0),
            shear=sym(0.15),
            scale=float(1.0 - k * rng.uniform(0.1, 0.45)),
            translate_x=sym(0.12),
            translate_y=sym(0.12),
            perspective_x=sym(0.25),
            perspective_y=sym(0.25),
            brightness=sym(0.25),
            contrast=float(1.0 + sym(0.4)),
            color_shift=tuple(sym(0.12) for _ in range(3)),
            blur_sigma=float(k * rng.uniform(0.0, 1.5)),
            noise_std=float(k * rng.uniform(0.0, 0.06)),
            background=int(rng.integers(1, N_BACKGROUNDS + 1)) if k > 0 else 0,
            occlusion=float(k * rng.uniform(0.0, 0.2)) if rng.random() < 0.3 else 0.0,
        )


def warp_matrix(params: PerturbationParams) -> np.ndarray:
    """Forward homography on centred, normalised coordinates (x right, y down)."""
    c, s = snapped_trig(params.rotation)
    # counter-clockwise on screen with y pointing down
    rot = np.array([[c, s, 0.0], [-s, c, 0.0], [0.0, 0.0, 1.0]])
    shear = np.array([[1.0, params.shear, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]])
    scale = np.diag([params.scale, params.scale, 1.0])
    persp = np.array([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0],
                      [params.perspective_x, params.perspective_y, 1.0]])
    trans = np.array([[1.0, 0.0, params.translate_x], [0.0, 1.0, params.translate_y],
                      [0.0, 0.0, 1.0]])
    return trans @ persp @ rot @ shear @ scale


def warp(image: np.ndarray, params: PerturbationParams, order: str | None = None) -> np.ndarray:
    """Apply the geometric part of ``params`` to a (C, H, W) image, zero fill."""
    if params.is_geometric_identity:
        return np.array(image, dtype=np.float32)
    c, h, w = image.shape
    hinv = np.linalg.inv(warp_matrix(params))
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    half = max(cx, cy, 0.5)
    yy, xx = np.meshgrid((np.arange(h) - cy) / half, (np.arange(w) - cx) / half, indexing="ij")
    pts = hinv @ np.stack([xx.ravel(), yy.ravel(), np.ones(xx.size)])
    xs = (pts[0] / pts[2]).reshape(h, w) * half + cx
    ys = (pts[1] / pts[2]).reshape(h, w) * half + cy
    out = sample(np.asarray(image, dtype=np.float32)[None], ys[None], xs[None],
                 order or params.resample)
    return out[0]


def background_texture(bg_id: int, shape: tuple[int, int, int], seed: int) -> np.ndarray:
    """Procedural clutter: smoothed noise, colour gradients or stripes."""
    c, h, w = shape
    if bg_id == 0:
        return np.zeros(shape, dtype=np.float32)
    rng = np.random.default_rng([seed, bg_id])
    kind = bg_id % 3
    base = rng.uniform(0.0, 1.0, size=(c, 1, 1))
    other = rng.uniform(0.0, 1.0, size=(c, 1, 1))
    yy, xx = np.meshgrid(np.linspace(-1, 1, h), np.linspace(-1, 1, w), indexing="ij")
    if kind == 0:
        noise = rng.uniform(0.0, 1.0, size=shape)
        noise = gaussian_filter(noise, sigma=(0, max(h, w) / 12.0, max(h, w) / 12.0))
        noise = (noise - noise.min()) / max(noise.max() - noise.min(), 1e-6)
        img = base * (1 - noise) + other * noise
    elif kind == 1:
        theta = rng.uniform(0, np.pi)
        ramp = (np.cos(theta) * xx + np.sin(theta) * yy + 1.5) / 3.0
        img = base * (1 - ramp) + other * ramp
    else:
        theta = rng.uniform(0, np.pi)
        freq = rng.uniform(2.0, 6.0)
        wave = 0.5 + 0.5 * np.sin(freq * np.pi * (np.cos(theta) * xx + np.sin(theta) * yy))
        img = base * (1 - wave) + other * wave
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def perturb(prototype: np.ndarray, params: PerturbationParams, seed: int,
            mask: np.ndarray | None = None) -> np.ndarray:
    """Render a synthetic real-world capture of ``prototype`` (same shape out).

    ``mask`` is the prototype's coverage in [0, 1]; by default any non-black
    pixel counts as foreground.
    """
    proto = np.asarray(prototype, dtype=np.float32)
    c, h, w = proto.shape
    if mask is None:
        mask = (proto.max(axis=0) > 0).astype(np.float32)
    rng = np.random.default_rng(seed)

    geo = warp(np.concatenate([proto, np.asarray(mask, np.float32)[None]]), params)
    img, alpha = geo[:c], np.clip(geo[c:], 0.0, 1.0)
    if params.background:
        bg = background_texture(params.background, proto.shape, seed)
        img = img + (1 - alpha) * bg  # img is already premultiplied by coverage

    if params.contrast != 1 or params.brightness != 0 or any(params.color_shift):
        shift = np.asarray(params.color_shift, dtype=np.float32)[:, None, None]
        img = params.contrast * img + (1 - params.contrast) * 0.5 + params.brightness + shift

    if params.occlusion > 0:
        area = params.occlusion * h * w
        aspect = rng.uniform(0.5, 2.0)
        oh = int(np.clip(round(np.sqrt(area * aspect)), 1, h))
        ow = int(np.clip(round(area / oh), 1, w))
        top = int(rng.integers(0, h - oh + 1))
        left = int(rng.integers(0, w - ow + 1))
        img = np.array(img)
        img[:, top:top + oh, left:left + ow] = rng.uniform(0, 1, size=(c, 1, 1))

    if params.blur_sigma > 0:
        img = gaussian_filter(img, sigma=(0, params.blur_sigma, params.blur_sigma), mode="nearest")
    if params.noise_std > 0:
        img = img + rng.normal(0.0, params.noise_std, size=img.shape)
    return np.clip(img, 0.0, 1.0).astype(np.float32)
