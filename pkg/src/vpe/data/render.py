"""Procedural symbol prototypes: border shape x fill colour x interior glyph."""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

SHAPES = ("circle", "triangle", "square")
PALETTE = {
    "red": (1.0, 0.0, 0.0),
    "blue": (0.0, 0.0, 1.0),
    "green": (0.0, 1.0, 0.0),
    "yellow": (1.0, 1.0, 0.0),
}
ARROWS = tuple(f"arrow{a}" for a in range(0, 360, 45))
DOTS = ("dots1", "dots2", "dots3")
DIGITS = tuple(f"digit{d}" for d in range(10))
GLYPHS = ARROWS + ("bar",) + DOTS + DIGITS

# seven-segment layout: a b c d e f g
_SEGMENTS = {
    0: "abcdef", 1: "bc", 2: "abged", 3: "abgcd", 4: "fgbc",
    5: "afgcd", 6: "afgedc", 7: "abc", 8: "abcdefg", 9: "abcdfg",
}
SUPERSAMPLE = 4
DISTINCT_FRACTION = 0.05
DIFF_THRESHOLD = 0.1


@dataclass(frozen=True)
class SymbolSpec:
    shape: str
    color: str
    glyph: str

    @property
    def name(self) -> str:
        return f"{self.shape}_{self.color}_{self.glyph}"

    @property
    def glyph_rgb(self) -> tuple[float, float, float]:
        return (0.0, 0.0, 0.0) if self.color == "yellow" else (1.0, 1.0, 1.0)


def all_specs() -> list[SymbolSpec]:
    return [SymbolSpec(s, c, g) for s, c, g in itertools.product(SHAPES, PALETTE, GLYPHS)]


def _grid(size: int) -> tuple[np.ndarray, np.ndarray]:
    # supersampled pixel centres in [-1, 1]; u -> -u under a half turn, exactly
    n = size * SUPERSAMPLE
    axis = (2.0 * np.arange(n) + 1.0 - n) / n
    v, u = np.meshgrid(axis, axis, indexing="ij")
    return u, v


def _border(shape: str, u, v):
    if shape == "circle":
        return u * u + v * v <= 0.9 ** 2
    if shape == "square":
        return np.maximum(np.abs(u), np.abs(v)) <= 0.8
    if shape == "triangle":
        # apex up, base at v = 0.62
        return (v <= 0.62) & (v >= -0.88 + 1.732 * np.abs(u))
    raise ValueError(f"unknown shape {shape!r}")


def _arrow(u, v):
    shaft = (np.abs(v) <= 0.09) & (u >= -0.45) & (u <= 0.08)
    head = (u >= 0.05) & (u <= 0.45 - 1.6 * np.abs(v))
    return shaft | head


def _disc(u, v, cu, cv, r=0.12):
    return (u - cu) ** 2 + (v - cv) ** 2 <= r * r


def _digit(d: int, u, v):
    t = 0.07
    hw, hh = 0.22, 0.42
    segs = {
        "a": (np.abs(v + hh) <= t) & (np.abs(u) <= hw),
        "g": (np.abs(v) <= t) & (np.abs(u) <= hw),
        "d": (np.abs(v - hh) <= t) & (np.abs(u) <= hw),
        "f": (np.abs(u + hw) <= t) & (v >= -hh) & (v <= 0),
        "b": (np.abs(u - hw) <= t) & (v >= -hh) & (v <= 0),
        "e": (np.abs(u + hw) <= t) & (v >= 0) & (v <= hh),
        "c": (np.abs(u - hw) <= t) & (v >= 0) & (v <= hh),
    }
    out = np.zeros(u.shape, dtype=bool)
    for key in _SEGMENTS[d]:
        out |= segs[key]
    return out


def _glyph(glyph: str, u, v):
    if glyph.startswith("arrow"):
        c = np.cos(np.deg2rad(int(glyph[5:])))
        s = np.sin(np.deg2rad(int(glyph[5:])))
        c, s = round(c, 12) + 0.0, round(s, 12) + 0.0
        # image v points down, so a counter-clockwise turn by theta uses (c, -s)
        return _arrow(c * u - s * v, s * u + c * v)
    if glyph == "bar":
        return (np.abs(u) <= 0.5) & (np.abs(v) <= 0.12)
    if glyph == "dots1":
        return _disc(u, v, 0.0, 0.0, 0.16)
    if glyph == "dots2":
        return _disc(u, v, -0.25, 0.0) | _disc(u, v, 0.25, 0.0)
    if glyph == "dots3":
        return _disc(u, v, 0.0, -0.22) | _disc(u, v, -0.22, 0.18) | _disc(u, v, 0.22, 0.18)
    if glyph.startswith("digit"):
        return _digit(int(glyph[5:]), u, v)
    raise ValueError(f"unknown glyph {glyph!r}")


def render_symbol(spec: SymbolSpec, size: int = 48) -> tuple[np.ndarray, np.ndarray]:
    """Render one prototype; returns (image (3, size, size), coverage mask (size, size))."""
    u, v = _grid(size)
    border = _border(spec.shape, u, v)
    if spec.shape == "triangle":
        gu, gv = (u - 0.0) / 0.55, (v - 0.18) / 0.55
    else:
        gu, gv = u, v
    glyph = _glyph(spec.glyph, gu, gv) & border
    fill = np.asarray(PALETTE[spec.color])[:, None, None]
    ink = np.asarray(spec.glyph_rgb)[:, None, None]
    img = np.where(glyph, ink, np.where(border, fill, 0.0))
    k = SUPERSAMPLE
    img = img.reshape(3, size, k, size, k).mean(axis=(2, 4))
    mask = border.reshape(size, k, size, k).mean(axis=(1, 3))
    return img.astype(np.float32), mask.astype(np.float32)


def pixel_difference(a: np.ndarray, b: np.ndarray, threshold: float = DIFF_THRESHOLD) -> float:
    """Fraction of pixels where any channel differs by more than ``threshold``."""
    return float(np.mean(np.max(np.abs(a - b), axis=0) > threshold))


def choose_specs(n_classes: int, seed: int, size: int = 48) -> list[SymbolSpec]:
    """Seeded greedy pick of mutually distinct symbol combinations."""
    if n_classes < 2:
        raise ValueError(f"need at least 2 classes, got {n_classes}")
    pool = all_specs()
    if n_classes > len(pool):
        raise ValueError(
            f"{n_classes} classes exceed the {len(pool)} distinct shape/colour/glyph combinations")
    rng = np.random.default_rng(seed)
    chosen, images = [], []
    for i in rng.permutation(len(pool)):
        spec = pool[i]
        img, _ = render_symbol(spec, size)
        if all(pixel_difference(img, other) >= DISTINCT_FRACTION for other in images):
            chosen.append(spec)
            images.append(img)
            if len(chosen) == n_classes:
                return chosen
    raise ValueError(
        f"only {len(chosen)} prototypes satisfy the {DISTINCT_FRACTION:.0%} distinctness rule; "
        f"{n_classes} requested")


def render_prototypes(n_classes: int, seed: int, size: int = 48) -> list[np.ndarray]:
    """``n_classes`` pairwise-distinct prototype images, deterministic in ``seed``."""
    return [render_symbol(spec, size)[0] for spec in choose_specs(n_classes, seed, size)]
