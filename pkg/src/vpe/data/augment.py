"""Paired rotation/flip augmentation applied identically to real and prototype."""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from vpe.data.images import rotate_flip


@dataclass(frozen=True)
class AugmentParams:
    angle: float    # degrees, counter-clockwise
    flip: bool      # horizontal mirror, applied before the rotation


@dataclass(frozen=True)
class PairedSample:
    real: np.ndarray
    prototype: np.ndarray
    class_label: int
    source: str = "synthetic"
    transform: AugmentParams | None = None


def draw_params(rng: np.random.Generator, n: int, max_rotation: float = 180.0,
                flip_prob: float = 0.5) -> tuple[np.ndarray, np.ndarray]:
    """Angles and flip decisions for ``n`` pairs.

    ``max_rotation >= 180`` covers the full circle, drawn from [0, 360).
    Smaller values draw from [-max_rotation, max_rotation).
    """
    if max_rotation >= 180.0:
        angles = rng.uniform(0.0, 360.0, size=n)
    else:
        angles = rng.uniform(-max_rotation, max_rotation, size=n)
    flips = rng.random(n) < flip_prob
    return angles, flips


def apply_params(images: np.ndarray, angles, flips) -> np.ndarray:
    """Transform a (B, C, H, W) stack, one (angle, flip) per item."""
    return rotate_flip(images, angles, flips, order="bilinear")


def augment_batch(real: np.ndarray, prototype: np.ndarray, rng: np.random.Generator,
                  max_rotation: float = 180.0, flip_prob: float = 0.5):
    """Augment aligned batches; returns (real, prototype, angles, flips).

    Both members of each pair go through one resampling call on their
    channel-stacked concatenation, so they see exactly the same transform.
    """
    angles, flips = draw_params(rng, len(real), max_rotation, flip_prob)
    cr = real.shape[1]
    out = apply_params(np.concatenate([real, prototype], axis=1), angles, flips)
    return out[:, :cr], out[:, cr:], angles, flips


def augment_pair(sample: PairedSample, seed: int | np.random.Generator,
                 max_rotation: float = 180.0, flip_prob: float = 0.5) -> PairedSample:
    """One random rotation and flip shared by both images; the draw is recorded."""
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    real, proto, angles, flips = augment_batch(sample.real[None], sample.prototype[None], rng,
                                               max_rotation, flip_prob)
    return replace(sample, real=real[0], prototype=proto[0],
                   transform=AugmentParams(float(angles[0]), bool(flips[0])))
