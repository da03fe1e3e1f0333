"""Central finite-difference verification of analytic gradients."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from vpe.nn.layers import Layer, kink_signature


@dataclass
class GradCheckReport:
    errors: dict[str, float] = field(default_factory=dict)
    checked: dict[str, int] = field(default_factory=dict)
    kinks: dict[str, int] = field(default_factory=dict)

    @property
    def max_error(self) -> float:
        return max(self.errors.values()) if self.errors else 0.0

    def passed(self, tol: float) -> bool:
        return self.max_error < tol

    def __str__(self) -> str:
        rows = [f"{k:40s} {v:.3e} ({self.checked[k]} coords, {self.kinks.get(k, 0)} kinks skipped)"
                for k, v in self.errors.items()]
        return "\n".join(rows + [f"max relative error: {self.max_error:.3e}"])


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-3) -> float:
    """Max-norm discrepancy scaled by the larger gradient magnitude.

    ``floor`` bounds the denominator from below so tensors whose true gradient
    is identically zero (a conv bias feeding batch norm) are judged on absolute
    error instead of amplified round-off.
    """
    diff = np.max(np.abs(analytic - numeric)) if analytic.size else 0.0
    scale = max(np.max(np.abs(analytic)) if analytic.size else 0.0,
                np.max(np.abs(numeric)) if numeric.size else 0.0, floor)
    return float(diff / scale)


def check_tensors(loss_fn: Callable[[], float], tensors: dict[str, np.ndarray],
                  analytic: dict[str, np.ndarray], step: float = 1e-5, max_coords: int = 40,
                  seed: int = 0, floor: float = 1e-3,
                  signature_fn: Callable[[], bytes] | None = None) -> GradCheckReport:
    """Compare ``analytic`` gradients with central differences of ``loss_fn``.

    ``tensors`` are perturbed in place; ``loss_fn`` must read them afresh on
    every call. Tensors larger than ``max_coords`` are subsampled.

    ``signature_fn`` returns the activation pattern of the last evaluation.
    A coordinate whose +/- step lands on different sides of a rectifier kink
    has no meaningful central difference; it is skipped and counted in
    ``report.kinks`` and a replacement coordinate is drawn when available.
    """
    rng = np.random.default_rng(seed)
    report = GradCheckReport()
    for name, t in tensors.items():
        flat = t.reshape(-1)
        if flat.base is None and t.size:
            raise ValueError(f"{name}: tensor must be contiguous to be perturbed in place")
        n = flat.size
        order = rng.permutation(n)
        idx, num, kinks = [], [], 0
        for i in order:
            if len(idx) == max_coords:
                break
            orig = flat[i]
            flat[i] = orig + step
            lp = loss_fn()
            sp = signature_fn() if signature_fn else None
            flat[i] = orig - step
            lm = loss_fn()
            sm = signature_fn() if signature_fn else None
            flat[i] = orig
            if sp != sm:
                kinks += 1
                continue
            idx.append(i)
            num.append((lp - lm) / (2 * step))
        ana = analytic[name].reshape(-1)[np.asarray(idx, dtype=int)]
        report.errors[name] = relative_error(ana, np.asarray(num), floor)
        report.checked[name] = len(idx)
        report.kinks[name] = kinks
    return report


def gradient_check(layer: Layer, input_shape: tuple[int, ...], step: float = 1e-5,
                   max_coords: int = 40, seed: int = 0, train: bool = True,
                   x: np.ndarray | None = None) -> GradCheckReport:
    """Finite-difference check of one layer's backward in 64-bit mode.

    The scalar objective is ``sum(forward(x) * R)`` for a fixed random ``R``,
    so the upstream gradient handed to ``backward`` is ``R``. Covers the
    input and every parameter tensor.
    """
    rng = np.random.default_rng(seed)
    layer.astype(np.float64)
    if x is None:
        x = rng.standard_normal(input_shape)
    x = np.ascontiguousarray(x, dtype=np.float64)
    out = layer.forward(x, train)
    r = rng.standard_normal(out.shape)
    for p in layer.params():
        p.zero_grad()
    dx = layer.backward(r)

    tensors = {"input": x}
    analytic = {"input": dx}
    for p in layer.params():
        tensors[p.name] = p.value
        analytic[p.name] = p.grad.copy()

    def loss():
        y = layer.forward(x, train)
        layer.backward(np.zeros_like(y))  # release cache
        return float(np.sum(y * r))

    for p in layer.params():
        p.zero_grad()
    report = check_tensors(loss, tensors, analytic, step=step, max_coords=max_coords, seed=seed,
                           signature_fn=lambda: kink_signature([layer]))
    for p in layer.params():
        p.zero_grad()
    return report
