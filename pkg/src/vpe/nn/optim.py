"""Parameter initialization and the Adam optimizer."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from vpe.errors import NumericalError
from vpe.nn.layers import BatchNorm2d, Conv2d, Layer, Linear, Param


def init_params(layers: list[Layer], seed: int | np.random.Generator) -> list[Param]:
    """Fill every layer's parameters in place, deterministically in ``seed``.

    Conv and linear weights are drawn from N(0, 2/fan_in); biases are zero;
    batch-norm scale is 1 and shift 0. Layers are visited in list order, so
    the same architecture and seed always give bit-identical parameters.
    """
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    out = []
    for layer in _walk(layers):
        if isinstance(layer, (Conv2d, Linear)):
            w = layer.weight.value
            std = np.sqrt(2.0 / layer.fan_in)
            layer.weight.value = (rng.standard_normal(w.shape) * std).astype(w.dtype)
            layer.bias.value = np.zeros_like(layer.bias.value)
        elif isinstance(layer, BatchNorm2d):
            layer.gamma.value = np.ones_like(layer.gamma.value)
            layer.beta.value = np.zeros_like(layer.beta.value)
            layer.running_mean = np.zeros_like(layer.running_mean)
            layer.running_var = np.ones_like(layer.running_var)
            layer.tracked = False
        for p in layer.params():
            p.grad = np.zeros_like(p.value)
            out.append(p)
    return out


def _walk(layers):
    for layer in layers:
        sub = getattr(layer, "layers", None)
        if sub is not None:
            yield from _walk(sub)
        else:
            yield layer


@dataclass
class AdamState:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step_count: int = 0
    first_moment: dict[str, np.ndarray] = field(default_factory=dict)
    second_moment: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: list[Param], state: AdamState) -> None:
    """One bias-corrected Adam update, then clear all gradients.

    Raises NumericalError without touching any parameter if a gradient is
    not finite.
    """
    for p in params:
        if not np.all(np.isfinite(p.grad)):
            raise NumericalError(f"non-finite gradient in {p.name}; Adam step aborted")
    state.step_count += 1
    t = state.step_count
    bc1 = 1.0 - state.beta1 ** t
    bc2 = 1.0 - state.beta2 ** t
    for p in params:
        g = p.grad
        m = state.first_moment.get(p.name)
        if m is None:
            m = state.first_moment[p.name] = np.zeros_like(p.value)
            state.second_moment[p.name] = np.zeros_like(p.value)
        v = state.second_moment[p.name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        update = state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.epsilon)
        p.value -= update.astype(p.value.dtype)
        p.zero_grad()


class Adam:
    """Thin stateful wrapper binding a parameter list to an AdamState."""

    def __init__(self, params: list[Param], lr=1e-4, beta1=0.9, beta2=0.999, epsilon=1e-8,
                 state: AdamState | None = None):
        self.params = params
        self.state = state or AdamState(lr=lr, beta1=beta1, beta2=beta2, epsilon=epsilon)

    def step(self) -> None:
        adam_step(self.params, self.state)

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()
