"""Training loop: prototype/real sampling schedule, paired augmentation, Adam."""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from vpe.data.augment import augment_batch
from vpe.data.loader import Dataset
from vpe.errors import ConfigError, NumericalError
from vpe.model import VPE, VpeConfig
from vpe.nn import AdamState, adam_step

log = logging.getLogger(__name__)

STREAMS = {"init": 0, "sampling": 1, "augmentation": 2, "perturbation": 3, "noise": 4}


def stream(seed: int, name: str) -> np.random.Generator:
    """Independent named random stream derived from the run seed."""
    return np.random.default_rng([int(seed), STREAMS[name]])


@dataclass
class TrainConfig:
    iterations: int = 2000
    batch_size: int = 128
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    augment: bool = True
    max_rotation: float = 180.0
    flip_prob: float = 0.5
    prototype_ratio: float = 200.0   # reals drawn per prototype draw
    seed: int = 0
    val_every: int = 0
    log_every: int = 100

    def validate(self) -> None:
        if self.iterations < 0:
            raise ConfigError("iterations must be >= 0")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.lr <= 0:
            raise ConfigError("lr must be positive")
        if self.prototype_ratio < 0:
            raise ConfigError("prototype_ratio must be >= 0")
        if not 0 <= self.flip_prob <= 1:
            raise ConfigError("flip_prob must lie in [0, 1]")


@dataclass
class TrainState:
    model: VPE
    adam: AdamState
    iteration: int = 0
    trace: list[tuple[int, float, float, float]] = field(default_factory=list)
    rng_state: dict = field(default_factory=dict)
    best_score: float | None = None
    best_state: dict | None = None
    best_iteration: int | None = None


class PairSampler:
    """Draws mini-batches where on average one input in (ratio + 1) is a prototype.

    A prototype draw is paired with itself as target; a real draw with its
    class prototype. All arrays are drawn every step so the random stream
    advances identically regardless of outcomes.
    """

    def __init__(self, reals: np.ndarray, labels: np.ndarray, prototypes: np.ndarray,
                 train_labels: list[int], ratio: float):
        self.reals = reals
        self.labels = labels
        self.prototypes = prototypes
        self.train_labels = np.asarray(train_labels)
        self.p_proto = 1.0 / (ratio + 1.0)

    def draw(self, rng: np.random.Generator, batch: int):
        is_proto = rng.random(batch) < self.p_proto
        idx = rng.integers(0, len(self.reals), size=batch)
        cls = self.train_labels[rng.integers(0, len(self.train_labels), size=batch)]
        sel = is_proto[:, None, None, None]
        x = np.where(sel, self.prototypes[cls], self.reals[idx])
        t = np.where(sel, self.prototypes[cls], self.prototypes[self.labels[idx]])
        return x, t, is_proto


def build_sampler(dataset: Dataset, ratio: float) -> PairSampler:
    dataset.check_trainable()
    items = dataset.train_items()
    reals = dataset.images(items)
    labels = np.array([it.label for it in items])
    prototypes = dataset.prototypes()
    return PairSampler(reals, labels, prototypes, dataset.train_labels(), ratio)


def smoothed(trace, window: int = 100) -> tuple[float, float]:
    """(mean loss of the first 10 steps, mean loss of the last ``window`` steps)."""
    losses = np.array([row[1] for row in trace])
    return float(losses[:10].mean()), float(losses[-window:].mean())


def train(dataset: Dataset, config: VpeConfig, tcfg: TrainConfig,
          validate: Callable[[VPE], float] | None = None, keep_best: bool = False,
          resume: TrainState | None = None,
          on_step: Callable[[int, np.ndarray, np.ndarray], None] | None = None) -> TrainState:
    """Optimize the loss for ``tcfg.iterations`` steps (counting from ``resume``).

    ``validate`` is called every ``val_every`` steps on the model and returns a
    score (higher is better); with ``keep_best`` the best-scoring parameters
    are kept in the returned state. ``on_step`` sees each step's input batch
    and the reconstruction target the loss actually used.
    """
    tcfg.validate()
    if dataset.input_size != config.input_size:
        raise ConfigError(f"dataset input size {dataset.input_size} != model input size "
                          f"{config.input_size}")
    sampler = build_sampler(dataset, tcfg.prototype_ratio)

    sampling = stream(tcfg.seed, "sampling")
    aug = stream(tcfg.seed, "augmentation")
    noise = stream(tcfg.seed, "noise")
    if resume is not None:
        state = resume
        if state.rng_state:
            sampling.bit_generator.state = state.rng_state["sampling"]
            aug.bit_generator.state = state.rng_state["augmentation"]
            noise.bit_generator.state = state.rng_state["noise"]
    else:
        model = VPE(config, seed=stream(tcfg.seed, "init"))
        state = TrainState(model, AdamState(tcfg.lr, tcfg.beta1, tcfg.beta2, tcfg.epsilon))
    model = state.model
    params = model.params()
    t0 = time.time()
    while state.iteration < tcfg.iterations:
        x, t, _ = sampler.draw(sampling, tcfg.batch_size)
        if tcfg.augment:
            x, t, _, _ = augment_batch(x, t, aug, tcfg.max_rotation, tcfg.flip_prob)
        model.zero_grad()
        parts = model.loss_and_grad(x, t, rng=noise)
        if on_step is not None:
            on_step(state.iteration, x, parts.extras["target"])
        if not np.isfinite(parts.loss):
            raise NumericalError(f"non-finite loss {parts.loss} at iteration {state.iteration}")
        adam_step(params, state.adam)
        state.iteration += 1
        state.trace.append((state.iteration, parts.loss, parts.recon, parts.kl))
        if tcfg.log_every and state.iteration % tcfg.log_every == 0:
            log.info("iter %d loss %.3f recon %.3f kl %.3f (%.1fs)", state.iteration, parts.loss,
                     parts.recon, parts.kl, time.time() - t0)
        if validate and tcfg.val_every and state.iteration % tcfg.val_every == 0:
            score = validate(model)
            log.info("iter %d validation %.4f", state.iteration, score)
            if state.best_score is None or score > state.best_score:
                state.best_score = score
                state.best_iteration = state.iteration
                if keep_best:
                    state.best_state = {k: v.copy() for k, v in model.state_dict().items()}
    state.rng_state = {"sampling": sampling.bit_generator.state,
                       "augmentation": aug.bit_generator.state,
                       "noise": noise.bit_generator.state}
    if keep_best and state.best_state is not None:
        model.load_state_dict(state.best_state)
    return state
