"""The prototype-decoding variational encoder and its training objective."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import numpy as np

from vpe.errors import ConfigError
from vpe.nn import (BatchNorm2d, Conv2d, GradCheckReport, LeakyReLU, Linear, Param, Reshape, Sequential, Sigmoid,
                    UpConv2d, Upsample2x, conv_output_size, check_tensors, init_params,
                    kink_signature)

BCE_CLAMP = 1e-7


@dataclass
class VpeConfig:
    input_size: int = 48
    in_channels: int = 3
    out_channels: int = 3
    latent_dim: int = 300
    # (channels, kernel) per stride-2 encoder block
    encoder: tuple[tuple[int, int], ...] = ((100, 7), (150, 4), (250, 4))
    decoder_kernel: int = 3
    mc_samples: int = 1
    target_mode: str = "prototype"
    kl_weight: float = 1.0
    leaky_slope: float = 0.2
    bn_eps: float = 1e-5
    bn_momentum: float = 0.1

    def __post_init__(self):
        self.encoder = tuple((int(c), int(k)) for c, k in self.encoder)
        self.validate()

    def validate(self) -> None:
        if len(self.encoder) != 3:
            raise ConfigError(f"encoder needs exactly three (channels, kernel) blocks, got {len(self.encoder)}")
        if self.input_size <= 0 or self.input_size % 8:
            raise ConfigError(f"input_size must be a positive multiple of 8, got {self.input_size}")
        if self.mc_samples < 1:
            raise ConfigError(f"mc_samples must be >= 1, got {self.mc_samples}")
        if self.target_mode not in ("prototype", "self"):
            raise ConfigError(f"target_mode must be 'prototype' or 'self', got {self.target_mode!r}")
        if self.latent_dim < 1:
            raise ConfigError("latent_dim must be positive")
        if self.kl_weight < 0:
            raise ConfigError("kl_weight must be non-negative")
        if not 0 <= self.leaky_slope < 1:
            raise ConfigError(f"leaky_slope must lie in [0, 1), got {self.leaky_slope}")
        if self.target_mode == "self" and self.in_channels != self.out_channels:
            raise ConfigError("self-reconstruction needs in_channels == out_channels")

    @classmethod
    def toy(cls, **overrides) -> "VpeConfig":
        """16x16 desk-scale architecture."""
        base = dict(input_size=16, encoder=((16, 3), (32, 3), (64, 3)))
        base.update(overrides)
        return cls(**base)

    def replace(self, **changes) -> "VpeConfig":
        return dataclasses.replace(self, **changes)


@dataclass
class GaussianLatent:
    mean: np.ndarray
    log_variance: np.ndarray
    sample: np.ndarray | None = None
    eps: np.ndarray | None = None


@dataclass
class LossParts:
    loss: float
    recon: float
    kl: float
    extras: dict = field(default_factory=dict)


def reparameterize(latent: GaussianLatent, eps: np.ndarray) -> np.ndarray:
    """z = mu + exp(log_var / 2) * eps."""
    return latent.mean + np.exp(0.5 * latent.log_variance) * eps


def kl_divergence(mean: np.ndarray, log_variance: np.ndarray) -> np.ndarray:
    """KL(N(mean, exp(log_variance)) || N(0, I)) per sample (last axis summed)."""
    mean = np.asarray(mean, dtype=np.float64)
    log_variance = np.asarray(log_variance, dtype=np.float64)
    # expm1(lv) - lv is the per-dimension variance term, non-negative and exact near 0
    return 0.5 * np.sum(mean * mean + np.expm1(log_variance) - log_variance, axis=-1)


def reconstruction_loss(prediction: np.ndarray, target: np.ndarray) -> np.ndarray:
    """Binary cross entropy summed over every non-batch entry, one value per sample."""
    prediction = np.asarray(prediction)
    target = np.asarray(target)
    if prediction.shape != target.shape:
        raise ValueError(f"prediction shape {prediction.shape} != target shape {target.shape}")
    p = np.clip(prediction.astype(np.float64), BCE_CLAMP, 1 - BCE_CLAMP)
    t = target.astype(np.float64)
    bce = -(t * np.log(p) + (1 - t) * np.log1p(-p))
    return bce.reshape(bce.shape[0], -1).sum(axis=1)


class VPE:
    """Encoder (3 stride-2 conv blocks + mean/log-variance heads) and mirrored decoder."""

    def __init__(self, config: VpeConfig, seed: int | np.random.Generator = 0, dtype=np.float32):
        self.config = cfg = config
        slope = cfg.leaky_slope
        size = cfg.input_size
        blocks = []
        c_in = cfg.in_channels
        for i, (c, k) in enumerate(cfg.encoder, start=1):
            pad = (k - 1) // 2
            nxt = conv_output_size(size, k, 2, pad)
            if nxt * 2 != size:
                raise ConfigError(f"encoder block {i}: kernel {k} does not halve {size}")
            blocks += [Conv2d(f"enc.conv{i}", c_in, c, k, stride=2, padding=pad, dtype=dtype),
                       BatchNorm2d(f"enc.bn{i}", c, cfg.bn_eps, cfg.bn_momentum, dtype=dtype),
                       LeakyReLU(slope)]
            c_in, size = c, nxt
        self.feature_shape = (c_in, size, size)
        flat = c_in * size * size
        blocks.append(Reshape((flat,)))
        self.encoder = Sequential(blocks, "encoder")
        self.mean_head = Linear("enc.mean", flat, cfg.latent_dim, dtype=dtype)
        self.logvar_head = Linear("enc.logvar", flat, cfg.latent_dim, dtype=dtype)

        dec = [Linear("dec.fc", cfg.latent_dim, flat, dtype=dtype), Reshape(self.feature_shape)]
        chans = [c for c, _ in reversed(cfg.encoder)][1:] + [cfg.out_channels]
        c_in = self.feature_shape[0]
        kd = cfg.decoder_kernel
        for i, c in enumerate(chans, start=1):
            if kd == 3:
                dec.append(UpConv2d(f"dec.conv{i}", c_in, c, dtype=dtype))
            else:
                dec += [Upsample2x(),
                        Conv2d(f"dec.conv{i}", c_in, c, kd, stride=1, padding=(kd - 1) // 2,
                               dtype=dtype)]
            dec += [BatchNorm2d(f"dec.bn{i}", c, cfg.bn_eps, cfg.bn_momentum, dtype=dtype),
                    LeakyReLU(slope)]
            c_in = c
        self.decoder = Sequential(dec, "decoder")
        self.output = Sigmoid()
        self.dtype = np.dtype(dtype)
        init_params(self.layers, seed)

    @property
    def layers(self):
        return [self.encoder, self.mean_head, self.logvar_head, self.decoder]

    def params(self) -> list[Param]:
        return [p for layer in self.layers for p in layer.params()]

    def batchnorms(self) -> list[BatchNorm2d]:
        return [l for seq in (self.encoder, self.decoder) for l in seq.layers
                if isinstance(l, BatchNorm2d)]

    def astype(self, dtype) -> "VPE":
        for layer in self.layers:
            layer.astype(dtype)
        self.dtype = np.dtype(dtype)
        return self

    def zero_grad(self) -> None:
        for p in self.params():
            p.zero_grad()

    def kink_signature(self) -> bytes:
        return kink_signature(self.layers)

    # -- state ---------------------------------------------------------------

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {p.name: p.value for p in self.params()}
        for bn in self.batchnorms():
            if bn.tracked:
                state[f"{bn.name}.running_mean"] = bn.running_mean
                state[f"{bn.name}.running_var"] = bn.running_var
        return state

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        for p in self.params():
            if p.name not in state:
                raise KeyError(f"missing parameter {p.name}")
            if state[p.name].shape != p.value.shape:
                raise ValueError(f"{p.name}: shape {state[p.name].shape} != {p.value.shape}")
            p.value = np.array(state[p.name], dtype=self.dtype)
            p.grad = np.zeros_like(p.value)
        for bn in self.batchnorms():
            key = f"{bn.name}.running_mean"
            if key in state:
                bn.running_mean = np.array(state[key], dtype=self.dtype)
                bn.running_var = np.array(state[f"{bn.name}.running_var"], dtype=self.dtype)
                bn.tracked = True

    # -- forward pieces --------------------------------------------------------

    def _check_input(self, x: np.ndarray) -> np.ndarray:
        cfg = self.config
        if x.ndim != 4 or x.shape[1] != cfg.in_channels or x.shape[2:] != (cfg.input_size,) * 2:
            raise ValueError(
                f"expected input (N, {cfg.in_channels}, {cfg.input_size}, {cfg.input_size}), "
                f"got {x.shape}; resize or letterbox before encoding")
        return np.ascontiguousarray(x, dtype=self.dtype)

    def encode(self, x: np.ndarray, train: bool = False) -> GaussianLatent:
        h = self.encoder.forward(self._check_input(x), train)
        return GaussianLatent(self.mean_head.forward(h, train), self.logvar_head.forward(h, train))

    def decode(self, z: np.ndarray, train: bool = False) -> np.ndarray:
        z = np.asarray(z, dtype=self.dtype)
        if z.ndim != 2 or z.shape[1] != self.config.latent_dim:
            raise ValueError(f"latent batch must be (N, {self.config.latent_dim}), got {z.shape}")
        return self.output.forward(self.decoder.forward(z, train))

    def embed(self, x: np.ndarray, batch_size: int = 512) -> np.ndarray:
        """Latent means in eval mode, the feature used for all nearest-neighbour work."""
        out = [self.encode(x[i:i + batch_size], train=False).mean
               for i in range(0, len(x), batch_size)]
        if not out:
            return np.zeros((0, self.config.latent_dim), dtype=self.dtype)
        return np.concatenate(out)

    # -- objective -------------------------------------------------------------

    def loss_and_grad(self, x: np.ndarray, t: np.ndarray, eps: np.ndarray | None = None,
                      rng: np.random.Generator | None = None, train: bool = True) -> LossParts:
        """Batch-mean of (1/S) sum_s BCE(decode(z_s), target) + kl_weight * KL.

        ``t`` is the reconstruction target; in ``target_mode='self'`` it is
        ignored and ``x`` is reconstructed instead. ``eps`` has shape
        (S, N, latent_dim); drawn from ``rng`` when omitted. Accumulates
        parameter gradients (call ``zero_grad`` first).
        """
        cfg = self.config
        x = self._check_input(x)
        target = x if cfg.target_mode == "self" else np.asarray(t, dtype=self.dtype)
        n = x.shape[0]
        s = cfg.mc_samples
        expected = (n, cfg.out_channels, cfg.input_size, cfg.input_size)
        if target.shape != expected:
            raise ValueError(f"target shape {target.shape} != {expected}")
        if eps is None:
            if rng is None:
                raise ValueError("either eps or rng is required")
            eps = rng.standard_normal((s, n, cfg.latent_dim))
        eps = np.asarray(eps, dtype=self.dtype).reshape(s, n, cfg.latent_dim)

        h = self.encoder.forward(x, train)
        mu = self.mean_head.forward(h, train)
        logvar = self.logvar_head.forward(h, train)
        sigma = np.exp(0.5 * logvar)
        z = (mu[None] + sigma[None] * eps).reshape(s * n, cfg.latent_dim)
        logits = self.decoder.forward(z, train)
        p = self.output.forward(logits, train)
        self.output._out = None

        tt = np.broadcast_to(target[None], (s,) + target.shape).reshape(p.shape)
        recon = reconstruction_loss(p, tt).reshape(s, n).mean(axis=0)
        kl = kl_divergence(mu, logvar)
        per_sample = recon + cfg.kl_weight * kl
        loss = float(per_sample.mean())

        # BCE through the sigmoid collapses to (p - t); zero where the clamp is active
        active = (p > BCE_CLAMP) & (p < 1 - BCE_CLAMP)
        dlogits = np.where(active, p - tt, 0).astype(self.dtype) / (n * s)
        dz = self.decoder.backward(dlogits).reshape(s, n, cfg.latent_dim)
        kw = cfg.kl_weight / n
        dmu = dz.sum(axis=0) + kw * mu
        dlogvar = (dz * eps).sum(axis=0) * 0.5 * sigma + kw * 0.5 * np.expm1(logvar)
        dh = self.mean_head.backward(dmu.astype(self.dtype))
        dh = dh + self.logvar_head.backward(dlogvar.astype(self.dtype))
        self.encoder.backward(dh)
        return LossParts(loss, float(recon.mean()), float(kl.mean()),
                         extras={"target": target})


def loss_gradient_check(config: VpeConfig | None = None, seed: int = 0, batch: int = 2,
                        max_coords: int = 20, step: float = 1e-5) -> GradCheckReport:
    """Finite-difference check of the full loss w.r.t. every parameter, in float64.

    Inputs, targets and noise are random but fixed, so the objective is a
    deterministic function of the parameters.
    """
    config = config or VpeConfig.toy()
    model = VPE(config, seed=seed, dtype=np.float64)
    rng = np.random.default_rng(seed + 1)
    shape = (batch, config.in_channels, config.input_size, config.input_size)
    x = rng.random(shape)
    t = rng.random((batch, config.out_channels, config.input_size, config.input_size))
    eps = rng.standard_normal((config.mc_samples, batch, config.latent_dim))
    model.zero_grad()
    model.loss_and_grad(x, t, eps=eps)
    analytic = {p.name: p.grad.copy() for p in model.params()}
    tensors = {p.name: p.value for p in model.params()}
    return check_tensors(lambda: model.loss_and_grad(x, t, eps=eps).loss, tensors, analytic,
                         step=step, max_coords=max_coords, seed=seed,
                         signature_fn=model.kink_signature)
