"""Desk-scale synthetic symbol benchmark written in the dataset directory format."""

from __future__ import annotations

from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from vpe.data.images import write_png
from vpe.data.manifest import (CATEGORIES_FILE, PROTOTYPE_FILE, ClassEntry, DatasetManifest,
                               write_splits)
from vpe.data.perturb import PerturbationParams, perturb
from vpe.data.render import choose_specs, render_symbol
from vpe.errors import ConfigError, DataError


@dataclass
class BenchmarkConfig:
    classes: int = 30
    unseen: int = 10
    val: int = 0              # unseen classes reserved for checkpoint selection
    per_class: int = 100
    seed: int = 7
    render_size: int = 48
    imbalance: float = 1.0    # smallest/largest class count ratio; 1 = balanced
    min_strength: float = 0.4
    max_strength: float = 1.0
    min_crop: float = 0.8     # shorter side of a real crop, relative to the full frame

    def validate(self) -> None:
        if self.classes < 2:
            raise ConfigError(f"classes must be >= 2, got {self.classes}")
        if self.unseen < 2:
            raise ConfigError(f"unseen must be >= 2, got {self.unseen}")
        if self.unseen >= self.classes:
            raise ConfigError(f"unseen ({self.unseen}) must be smaller than classes "
                              f"({self.classes}) so that some classes remain for training")
        if not 0 <= self.val < self.unseen:
            raise ConfigError(f"val ({self.val}) must be in [0, unseen)")
        if self.per_class < 1:
            raise ConfigError("per_class must be >= 1")
        if not 0 < self.imbalance <= 1:
            raise ConfigError(f"imbalance ratio must lie in (0, 1], got {self.imbalance}")
        if not 0 <= self.min_strength <= self.max_strength <= 1:
            raise ConfigError("need 0 <= min_strength <= max_strength <= 1")
        if not 0.2 <= self.min_crop <= 1:
            raise ConfigError("min_crop must lie in [0.2, 1]")


def class_counts(cfg: BenchmarkConfig) -> list[int]:
    """Per-class real counts; a geometric progression when imbalanced."""
    if cfg.imbalance == 1:
        return [cfg.per_class] * cfg.classes
    ratios = cfg.imbalance ** (np.arange(cfg.classes) / (cfg.classes - 1))
    return [max(1, int(round(cfg.per_class * r))) for r in ratios]


def synthesize_real(prototype: np.ndarray, mask: np.ndarray, rng: np.random.Generator,
                    cfg: BenchmarkConfig) -> np.ndarray:
    strength = rng.uniform(cfg.min_strength, cfg.max_strength)
    params = PerturbationParams.sample(rng, strength)
    img = perturb(prototype, params, seed=int(rng.integers(2 ** 31)), mask=mask)
    # non-square crop, as a detector's bounding box would give
    _, h, w = img.shape
    frac = rng.uniform(cfg.min_crop, 1.0)
    if rng.random() < 0.5:
        ch, cw = h, max(1, int(round(w * frac)))
    else:
        ch, cw = max(1, int(round(h * frac))), w
    top = int(rng.integers(0, h - ch + 1))
    left = int(rng.integers(0, w - cw + 1))
    return img[:, top:top + ch, left:left + cw]


def generate_benchmark(out_dir: str | Path, cfg: BenchmarkConfig | None = None,
                       **overrides) -> DatasetManifest:
    """Render prototypes and perturbed reals, write files and splits; pure in (cfg, seed)."""
    cfg = cfg or BenchmarkConfig()
    if overrides:
        cfg = BenchmarkConfig(**{**asdict(cfg), **overrides})
    cfg.validate()
    root = Path(out_dir)
    try:
        root.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise DataError(f"cannot create {root}: {exc}") from exc
    try:
        specs = choose_specs(cfg.classes, cfg.seed, cfg.render_size)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc

    counts = class_counts(cfg)
    n_seen = cfg.classes - cfg.unseen
    width = max(2, len(str(cfg.classes - 1)))
    entries = []
    for label, (spec, count) in enumerate(zip(specs, counts)):
        name = f"{label:0{width}d}_{spec.name}"
        d = root / name
        proto, mask = render_symbol(spec, cfg.render_size)
        write_png(d / PROTOTYPE_FILE, proto)
        rng = np.random.default_rng([cfg.seed, label, 1])
        reals = []
        for j in range(count):
            path = d / f"real_{j:04d}.png"
            write_png(path, synthesize_real(proto, mask, rng, cfg))
            reals.append(path)
        seen = label < n_seen
        role = "train" if seen else ("val" if label - n_seen < cfg.val else "test")
        entries.append(ClassEntry(name, label, d / PROTOTYPE_FILE, tuple(reals), seen, role))

    write_splits(root / "splits.txt", entries)
    (root / CATEGORIES_FILE).write_text(
        "".join(f"{e.name} {spec.shape}\n" for e, spec in zip(entries, specs)))
    (root / "benchmark.txt").write_text(
        "".join(f"{k} = {v}\n" for k, v in asdict(cfg).items()))
    return DatasetManifest(root, entries, {e.name: s.shape for e, s in zip(entries, specs)})
