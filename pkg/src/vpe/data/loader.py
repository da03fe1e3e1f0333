"""Lazy paired-dataset access on top of a scanned directory."""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path

import numpy as np

from vpe.data.augment import PairedSample
from vpe.data.images import letterbox, read_png
from vpe.data.manifest import DatasetManifest, scan
from vpe.errors import DataError


@dataclass(frozen=True)
class Item:
    """One real image reference."""

    item_id: str       # "<class>/<file>"
    path: Path
    label: int


class Dataset:
    """Images are decoded and letterboxed to ``input_size`` on first access.

    Seen classes marked ``train`` keep their last ``holdout`` fraction of real
    images (in file order) out of training; those serve as the seen-class
    queries. Unseen classes contribute all their reals as queries.
    """

    def __init__(self, manifest: DatasetManifest, input_size: int, holdout: float = 0.2):
        if not 0.0 <= holdout < 1.0:
            raise ValueError(f"holdout fraction must lie in [0, 1), got {holdout}")
        self.manifest = manifest
        self.input_size = input_size
        self.holdout = holdout
        self._load = lru_cache(maxsize=None)(self._load_uncached)

    @property
    def n_classes(self) -> int:
        return len(self.manifest.classes)

    def _load_uncached(self, path: Path) -> np.ndarray:
        return letterbox(read_png(path), self.input_size)

    def image(self, path: Path) -> np.ndarray:
        return self._load(Path(path))

    def prototype(self, label: int) -> np.ndarray:
        return self.image(self.manifest.by_label(label).prototype)

    def prototypes(self, labels=None) -> np.ndarray:
        labels = range(self.n_classes) if labels is None else labels
        return np.stack([self.prototype(l) for l in labels])

    def _split_reals(self, entry):
        reals = list(entry.reals)
        if entry.seen and entry.role == "train":
            n_test = math.ceil(self.holdout * len(reals)) if self.holdout > 0 else 0
            cut = len(reals) - n_test
            return reals[:cut], reals[cut:]
        return [], reals

    def _items(self, entry, paths):
        return [Item(f"{entry.name}/{p.name}", p, entry.label) for p in paths]

    def train_items(self) -> list[Item]:
        out = []
        for e in self.manifest.classes:
            if e.seen and e.role == "train":
                out += self._items(e, self._split_reals(e)[0])
        return out

    def train_labels(self) -> list[int]:
        return [e.label for e in self.manifest.classes if e.seen and e.role == "train"]

    def query_items(self, split: str = "all", roles=("test",)) -> list[Item]:
        """Held-out real images; ``split`` is 'all', 'seen' or 'unseen'.

        ``roles`` selects unseen classes by their role (``test`` or ``val``);
        seen training classes always contribute their held-out images.
        """
        if split not in ("all", "seen", "unseen"):
            raise ValueError(f"split must be all|seen|unseen, got {split!r}")
        out = []
        for e in self.manifest.classes:
            if split == "seen" and not e.seen or split == "unseen" and e.seen:
                continue
            if e.seen and e.role == "train":
                out += self._items(e, self._split_reals(e)[1])
            elif e.role in roles:
                out += self._items(e, e.reals)
        return out

    def class_labels(self, split: str = "all", roles=("test",)) -> list[int]:
        labels = []
        for e in self.manifest.classes:
            if split == "seen" and not e.seen or split == "unseen" and e.seen:
                continue
            if (e.seen and e.role == "train") or e.role in roles:
                labels.append(e.label)
        return labels

    def images(self, items: list[Item]) -> np.ndarray:
        if not items:
            return np.zeros((0, 3, self.input_size, self.input_size), dtype=np.float32)
        return np.stack([self.image(it.path) for it in items])

    def samples(self, items: list[Item]):
        """Yield PairedSamples lazily."""
        for it in items:
            yield PairedSample(self.image(it.path), self.prototype(it.label), it.label, "loaded")

    def check_trainable(self) -> None:
        labels = self.train_labels()
        if not labels:
            raise DataError(f"{self.manifest.root}: no seen training classes")
        if not self.train_items():
            raise DataError(f"{self.manifest.root}: training classes contain no real images")
        for l in labels:
            entry = self.manifest.by_label(l)
            if not entry.prototype.is_file():
                raise DataError(f"class {entry.name!r} lacks a prototype")


def load_dataset(root: str | Path, input_size: int, holdout: float = 0.2) -> Dataset:
    return Dataset(scan(root), input_size, holdout)
