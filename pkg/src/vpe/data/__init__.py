"""Symbol data: prototype rendering, perturbation, augmentation and the dataset format."""

from vpe.data.augment import AugmentParams, PairedSample, augment_batch, augment_pair
from vpe.data.benchmark import BenchmarkConfig, generate_benchmark
from vpe.data.images import letterbox, read_png, rotate, rotate_flip, write_png
from vpe.data.loader import Dataset, Item, load_dataset
from vpe.data.manifest import DatasetManifest, scan
from vpe.data.perturb import PerturbationParams, perturb
from vpe.data.render import render_prototypes, render_symbol

__all__ = [
    "AugmentParams", "BenchmarkConfig", "Dataset", "DatasetManifest", "Item", "PairedSample",
    "PerturbationParams", "augment_batch", "augment_pair", "generate_benchmark", "letterbox",
    "load_dataset", "perturb", "read_png", "render_prototypes", "render_symbol", "rotate",
    "rotate_flip", "scan", "write_png",
]
