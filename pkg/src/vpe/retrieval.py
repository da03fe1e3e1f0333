"""Prototype-to-real retrieval: rankings, PR-AUC, average images, distance heat maps."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping

import numpy as np

from vpe.data.images import write_png
from vpe.data.loader import Dataset
from vpe.errors import DataError
from vpe.model import VPE


@dataclass(frozen=True)
class RankedRetrieval:
    """Gallery items in ascending distance from one query prototype."""

    query_label: int
    ids: tuple[str, ...]
    distances: np.ndarray
    labels: np.ndarray

    @property
    def relevant(self) -> np.ndarray:
        return self.labels == self.query_label


def retrieve(query: np.ndarray, gallery: np.ndarray, ids, labels, query_label: int) -> RankedRetrieval:
    """Rank the whole gallery by Euclidean distance; ties are ordered by item id."""
    gallery = np.asarray(gallery, dtype=np.float64)
    if len(gallery) == 0:
        raise ValueError("cannot retrieve from an empty gallery")
    if len(ids) != len(gallery) or len(labels) != len(gallery):
        raise ValueError("ids and labels must have one entry per gallery row")
    diff = gallery - np.asarray(query, dtype=np.float64)[None]
    dist = np.sqrt(np.einsum("nd,nd->n", diff, diff))
    ids_arr = np.asarray(ids, dtype=str)
    order = np.lexsort((ids_arr, dist))
    return RankedRetrieval(int(query_label), tuple(ids_arr[order].tolist()), dist[order],
                           np.asarray(labels)[order])


def pr_curve(relevant) -> tuple[np.ndarray, np.ndarray]:
    """(precision, recall) after each rank cutoff 1..n."""
    rel = np.asarray(relevant, dtype=bool)
    hits = np.cumsum(rel)
    return hits / np.arange(1, len(rel) + 1), hits / rel.sum()


def pr_auc(ranking: RankedRetrieval | np.ndarray) -> float:
    """Area under the precision-recall curve of a ranking.

    The curve starts at the first retrieved item and each recall increment
    is weighted by the precision reached at that cutoff, so a perfect
    ranking scores exactly 1 and a lone positive at rank n scores 1/n.
    """
    rel = ranking.relevant if isinstance(ranking, RankedRetrieval) else np.asarray(ranking, bool)
    if not rel.any():
        label = getattr(ranking, "query_label", "?")
        raise ValueError(f"query class {label}: no positives in the gallery, PR-AUC undefined")
    precision, recall = pr_curve(rel)
    steps = np.diff(recall, prepend=0.0)
    return float(np.sum(steps * precision))


def mean_pr_auc(rankings) -> float:
    """Unweighted mean over query classes."""
    values = [pr_auc(r) for r in rankings]
    if not values:
        raise ValueError("no rankings to average")
    return float(np.mean(values))


def average_image(ranking: RankedRetrieval, k: int,
                  source: Callable[[str], np.ndarray] | Mapping[str, np.ndarray]) -> np.ndarray:
    """Per-pixel mean of the top-``k`` retrieved images."""
    if not 1 <= k <= len(ranking.ids):
        raise ValueError(f"k={k} outside [1, {len(ranking.ids)}]")
    get = source.__getitem__ if isinstance(source, Mapping) else source
    acc = None
    for item_id in ranking.ids[:k]:
        img = np.asarray(get(item_id), dtype=np.float64)
        acc = img.copy() if acc is None else acc + img
    return acc / k


@dataclass
class DistanceMatrix:
    rows: list[int]       # real-image classes
    cols: list[int]       # prototype classes
    values: np.ndarray
    normalized: bool = False

    def diagonal_contrast(self) -> tuple[float, float]:
        """(mean over matching row/column classes, mean over the rest)."""
        mask = np.array([[r == c for c in self.cols] for r in self.rows])
        return float(self.values[mask].mean()), float(self.values[~mask].mean())


def distance_heatmap(real_by_class: Mapping[int, np.ndarray], prototypes: Mapping[int, np.ndarray],
                     normalize: bool = True) -> DistanceMatrix:
    """Mean Euclidean distance from each class's reals to each prototype."""
    rows = sorted(real_by_class)
    cols = sorted(prototypes)
    proto = np.stack([np.asarray(prototypes[c], dtype=np.float64) for c in cols])
    values = np.zeros((len(rows), len(cols)))
    for i, r in enumerate(rows):
        reals = np.asarray(real_by_class[r], dtype=np.float64)
        if len(reals) == 0:
            raise ValueError(f"class {r} has no real embeddings")
        diff = reals[:, None, :] - proto[None]
        values[i] = np.sqrt(np.einsum("ncd,ncd->nc", diff, diff)).mean(axis=0)
    if normalize:
        sums = values.sum(axis=0, keepdims=True)
        values = np.divide(values, sums, out=np.zeros_like(values), where=sums > 0)
    return DistanceMatrix(rows, cols, values, normalize)


# -- outputs -------------------------------------------------------------------------

BAND_COLORS = [(0.89, 0.10, 0.11), (0.22, 0.49, 0.72), (0.30, 0.69, 0.29), (0.60, 0.31, 0.64),
               (1.00, 0.50, 0.00), (1.00, 1.00, 0.20), (0.65, 0.34, 0.16), (0.97, 0.51, 0.75)]


def render_heatmap(matrix: DistanceMatrix, categories: Mapping[int, str] | None = None,
                   cell: int = 8, band: int = 4) -> np.ndarray:
    """Grayscale ramp (small = dark) with optional category bands on the top and left."""
    v = matrix.values
    lo, hi = float(v.min()), float(v.max())
    gray = (v - lo) / (hi - lo) if hi > lo else np.zeros_like(v)
    body = np.kron(gray, np.ones((cell, cell)))
    pad = band + 1 if categories else 0
    h, w = body.shape
    img = np.ones((3, h + pad, w + pad))
    img[:, pad:, pad:] = body[None]
    if categories:
        names = sorted({categories.get(c, "") for c in matrix.rows + matrix.cols})
        color = {n: BAND_COLORS[i % len(BAND_COLORS)] for i, n in enumerate(names)}
        for j, c in enumerate(matrix.cols):
            rgb = np.array(color[categories.get(c, "")])[:, None, None]
            img[:, :band, pad + j * cell:pad + (j + 1) * cell] = rgb
        for i, r in enumerate(matrix.rows):
            rgb = np.array(color[categories.get(r, "")])[:, None, None]
            img[:, pad + i * cell:pad + (i + 1) * cell, :band] = rgb
    return img


def write_matrix_csv(path: Path, matrix: DistanceMatrix, names: Mapping[int, str]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["real_class"] + [names[c] for c in matrix.cols])
        for r, row in zip(matrix.rows, matrix.values):
            w.writerow([names[r]] + [repr(float(x)) for x in row])


@dataclass
class RetrievalReport:
    split: str
    top_k: int
    auc: dict[int, float]
    mean_auc: float
    rankings: list[RankedRetrieval] = field(repr=False)
    averages: dict[int, np.ndarray] = field(repr=False)
    heatmap: DistanceMatrix = field(repr=False)


def evaluate_retrieval(model: VPE, dataset: Dataset, split: str = "unseen", top_k: int = 100,
                       roles=("test",)) -> RetrievalReport:
    """Query each class prototype of ``split`` against that split's held-out reals."""
    items = dataset.query_items(split, roles)
    labels = dataset.class_labels(split, roles)
    if not items or not labels:
        raise DataError(f"no {split} classes with real images to retrieve")
    gallery = model.embed(dataset.images(items)).astype(np.float64)
    protos = model.embed(dataset.prototypes(labels)).astype(np.float64)
    ids = [it.item_id for it in items]
    gl = np.array([it.label for it in items])
    paths = {it.item_id: it.path for it in items}
    rankings = [retrieve(p, gallery, ids, gl, l) for p, l in zip(protos, labels)]
    k = min(top_k, len(items))
    averages = {r.query_label: average_image(r, k, lambda i: dataset.image(paths[i]))
                for r in rankings}
    by_class = {l: gallery[gl == l] for l in labels if (gl == l).any()}
    heat = distance_heatmap(by_class, dict(zip(labels, protos)), normalize=True)
    auc = {r.query_label: pr_auc(r) for r in rankings}
    return RetrievalReport(split, k, auc, float(np.mean(list(auc.values()))), rankings, averages,
                           heat)


def write_retrieval(report: RetrievalReport, dataset: Dataset, out_dir: str | Path,
                    ranking_depth: int | None = None) -> None:
    """CSV rankings and AUC table, average-image PNGs and the heat map."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    names = {e.label: e.name for e in dataset.manifest.classes}
    depth = ranking_depth or report.top_k
    with open(out / "rankings.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["query_class", "rank", "item_id", "distance", "item_label"])
        for r in report.rankings:
            for rank, (i, d, l) in enumerate(zip(r.ids[:depth], r.distances, r.labels), start=1):
                w.writerow([names[r.query_label], rank, i, repr(float(d)), int(l)])
    with open(out / "auc.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["class", "label", "pr_auc"])
        for label, value in report.auc.items():
            w.writerow([names[label], label, repr(value)])
        w.writerow(["mean", "", repr(report.mean_auc)])
    avg_dir = out / "average_images"
    for label, img in report.averages.items():
        panel = np.concatenate([dataset.prototype(label), img.astype(np.float32)], axis=2)
        write_png(avg_dir / f"{names[label]}.png", panel)
    write_matrix_csv(out / "heatmap.csv", report.heatmap, names)
    cats = {e.label: dataset.manifest.categories.get(e.name, "") for e in dataset.manifest.classes}
    write_png(out / "heatmap.png", render_heatmap(report.heatmap, cats if any(cats.values()) else None))
