"""Support sets, nearest-prototype classification and the one-shot protocols."""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from vpe.data.loader import Dataset
from vpe.errors import DataError
from vpe.model import VPE

PROTOCOLS = ("all", "unseen", "mixed")


@dataclass(frozen=True)
class SupportSet:
    """Label-sorted prototype embeddings; labels are unique."""

    labels: tuple[int, ...]
    embeddings: np.ndarray  # (C, D) float64

    def __post_init__(self):
        if len(set(self.labels)) != len(self.labels):
            raise ValueError("support set labels must be unique")
        if self.embeddings.ndim != 2 or len(self.embeddings) != len(self.labels):
            raise ValueError("support embeddings must be (C, D) with one row per label")
        if list(self.labels) != sorted(self.labels):
            raise ValueError("support set labels must be sorted")

    def __len__(self) -> int:
        return len(self.labels)

    @classmethod
    def from_pairs(cls, labels, embeddings) -> "SupportSet":
        labels = [int(l) for l in labels]
        if len(set(labels)) != len(labels):
            dup = sorted({l for l in labels if labels.count(l) > 1})
            raise ValueError(f"duplicate support classes: {dup}")
        order = np.argsort(labels, kind="stable")
        emb = np.asarray(embeddings, dtype=np.float64)[order]
        return cls(tuple(labels[i] for i in order), emb)


def build_support(model: VPE, prototypes: np.ndarray, labels) -> SupportSet:
    """Embed one prototype per class."""
    labels = list(labels)
    if len(labels) != len(prototypes):
        raise ValueError(f"{len(prototypes)} prototypes for {len(labels)} labels")
    if len(set(labels)) != len(labels):
        raise ValueError("duplicate class in support prototypes")
    return SupportSet.from_pairs(labels, model.embed(prototypes))


def squared_distances(queries: np.ndarray, embeddings: np.ndarray) -> np.ndarray:
    diff = queries[:, None, :] - embeddings[None, :, :]
    return np.einsum("qcd,qcd->qc", diff, diff)


def nearest(queries, embeddings, labels, chunk: int = 1024) -> tuple[np.ndarray, np.ndarray]:
    """Nearest support row per query by squared Euclidean distance.

    Rows may repeat a label. Ties go to the lowest label. Returns (labels,
    squared distances).
    """
    q = np.atleast_2d(np.asarray(queries, dtype=np.float64))
    e = np.asarray(embeddings, dtype=np.float64)
    lab = np.asarray(labels)
    if len(e) == 0:
        raise ValueError("cannot classify against an empty support set")
    if q.shape[1] != e.shape[1]:
        raise ValueError(f"query dimension {q.shape[1]} != support dimension {e.shape[1]}")
    order = np.argsort(lab, kind="stable")
    e, lab = e[order], lab[order]
    pred = np.empty(len(q), dtype=lab.dtype)
    dist = np.empty(len(q))
    for start in range(0, len(q), chunk):
        d = squared_distances(q[start:start + chunk], e)
        idx = d.argmin(axis=1)   # first minimum, i.e. lowest label
        pred[start:start + chunk] = lab[idx]
        dist[start:start + chunk] = d[np.arange(len(idx)), idx]
    return pred, dist


def classify(queries, support: SupportSet) -> np.ndarray:
    """Class label of the nearest support embedding for each query row."""
    return nearest(queries, support.embeddings, support.labels)[0]


def brute_force_nn_oracle(queries, support: SupportSet) -> list[int]:
    """Plain double loop; an independent check on ``classify``."""
    out = []
    for q in np.atleast_2d(np.asarray(queries, dtype=np.float64)).tolist():
        best, best_label = None, None
        for label, e in zip(support.labels, support.embeddings.tolist()):
            d = 0.0
            for a, b in zip(q, e):
                d += (a - b) * (a - b)
            if best is None or d < best or (d == best and label < best_label):
                best, best_label = d, label
        out.append(best_label)
    return out


# -- protocols -------------------------------------------------------------------

@dataclass(frozen=True)
class EvalProtocol:
    """Which classes form the support and which queries are scored.

    ``all``: every class in the support, every held-out query.
    ``unseen``: unseen classes only, in both support and queries.
    ``mixed``: every class in the support, queries from unseen classes only.
    """

    name: str
    roles: tuple[str, ...] = ("test",)

    def __post_init__(self):
        if self.name not in PROTOCOLS:
            raise ValueError(f"protocol must be one of {PROTOCOLS}, got {self.name!r}")

    def support_labels(self, dataset: Dataset) -> list[int]:
        split = "unseen" if self.name == "unseen" else "all"
        return dataset.class_labels(split, self.roles)

    def query_items(self, dataset: Dataset):
        split = "all" if self.name == "all" else "unseen"
        return dataset.query_items(split, self.roles)


@dataclass
class EvalReport:
    protocol: str
    accuracy: float
    n_queries: int
    n_support: int
    per_class: dict[int, dict] = field(default_factory=dict)
    confusion: dict[int, dict[int, int]] = field(default_factory=dict)
    checkpoint: str = ""
    rows: list[tuple[str, int, int, float]] = field(default_factory=list, repr=False)

    def to_json(self) -> str:
        body = asdict(self)
        body.pop("rows")
        return json.dumps(body, indent=2, sort_keys=True)

    def write(self, out_dir: str | Path, stem: str | None = None) -> tuple[Path, Path]:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        stem = stem or f"oneshot_{self.protocol}"
        jpath, cpath = out / f"{stem}.json", out / f"{stem}.csv"
        jpath.write_text(self.to_json() + "\n")
        with open(cpath, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["query_id", "true_label", "predicted_label", "distance"])
            for qid, t, p, d in self.rows:
                w.writerow([qid, t, p, repr(d)])
        return jpath, cpath


def score(query_ids, query_embeddings, query_labels, support: SupportSet, protocol: str,
          checkpoint: str = "") -> EvalReport:
    """Classify embedded queries and aggregate into a report."""
    query_labels = [int(l) for l in query_labels]
    missing = sorted(set(query_labels) - set(support.labels))
    if missing:
        raise DataError(f"query classes absent from the support set: {missing}")
    if not query_labels:
        raise DataError("no queries to evaluate")
    pred, d2 = nearest(query_embeddings, support.embeddings, support.labels)
    per_class: dict[int, dict] = {}
    confusion: dict[int, dict[int, int]] = {}
    for t, p in zip(query_labels, pred.tolist()):
        row = per_class.setdefault(t, {"correct": 0, "total": 0})
        row["total"] += 1
        row["correct"] += int(t == p)
        confusion.setdefault(t, {})
        confusion[t][p] = confusion[t].get(p, 0) + 1
    for row in per_class.values():
        row["accuracy"] = row["correct"] / row["total"]
    correct = sum(r["correct"] for r in per_class.values())
    rows = [(qid, t, int(p), float(np.sqrt(d))) for qid, t, p, d in
            zip(query_ids, query_labels, pred.tolist(), d2.tolist())]
    return EvalReport(protocol, correct / len(query_labels), len(query_labels), len(support),
                      dict(sorted(per_class.items())), dict(sorted(confusion.items())), checkpoint,
                      rows)


def evaluate(model: VPE, dataset: Dataset, protocol: EvalProtocol | str,
             checkpoint: str = "") -> EvalReport:
    """Embed prototypes and queries with ``model`` and score one protocol."""
    if isinstance(protocol, str):
        protocol = EvalProtocol(protocol)
    labels = protocol.support_labels(dataset)
    if not labels:
        raise DataError(f"protocol {protocol.name!r}: no classes for the support set")
    support = build_support(model, dataset.prototypes(labels), labels)
    items = protocol.query_items(dataset)
    emb = model.embed(dataset.images(items)) if items else np.zeros((0, model.config.latent_dim))
    return score([it.item_id for it in items], emb, [it.label for it in items], support,
                 protocol.name, checkpoint)
