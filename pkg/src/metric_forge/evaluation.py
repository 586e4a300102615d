"""Retrieval and separability metrics over a labelled embedding set."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass

import numpy as np

from .core import EmbeddingBatch, l2_normalize_rows, sq_dists
from .errors import KTooLarge, SingletonClass


@dataclass
class RetrievalReport:
    recall_at_k: dict
    mean_intra_cos: float
    mean_inter_cos: float
    separation_gap: float

    def to_dict(self) -> dict:
        d = asdict(self)
        d["recall_at_k"] = {str(k): v for k, v in self.recall_at_k.items()}
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def _unpack(embeddings, labels):
    if isinstance(embeddings, EmbeddingBatch):
        return embeddings.data, embeddings.labels
    return np.asarray(embeddings, dtype=np.float64), np.asarray(labels)


def neighbor_order(x: np.ndarray, metric: str = "cosine") -> np.ndarray:
    """Rows of neighbor indices, nearest first, self excluded.

    Ties are broken by the lower index.
    """
    n = x.shape[0]
    if metric == "cosine":
        unit = l2_normalize_rows(x)
        score = -(unit @ unit.T)
    elif metric == "squared_euclidean":
        score = sq_dists(x, x)
    else:
        raise ValueError(f"unknown metric {metric!r}")
    np.fill_diagonal(score, np.inf)
    order = np.argsort(score, axis=1, kind="stable")
    return order[:, : n - 1]


def recall_at_k(embeddings, labels=None, ks=(1,), metric: str = "cosine") -> dict:
    """Fraction of samples with a same-label sample among their ``k`` nearest.

    Raises:
        SingletonClass: if some class has a single sample.
        KTooLarge: if ``max(ks) >= N``.
    """
    x, labels = _unpack(embeddings, labels)
    n = x.shape[0]
    classes, counts = np.unique(labels, return_counts=True)
    if np.any(counts < 2):
        raise SingletonClass(f"classes {classes[counts < 2].tolist()} have a single sample")
    ks = sorted(int(k) for k in ks)
    if ks and (ks[-1] >= n or ks[0] < 1):
        raise KTooLarge(f"k must lie in [1, {n - 1}], got {ks}")
    order = neighbor_order(x, metric)
    hits = labels[order] == labels[:, None]
    first_hit = np.argmax(hits, axis=1)  # every row has a hit: no singletons
    return {k: float(np.mean(first_hit < k)) for k in ks}


def separation_stats(embeddings, labels=None) -> tuple[float, float]:
    """Mean cosine over same-label pairs and over different-label pairs (``i < j``)."""
    x, labels = _unpack(embeddings, labels)
    unit = l2_normalize_rows(x)
    cos = np.clip(unit @ unit.T, -1.0, 1.0)
    iu, ju = np.triu_indices(len(labels), k=1)
    same = labels[iu] == labels[ju]
    vals = cos[iu, ju]
    intra = float(vals[same].mean()) if same.any() else float("nan")
    inter = float(vals[~same].mean()) if (~same).any() else float("nan")
    return intra, inter


def evaluate(embeddings, labels=None, ks=(1, 2, 4, 8), metric: str = "cosine") -> RetrievalReport:
    x, labels = _unpack(embeddings, labels)
    recalls = recall_at_k(x, labels, ks, metric)
    intra, inter = separation_stats(x, labels)
    return RetrievalReport(recalls, intra, inter, intra - inter)
