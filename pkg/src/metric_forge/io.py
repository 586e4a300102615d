"""CSV readers and writers for datasets, embeddings, label tables and history.

Floats are written with 17 significant digits so every value round-trips
exactly. Files are UTF-8 with ``\\n`` line endings.
"""

from __future__ import annotations

import csv
from pathlib import Path

import numpy as np

from .errors import MetricForgeError
from .regularizers import LabelEmbeddingTable


class ParseError(MetricForgeError, ValueError):
    """A data file is missing or malformed."""


def _fmt(x: float) -> str:
    return format(float(x), ".17g")


def write_matrix_csv(path, labels, rows, prefix: str = "f", with_id: bool = True) -> None:
    rows = np.asarray(rows, dtype=np.float64)
    header = (["id"] if with_id else []) + ["label"] + [f"{prefix}{j}" for j in range(rows.shape[1])]
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for i, (y, r) in enumerate(zip(labels, rows)):
            w.writerow(([i] if with_id else []) + [int(y)] + [_fmt(v) for v in r])


def write_dataset_csv(path, features, labels) -> None:
    """``id,label,f0..f{D-1}``."""
    write_matrix_csv(path, labels, features, "f")


def write_embeddings_csv(path, embeddings, labels) -> None:
    """``id,label,e0..e{d-1}``; readable by :func:`read_dataset_csv`."""
    write_matrix_csv(path, labels, embeddings, "e")


def read_dataset_csv(path) -> tuple[np.ndarray, np.ndarray]:
    """Read a dataset or embeddings file.

    Returns:
        ``(features, labels)``.

    Raises:
        ParseError: when the file is missing or malformed.
    """
    path = Path(path)
    try:
        with open(path, encoding="utf-8", newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader, None)
            if not header or header[:2] != ["id", "label"] or len(header) < 3:
                raise ParseError(f"{path}: expected header 'id,label,<features>'")
            labels, rows = [], []
            for lineno, rec in enumerate(reader, start=2):
                if not rec:
                    continue
                if len(rec) != len(header):
                    raise ParseError(f"{path}:{lineno}: expected {len(header)} fields, got {len(rec)}")
                labels.append(int(rec[1]))
                rows.append([float(v) for v in rec[2:]])
    except FileNotFoundError:
        raise ParseError(f"{path}: no such file") from None
    except ValueError as exc:
        if isinstance(exc, ParseError):
            raise
        raise ParseError(f"{path}: {exc}") from None
    if not rows:
        raise ParseError(f"{path}: no data rows")
    return np.array(rows, dtype=np.float64), np.array(labels, dtype=np.int64)


def write_label_table(path, table: LabelEmbeddingTable) -> None:
    """``label,e0..e{d-1}``, one row per class in ascending order."""
    keys = sorted(table.vectors)
    write_matrix_csv(path, keys, np.stack([table.vectors[k] for k in keys]), "e", with_id=False)


def read_label_table(path) -> LabelEmbeddingTable:
    path = Path(path)
    try:
        with open(path, encoding="utf-8", newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader, None)
            if not header or header[0] != "label" or len(header) < 2:
                raise ParseError(f"{path}: expected header 'label,e0,...'")
            vectors = {}
            for lineno, rec in enumerate(reader, start=2):
                if not rec:
                    continue
                if len(rec) != len(header):
                    raise ParseError(f"{path}:{lineno}: expected {len(header)} fields, got {len(rec)}")
                vectors[int(rec[0])] = np.array([float(v) for v in rec[1:]])
    except FileNotFoundError:
        raise ParseError(f"{path}: no such file") from None
    except ValueError as exc:
        if isinstance(exc, ParseError):
            raise
        raise ParseError(f"{path}: {exc}") from None
    return LabelEmbeddingTable(vectors, source=str(path))


def write_history_csv(path, history) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "mean_loss", "recall_at_1", "intra_inter_gap"])
        for rec in history:
            w.writerow([rec.epoch, _fmt(rec.mean_loss), _fmt(rec.recall_at_1), _fmt(rec.intra_inter_gap)])
