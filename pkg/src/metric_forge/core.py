"""Vector and matrix primitives shared by every loss.

All arithmetic is float64. Functions are pure: inputs are never modified.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Literal, Optional

import numpy as np

from .errors import (
    AllMasked,
    DegenerateDirection,
    DimensionMismatch,
    EmptyInput,
    NotNormalized,
    ZeroVector,
)

EPS_NORM = 1e-12
UNIT_TOL = 1e-6

Metric = Literal["cosine", "squared_euclidean"]
Kind = Literal["sample", "proxy"]


@dataclass(frozen=True)
class EmbeddingBatch:
    """A ``B x d`` embedding matrix with one integer label per row.

    Args:
        data: real matrix, one embedding per row.
        labels: 0-based class ids, length ``B``.
        normalized: when True the rows are checked to be unit-norm (1e-9).
    """

    data: np.ndarray
    labels: np.ndarray
    normalized: bool = False

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float64)
        labels = np.asarray(self.labels)
        if data.ndim != 2 or data.shape[0] < 1 or data.shape[1] < 1:
            raise DimensionMismatch(f"embedding data must be a non-empty 2-D matrix, got shape {data.shape}")
        if labels.ndim != 1 or labels.shape[0] != data.shape[0]:
            raise DimensionMismatch(f"expected {data.shape[0]} labels, got shape {labels.shape}")
        if labels.size and not np.issubdtype(labels.dtype, np.integer):
            if not np.all(labels == np.round(labels)):
                raise ValueError("labels must be integers")
        labels = labels.astype(np.int64)
        if np.any(labels < 0):
            raise ValueError("labels must be non-negative")
        if self.normalized:
            norms = np.linalg.norm(data, axis=1)
            if np.any(np.abs(norms - 1.0) > 1e-9):
                raise NotNormalized("batch flagged normalized but rows are not unit-norm")
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "labels", labels)

    @property
    def size(self) -> int:
        return self.data.shape[0]

    @property
    def dim(self) -> int:
        return self.data.shape[1]

    def normalize(self) -> "EmbeddingBatch":
        return EmbeddingBatch(l2_normalize_rows(self.data), self.labels, normalized=True)


@dataclass(frozen=True)
class SimilarityMatrix:
    values: np.ndarray
    metric: Metric
    row_kind: Kind = "sample"
    col_kind: Kind = "sample"

    @property
    def shape(self):
        return self.values.shape


@dataclass
class LossOutput:
    """Scalar loss plus gradients.

    ``grad_embeddings`` has the shape of the embedding input; for losses over
    single vectors (contrastive, triplet) it stacks one gradient row per
    argument in call order. ``aux`` carries optional diagnostics such as the
    gradient with respect to a similarity matrix or skipped-anchor counts.
    """

    value: float
    grad_embeddings: np.ndarray
    grad_proxies: Optional[np.ndarray] = None
    aux: dict = field(default_factory=dict)

    def __post_init__(self):
        self.value = float(self.value)


def _as_matrix(x) -> np.ndarray:
    if isinstance(x, EmbeddingBatch):
        return x.data
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim == 1:
        arr = arr[None, :]
    if arr.ndim != 2:
        raise DimensionMismatch(f"expected a matrix, got shape {arr.shape}")
    return arr


def l2_normalize(v, eps: float = EPS_NORM) -> np.ndarray:
    """Scale ``v`` to unit Euclidean norm.

    Raises:
        ZeroVector: if ``||v|| <= eps``.
    """
    v = np.asarray(v, dtype=np.float64)
    norm = np.linalg.norm(v)
    if norm <= eps:
        raise ZeroVector(f"cannot normalize vector with norm {norm:.3g}")
    return v / norm


def l2_normalize_rows(x, eps: float = EPS_NORM) -> np.ndarray:
    x = _as_matrix(x)
    norms = np.linalg.norm(x, axis=1, keepdims=True)
    if np.any(norms <= eps):
        bad = int(np.argmax(norms.ravel() <= eps))
        raise ZeroVector(f"row {bad} has norm {norms[bad, 0]:.3g}")
    return x / norms


def normalize_rows_backward(x: np.ndarray, grad_unit: np.ndarray) -> np.ndarray:
    """Chain a gradient on ``x / ||x||`` back to ``x`` (row-wise).

    Applies ``(I / ||x|| - x x^T / ||x||^3)`` to each gradient row.
    """
    norms = np.linalg.norm(x, axis=1, keepdims=True)
    unit = x / norms
    radial = np.sum(grad_unit * unit, axis=1, keepdims=True)
    return (grad_unit - radial * unit) / norms


def require_unit_rows(x: np.ndarray, tol: float = UNIT_TOL, what: str = "input") -> None:
    norms = np.linalg.norm(np.atleast_2d(x), axis=1)
    worst = float(np.max(np.abs(norms - 1.0))) if norms.size else 0.0
    if worst > tol:
        raise NotNormalized(f"{what} rows must be unit-norm (max deviation {worst:.3g})")


def cosine_similarity_matrix(a, b) -> SimilarityMatrix:
    """Pairwise cosine similarities between rows of ``a`` and rows of ``b``.

    Entries are clamped to ``[-1, 1]``.
    """
    a, b = _as_matrix(a), _as_matrix(b)
    if a.shape[1] != b.shape[1]:
        raise DimensionMismatch(f"dimension {a.shape[1]} vs {b.shape[1]}")
    values = np.clip(l2_normalize_rows(a) @ l2_normalize_rows(b).T, -1.0, 1.0)
    return SimilarityMatrix(values, "cosine")


def squared_euclidean_matrix(a, b) -> SimilarityMatrix:
    a, b = _as_matrix(a), _as_matrix(b)
    if a.shape[1] != b.shape[1]:
        raise DimensionMismatch(f"dimension {a.shape[1]} vs {b.shape[1]}")
    diff = a[:, None, :] - b[None, :, :]
    return SimilarityMatrix(np.einsum("ijk,ijk->ij", diff, diff), "squared_euclidean")


def sq_dists(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Raw ``||a_i - b_j||^2`` without validation; used inside the losses."""
    diff = a[:, None, :] - b[None, :, :]
    return np.einsum("ijk,ijk->ij", diff, diff)


def sq_dists_backward(grad: np.ndarray, a: np.ndarray, b: np.ndarray):
    """Gradients of ``sum(grad * sq_dists(a, b))`` with respect to ``a`` and ``b``."""
    grad_a = 2.0 * (grad.sum(axis=1)[:, None] * a - grad @ b)
    grad_b = 2.0 * (grad.sum(axis=0)[:, None] * b - grad.T @ a)
    return grad_a, grad_b


def log_sum_exp(values, axis=None) -> np.ndarray | float:
    """``log(sum(exp(values)))`` with max-shift.

    Raises:
        EmptyInput: for an empty input.
    """
    values = np.asarray(values, dtype=np.float64)
    if values.size == 0:
        raise EmptyInput("log_sum_exp of an empty input")
    top = np.max(values, axis=axis, keepdims=True)
    top = np.where(np.isfinite(top), top, 0.0)
    out = np.log(np.sum(np.exp(values - top), axis=axis, keepdims=True)) + top
    if axis is None:
        return float(out.reshape(()))
    return np.squeeze(out, axis=axis)


def masked_softmax(row, mask) -> np.ndarray:
    """Softmax restricted to ``mask``; masked-out entries are exactly zero.

    Works on a vector or row-wise on a matrix.

    Raises:
        AllMasked: if a row has no unmasked entry.
        DimensionMismatch: if ``row`` and ``mask`` shapes differ.
    """
    row = np.asarray(row, dtype=np.float64)
    mask = np.asarray(mask, dtype=bool)
    if row.shape != mask.shape:
        raise DimensionMismatch(f"row shape {row.shape} vs mask shape {mask.shape}")
    if not np.all(np.any(mask, axis=-1)):
        raise AllMasked("softmax row has no unmasked entry")
    shifted = np.where(mask, row, -np.inf)
    top = np.max(shifted, axis=-1, keepdims=True)
    expd = np.where(mask, np.exp(shifted - top), 0.0)
    return expd / np.sum(expd, axis=-1, keepdims=True)


def softmax_rows(x: np.ndarray) -> np.ndarray:
    shifted = x - np.max(x, axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def log1p_sum_exp(x: np.ndarray, mask: np.ndarray, axis: int = -1):
    """Stable ``log(1 + sum_{mask} exp(x))`` and the matching softmax weights.

    Returns:
        ``(value, weights)`` where ``weights = exp(x) / (1 + sum exp(x))`` on
        masked entries and 0 elsewhere. Rows with an empty mask give value 0.
    """
    masked = np.where(mask, x, -np.inf)
    top = np.maximum(np.max(masked, axis=axis, keepdims=True), 0.0)
    expd = np.where(mask, np.exp(masked - top), 0.0)
    denom = np.exp(-top) + expd.sum(axis=axis, keepdims=True)
    value = np.log(denom) + top
    return np.squeeze(value, axis=axis), expd / denom


def direction_cosine_batch(u: np.ndarray, v: np.ndarray, eps: float):
    """Cosine between displacement vectors ``u`` and ``v`` along the last axis.

    Returns ``(cos, dcos_du, dcos_dv)``; shapes broadcast over leading axes.
    Raises ``DegenerateDirection`` when any displacement norm is below ``eps``.
    """
    nu = np.linalg.norm(u, axis=-1, keepdims=True)
    nv = np.linalg.norm(v, axis=-1, keepdims=True)
    if np.any(nu < eps) or np.any(nv < eps):
        raise DegenerateDirection("displacement vector has (near) zero length")
    cos = np.sum(u * v, axis=-1, keepdims=True) / (nu * nv)
    d_u = v / (nu * nv) - cos * u / nu**2
    d_v = u / (nu * nv) - cos * v / nv**2
    return np.squeeze(cos, axis=-1), d_u, d_v
