"""Pair-based losses: contrastive, triplet, N-pair and Multi-Similarity.

Single-vector losses return their gradients stacked row-wise in argument
order, e.g. ``grad_embeddings[0]`` is the gradient for the anchor of a
triplet. Batch losses return a gradient with the shape of the batch.

Losses that work on cosine similarities take pre-normalized rows and use
plain dot products; their gradients carry no normalization Jacobian.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .core import (
    EmbeddingBatch,
    LossOutput,
    SimilarityMatrix,
    log1p_sum_exp,
    log_sum_exp,
    require_unit_rows,
    softmax_rows,
    sq_dists,
    sq_dists_backward,
)
from .errors import BadBatchStructure, DimensionMismatch, NonFiniteLoss

TRIPLET_ALPHA = 0.2
MS_EPSILON = 0.1
MS_ALPHA = 2.0
MS_BETA = 50.0
MS_LAMBDA = 0.5


def _vectors(*vs):
    arrs = [np.asarray(v, dtype=np.float64).ravel() for v in vs]
    dims = {a.shape[0] for a in arrs}
    if len(dims) != 1:
        raise DimensionMismatch(f"vector dimensions differ: {sorted(dims)}")
    return arrs


def _check_margin(alpha):
    if alpha < 0:
        raise ValueError(f"margin must be non-negative, got {alpha}")


def contrastive_loss(f_i, f_j, same_class: bool, alpha: float = 1.0) -> LossOutput:
    """Contrastive loss on one pair.

    Positives pay their squared distance; negatives pay
    ``max(alpha - ||f_i - f_j||^2, 0)``.
    """
    f_i, f_j = _vectors(f_i, f_j)
    _check_margin(alpha)
    diff = f_i - f_j
    dist = float(diff @ diff)
    if same_class:
        value, g = dist, 2.0 * diff
    elif alpha - dist > 0.0:
        value, g = alpha - dist, -2.0 * diff
    else:
        value, g = 0.0, np.zeros_like(diff)
    return LossOutput(value, np.stack([g, -g]), aux={"hinge_args": [] if same_class else [alpha - dist]})


def triplet_loss_euclidean(f_a, f_p, f_n, alpha: float = TRIPLET_ALPHA) -> LossOutput:
    """``max(||a - p||^2 - ||a - n||^2 + alpha, 0)``.

    When active, the gradients are ``2(n - p)``, ``2(p - a)`` and
    ``2(a - n)``; the kink itself counts as inactive.
    """
    f_a, f_p, f_n = _vectors(f_a, f_p, f_n)
    _check_margin(alpha)
    arg = float((f_a - f_p) @ (f_a - f_p) - (f_a - f_n) @ (f_a - f_n) + alpha)
    if arg > 0.0:
        grads = np.stack([2.0 * (f_n - f_p), 2.0 * (f_p - f_a), 2.0 * (f_a - f_n)])
        return LossOutput(arg, grads, aux={"hinge_args": [arg]})
    return LossOutput(0.0, np.zeros((3, f_a.shape[0])), aux={"hinge_args": [arg]})


def triplet_loss_cosine(f_a, f_p, f_n, alpha: float = TRIPLET_ALPHA, check: bool = True) -> LossOutput:
    """``max(a.n - a.p + alpha, 0)`` for unit-norm inputs.

    Raises:
        NotNormalized: if ``check`` and an input is not unit-norm within 1e-6.
    """
    f_a, f_p, f_n = _vectors(f_a, f_p, f_n)
    _check_margin(alpha)
    if check:
        require_unit_rows(np.stack([f_a, f_p, f_n]), what="triplet")
    arg = float(f_a @ f_n - f_a @ f_p + alpha)
    if arg > 0.0:
        return LossOutput(arg, np.stack([f_n - f_p, -f_a, f_a]), aux={"hinge_args": [arg]})
    return LossOutput(0.0, np.zeros((3, f_a.shape[0])), aux={"hinge_args": [arg]})


def triplet_indices(labels) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Every ``(anchor, positive, negative)`` index triple in a labelled batch."""
    labels = np.asarray(labels)
    same = labels[:, None] == labels[None, :]
    pos = same & ~np.eye(len(labels), dtype=bool)
    valid = pos[:, :, None] & ~same[:, None, :]
    a, p, n = np.nonzero(valid)
    return a, p, n


def batch_triplet_loss(
    batch: EmbeddingBatch, alpha: float = TRIPLET_ALPHA, metric: str = "euclidean"
) -> LossOutput:
    """Mean triplet loss over every valid triplet in the batch.

    Triplets whose hinge is inactive still count in the denominator. A batch
    with no valid triplet has loss 0.
    """
    _check_margin(alpha)
    f = batch.data
    a, p, n = triplet_indices(batch.labels)
    grad = np.zeros_like(f)
    if a.size == 0:
        return LossOutput(0.0, grad, aux={"num_triplets": 0, "hinge_args": np.empty(0)})
    if metric == "euclidean":
        d = sq_dists(f, f)
        args = d[a, p] - d[a, n] + alpha
    elif metric == "cosine":
        s = f @ f.T
        args = s[a, n] - s[a, p] + alpha
    else:
        raise ValueError(f"unknown metric {metric!r}")
    active = args > 0.0
    w = 1.0 / a.size
    aa, pp, nn = a[active], p[active], n[active]
    if metric == "euclidean":
        np.add.at(grad, aa, 2.0 * w * (f[nn] - f[pp]))
        np.add.at(grad, pp, 2.0 * w * (f[pp] - f[aa]))
        np.add.at(grad, nn, 2.0 * w * (f[aa] - f[nn]))
    else:
        np.add.at(grad, aa, w * (f[nn] - f[pp]))
        np.add.at(grad, pp, -w * f[aa])
        np.add.at(grad, nn, w * f[aa])
    value = float(np.sum(args[active]) * w)
    return LossOutput(value, grad, aux={"num_triplets": int(a.size), "hinge_args": args})


def batch_contrastive_loss(batch: EmbeddingBatch, alpha: float = 1.0) -> LossOutput:
    """Mean contrastive loss over all unordered pairs ``i < j`` in the batch."""
    _check_margin(alpha)
    f, labels = batch.data, batch.labels
    b = f.shape[0]
    if b < 2:
        return LossOutput(0.0, np.zeros_like(f), aux={"hinge_args": np.empty(0)})
    iu, ju = np.triu_indices(b, k=1)
    d = sq_dists(f, f)[iu, ju]
    same = labels[iu] == labels[ju]
    hinge = alpha - d
    per_pair = np.where(same, d, np.maximum(hinge, 0.0))
    dl_dd = np.where(same, 1.0, np.where(hinge > 0.0, -1.0, 0.0)) / iu.size
    g = np.zeros((b, b))
    g[iu, ju] = dl_dd
    ga, gb = sq_dists_backward(g, f, f)
    return LossOutput(float(per_pair.mean()), ga + gb, aux={"hinge_args": hinge[~same]})


def npair_pairs(labels) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Split a two-per-class batch into anchor and positive index arrays.

    For each class (ascending label order) the first occurrence is the
    anchor and the second the positive.

    Raises:
        BadBatchStructure: if any class does not appear exactly twice.
    """
    labels = np.asarray(labels)
    classes, counts = np.unique(labels, return_counts=True)
    if np.any(counts != 2):
        bad = classes[counts != 2]
        raise BadBatchStructure(f"N-pair batches need exactly 2 samples per class; classes {bad.tolist()} differ")
    anchors = np.array([np.flatnonzero(labels == c)[0] for c in classes])
    positives = np.array([np.flatnonzero(labels == c)[1] for c in classes])
    return anchors, positives, classes


def npair_loss(batch: EmbeddingBatch, exponential: bool = True, check: bool = True) -> LossOutput:
    """Multi-class N-pair loss on a batch holding two samples per class.

    ``(1/C) sum_i log(1 + sum_{j != i} exp(a_i.p_j - a_i.p_i))``, averaged
    over the ``C`` anchors.

    With ``exponential=False`` the literal variant without the exponential
    (``log(1 + sum_{j != i} (a_i.p_j - a_i.p_i))``) is evaluated instead; it
    is undefined whenever the log argument is not positive.
    """
    f = batch.data
    if check:
        require_unit_rows(f, what="N-pair batch")
    anchors, positives, _ = npair_pairs(batch.labels)
    fa, fp = f[anchors], f[positives]
    c = len(anchors)
    s = fa @ fp.T
    diag = np.diag(s)
    if exponential:
        logits = s - diag[:, None]
        per_anchor = log_sum_exp(logits, axis=1)
        g = softmax_rows(logits)
        g[np.arange(c), np.arange(c)] -= 1.0
    else:
        off = ~np.eye(c, dtype=bool)
        arg = 1.0 + np.sum(np.where(off, s - diag[:, None], 0.0), axis=1)
        if np.any(arg <= 0.0):
            raise NonFiniteLoss("literal N-pair log argument is not positive")
        per_anchor = np.log(arg)
        g = np.where(off, 1.0 / arg[:, None], 0.0)
        g[np.arange(c), np.arange(c)] = -(c - 1) / arg
    g /= c
    grad = np.zeros_like(f)
    grad[anchors] = g @ fp
    grad[positives] = g.T @ fa
    return LossOutput(float(per_anchor.mean()), grad, aux={"per_anchor": per_anchor})


@dataclass(frozen=True)
class MsMiningMasks:
    """Multi-Similarity mining result.

    Attributes:
        positive_mask: ``B x B``; ``[i, j]`` selects positive ``j`` for anchor ``i``.
        negative_mask: ``B x B``; ``[i, n]`` selects negative ``n`` for anchor ``i``.
        epsilon: the mining margin used.
        skipped: anchors lacking a positive or a negative (rows left empty).
    """

    positive_mask: np.ndarray
    negative_mask: np.ndarray
    epsilon: float
    skipped: tuple = field(default=())


def _similarity_values(s) -> np.ndarray:
    if isinstance(s, SimilarityMatrix):
        if s.metric != "cosine":
            raise ValueError("Multi-Similarity mining needs a cosine similarity matrix")
        return s.values
    return np.asarray(s, dtype=np.float64)


def ms_mine(s, labels, epsilon: float = MS_EPSILON) -> MsMiningMasks:
    """Select informative pairs with the Multi-Similarity filtering rules.

    For anchor ``i`` with easiest-to-miss positive similarity
    ``min_p S[i, p]``, negative ``n`` is kept iff
    ``S[i, n] > min_p S[i, p] - epsilon``. With hardest negative similarity
    ``max_n S[i, n]``, positive ``p`` is kept iff
    ``S[i, p] < max_n S[i, n] + epsilon``.

    Anchors without a positive or without a negative are skipped: their mask
    rows stay empty and their indices are listed in ``skipped``.
    """
    s = _similarity_values(s)
    labels = np.asarray(labels)
    b = len(labels)
    if s.shape != (b, b):
        raise DimensionMismatch(f"similarity matrix {s.shape} does not match {b} labels")
    if epsilon < 0:
        raise ValueError("epsilon must be non-negative")
    same = labels[:, None] == labels[None, :]
    pos = same & ~np.eye(b, dtype=bool)
    neg = ~same
    ok = pos.any(axis=1) & neg.any(axis=1)
    min_pos = np.min(np.where(pos, s, np.inf), axis=1, keepdims=True)
    max_neg = np.max(np.where(neg, s, -np.inf), axis=1, keepdims=True)
    neg_sel = neg & (s > min_pos - epsilon) & ok[:, None]
    pos_sel = pos & (s < max_neg + epsilon) & ok[:, None]
    return MsMiningMasks(pos_sel, neg_sel, float(epsilon), tuple(np.flatnonzero(~ok).tolist()))


def _ms_terms(s, masks, alpha, beta, lam, neg_shift=None):
    """Per-anchor MS terms and their gradient with respect to ``s``.

    ``neg_shift`` is subtracted from ``S[i, n] - lam`` inside the negative
    exponent (used by the direction-regularized variant).
    """
    b = s.shape[0]
    pos_val, pos_w = log1p_sum_exp(-alpha * (s - lam), masks.positive_mask)
    neg_arg = s - lam if neg_shift is None else s - lam - neg_shift
    neg_val, neg_w = log1p_sum_exp(beta * neg_arg, masks.negative_mask)
    value = float(np.sum(pos_val / alpha + neg_val / beta) / b)
    grad_s = (neg_w - pos_w) / b
    return value, grad_s, neg_w / b


def ms_loss(
    batch: EmbeddingBatch,
    masks: MsMiningMasks,
    alpha: float = MS_ALPHA,
    beta: float = MS_BETA,
    lam: float = MS_LAMBDA,
    check: bool = True,
) -> LossOutput:
    """Multi-Similarity loss over mined pairs.

    Masks are treated as constants: no gradient flows through selection.
    """
    if alpha <= 0 or beta <= 0:
        raise ValueError("alpha and beta must be positive")
    f = batch.data
    if masks.positive_mask.shape != (f.shape[0], f.shape[0]):
        raise DimensionMismatch("mining masks do not match the batch size")
    if check:
        require_unit_rows(f, what="MS batch")
    s = f @ f.T
    value, grad_s, _ = _ms_terms(s, masks, alpha, beta, lam)
    grad = (grad_s + grad_s.T) @ f
    return LossOutput(value, grad, aux={"grad_similarity": grad_s, "skipped": len(masks.skipped)})
