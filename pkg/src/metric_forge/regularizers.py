"""Language-guidance distillation and direction regularization.

Direction regularization penalizes the cosine between the anchor->negative
and anchor->positive displacements, so the negative is pushed orthogonally
to the anchor-positive pair instead of radially away from the anchor.

Every directed loss adds ``+gamma * Cos(...)`` so that minimizing the loss
lowers the cosine. ``literal_sign=True`` switches to ``-gamma * Cos(...)``,
under which gradient descent raises the cosine instead.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .core import (
    EmbeddingBatch,
    LossOutput,
    SimilarityMatrix,
    direction_cosine_batch,
    l2_normalize_rows,
    log1p_sum_exp,
    log_sum_exp,
    masked_softmax,
    require_unit_rows,
    softmax_rows,
    sq_dists,
    sq_dists_backward,
)
from .errors import DimensionMismatch, MissingProxy, ShapeMismatch, ZeroVector
from .pair_losses import (
    MS_ALPHA,
    MS_BETA,
    MS_LAMBDA,
    TRIPLET_ALPHA,
    MsMiningMasks,
    _ms_terms,
    _vectors,
    triplet_indices,
)
from .proxy_losses import ProxySet, _check_dims, _proxy_rows_for

EPS_DIR = 1e-9
PROMPT_TEMPLATE = "A photo of {label}"


@dataclass
class LabelEmbeddingTable:
    """Frozen class-id -> vector table standing in for a language model.

    Attributes:
        vectors: mapping from class id to a nonzero vector.
        source: file path the table came from, or ``"synthetic"``.
        prompt_template: prompt each label would be rendered with; metadata only.
    """

    vectors: dict
    source: str = "synthetic"
    prompt_template: str = PROMPT_TEMPLATE

    def __post_init__(self):
        self.vectors = {int(k): np.asarray(v, dtype=np.float64) for k, v in self.vectors.items()}
        dims = {v.shape for v in self.vectors.values()}
        if len(dims) > 1:
            raise DimensionMismatch("label vectors have differing dimensions")
        for k, v in self.vectors.items():
            if np.linalg.norm(v) <= 1e-12:
                raise ZeroVector(f"label vector for class {k} is zero")

    @property
    def dim(self) -> int:
        return next(iter(self.vectors.values())).shape[0]

    def prompt(self, label) -> str:
        return self.prompt_template.format(label=label)

    def lookup(self, labels) -> np.ndarray:
        labels = np.asarray(labels)
        missing = sorted(set(labels.tolist()) - set(self.vectors))
        if missing:
            raise KeyError(f"no label embedding for classes {missing}")
        return np.stack([self.vectors[int(y)] for y in labels])

    def similarity(self, labels) -> SimilarityMatrix:
        """Cosine similarity of the label vectors of a batch (teacher matrix)."""
        unit = l2_normalize_rows(self.lookup(labels))
        return SimilarityMatrix(np.clip(unit @ unit.T, -1.0, 1.0), "cosine")


def synthetic_label_table(num_classes: int, dim: int = 32, seed: int = 0) -> LabelEmbeddingTable:
    """Seeded random unit vectors, one per class."""
    rng = np.random.default_rng(seed)
    vecs = l2_normalize_rows(rng.standard_normal((num_classes, dim)))
    return LabelEmbeddingTable({c: vecs[c] for c in range(num_classes)}, source="synthetic")


def _values(s):
    return s.values if isinstance(s, SimilarityMatrix) else np.asarray(s, dtype=np.float64)


def language_distill_loss(s_image, s_language, gamma_l: float = 1.0) -> LossOutput:
    """Mean row-wise KL(softmax(S_I) || softmax(S_L + gamma_L)).

    ``grad_embeddings`` is the gradient with respect to ``S_I``; the teacher
    matrix receives none. ``gamma_l`` shifts whole rows and therefore has no
    effect on the value.
    """
    s_i, s_l = _values(s_image), _values(s_language)
    if s_i.shape != s_l.shape or s_i.ndim != 2 or s_i.shape[0] != s_i.shape[1]:
        raise DimensionMismatch(f"need equal square matrices, got {s_i.shape} and {s_l.shape}")
    n = s_i.shape[0]
    log_p = s_i - log_sum_exp(s_i, axis=1)[:, None]
    t = s_l + gamma_l
    log_q = t - log_sum_exp(t, axis=1)[:, None]
    p = np.exp(log_p)
    diff = log_p - log_q
    kl_rows = np.sum(p * diff, axis=1)
    grad = p * (diff - kl_rows[:, None]) / n
    return LossOutput(float(np.maximum(kl_rows, 0.0).sum() / n), grad, aux={"kl_rows": kl_rows})


def language_loss_on_batch(batch: EmbeddingBatch, table: LabelEmbeddingTable, gamma_l: float = 1.0) -> LossOutput:
    """Language distillation on a batch of unit-norm embeddings.

    ``S_I = F F^T``; the gradient is returned with respect to ``F``.
    """
    f = batch.data
    s_i = f @ f.T
    out = language_distill_loss(s_i, table.similarity(batch.labels), gamma_l)
    g = out.grad_embeddings
    return LossOutput(out.value, (g + g.T) @ f, aux={"grad_similarity": g})


def combine_with_language(dml_loss: LossOutput, lang_loss: LossOutput, omega: float) -> LossOutput:
    """``L = L_DML + omega * L_lang`` for value and gradients."""
    if dml_loss.grad_embeddings.shape != lang_loss.grad_embeddings.shape:
        raise ShapeMismatch(
            f"embedding gradients {dml_loss.grad_embeddings.shape} vs {lang_loss.grad_embeddings.shape}"
        )
    grad_p = dml_loss.grad_proxies
    if lang_loss.grad_proxies is not None:
        if grad_p is None:
            grad_p = omega * lang_loss.grad_proxies
        elif grad_p.shape != lang_loss.grad_proxies.shape:
            raise ShapeMismatch("proxy gradients differ in shape")
        else:
            grad_p = grad_p + omega * lang_loss.grad_proxies
    return LossOutput(
        dml_loss.value + omega * lang_loss.value,
        dml_loss.grad_embeddings + omega * lang_loss.grad_embeddings,
        grad_p,
        aux={"dml": dml_loss.value, "lang": lang_loss.value},
    )


def direction_cos(f_a, f_p, f_n, eps: float = EPS_DIR) -> LossOutput:
    """``Cos(f_n - f_a, f_p - f_a)`` with gradients stacked as rows (a, p, n).

    Raises:
        DegenerateDirection: when either displacement is shorter than ``eps``.
    """
    f_a, f_p, f_n = _vectors(f_a, f_p, f_n)
    cos, d_u, d_v = direction_cosine_batch(f_n - f_a, f_p - f_a, eps)
    return LossOutput(float(cos), np.stack([-(d_u + d_v), d_v, d_u]))


def _signed(gamma: float, literal_sign: bool) -> float:
    if gamma < 0:
        raise ValueError("gamma must be non-negative")
    return -gamma if literal_sign else gamma


def directed_triplet_loss(
    f_a,
    f_p,
    f_n,
    alpha: float = TRIPLET_ALPHA,
    gamma: float = 1.0,
    hinge: bool = True,
    literal_sign: bool = False,
) -> LossOutput:
    """Euclidean triplet loss plus ``gamma * Cos(f_n - f_a, f_p - f_a)``.

    The hinge wraps the whole expression; ``hinge=False`` evaluates it raw.
    """
    f_a, f_p, f_n = _vectors(f_a, f_p, f_n)
    if alpha < 0:
        raise ValueError("alpha must be non-negative")
    g = _signed(gamma, literal_sign)
    cos = direction_cos(f_a, f_p, f_n)
    arg = float((f_a - f_p) @ (f_a - f_p) - (f_a - f_n) @ (f_a - f_n) + alpha + g * cos.value)
    if hinge and arg <= 0.0:
        return LossOutput(0.0, np.zeros((3, f_a.shape[0])), aux={"hinge_args": [arg], "cos": cos.value})
    base = np.stack([2.0 * (f_n - f_p), 2.0 * (f_p - f_a), 2.0 * (f_a - f_n)])
    return LossOutput(arg, base + g * cos.grad_embeddings, aux={"hinge_args": [arg], "cos": cos.value})


def batch_directed_triplet_loss(
    batch: EmbeddingBatch, alpha: float = TRIPLET_ALPHA, gamma: float = 1.0, literal_sign: bool = False
) -> LossOutput:
    """Mean directed triplet loss over every valid triplet in the batch."""
    g = _signed(gamma, literal_sign)
    f = batch.data
    a, p, n = triplet_indices(batch.labels)
    grad = np.zeros_like(f)
    if a.size == 0:
        return LossOutput(0.0, grad, aux={"hinge_args": np.empty(0)})
    cos, d_u, d_v = direction_cosine_batch(f[n] - f[a], f[p] - f[a], EPS_DIR)
    d = sq_dists(f, f)
    args = d[a, p] - d[a, n] + alpha + g * cos
    act = args > 0.0
    w = 1.0 / a.size
    aa, pp, nn = a[act], p[act], n[act]
    du, dv = d_u[act], d_v[act]
    np.add.at(grad, aa, w * (2.0 * (f[nn] - f[pp]) - g * (du + dv)))
    np.add.at(grad, pp, w * (2.0 * (f[pp] - f[aa]) + g * dv))
    np.add.at(grad, nn, w * (2.0 * (f[aa] - f[nn]) + g * du))
    return LossOutput(float(args[act].sum() * w), grad, aux={"hinge_args": args})


def hardest_positives(s: np.ndarray, masks: MsMiningMasks) -> np.ndarray:
    """Per anchor, the mined positive with the lowest similarity (-1 if none)."""
    masked = np.where(masks.positive_mask, s, np.inf)
    idx = np.argmin(masked, axis=1)
    return np.where(masks.positive_mask.any(axis=1), idx, -1)


def directed_ms_loss(
    batch: EmbeddingBatch,
    masks: MsMiningMasks,
    alpha: float = MS_ALPHA,
    beta: float = MS_BETA,
    lam: float = MS_LAMBDA,
    gamma: float = 1.0,
    hardest: np.ndarray | None = None,
    check: bool = True,
    literal_sign: bool = False,
) -> LossOutput:
    """Multi-Similarity loss whose negative exponent adds
    ``gamma * Cos(f_n - f_a, f_p* - f_a)``, with ``p*`` the anchor's hardest
    mined positive.

    Anchors without a mined positive use no direction term. ``hardest``
    freezes the ``p*`` choice; it is derived from the batch when omitted.
    """
    if alpha <= 0 or beta <= 0:
        raise ValueError("alpha and beta must be positive")
    g = _signed(gamma, literal_sign)
    f = batch.data
    if check:
        require_unit_rows(f, what="MS batch")
    b = f.shape[0]
    s = f @ f.T
    if hardest is None:
        hardest = hardest_positives(s, masks)
    has_p = hardest >= 0
    neg_mask = masks.negative_mask
    shift = np.zeros((b, b))
    d_u = np.zeros((b, b, f.shape[1]))
    d_v = np.zeros_like(d_u)
    use = neg_mask & has_p[:, None]
    if g != 0.0 and use.any():
        ai, ni = np.nonzero(use)
        pi = hardest[ai]
        cos, du, dv = direction_cosine_batch(f[ni] - f[ai], f[pi] - f[ai], EPS_DIR)
        shift[ai, ni] = -g * cos  # exponent is S_in - lambda - shift
        d_u[ai, ni] = du
        d_v[ai, ni] = dv
    value, grad_s, neg_w = _ms_terms(s, masks, alpha, beta, lam, neg_shift=shift)
    grad = (grad_s + grad_s.T) @ f
    if g != 0.0 and use.any():
        # d value / d cos_{a,n} = g * neg_w[a, n]
        coef = g * neg_w
        gu = coef[:, :, None] * d_u
        gv = coef[:, :, None] * d_v
        grad += gu.sum(axis=0)
        grad -= gu.sum(axis=1) + gv.sum(axis=1)
        np.add.at(grad, hardest[has_p], gv.sum(axis=1)[has_p])
    return LossOutput(value, grad, aux={"hardest": hardest})


def directed_proxynca_loss(
    batch: EmbeddingBatch, proxies: ProxySet, gamma: float = 1.0, literal_sign: bool = False
) -> LossOutput:
    """ProxyNCA whose negative-proxy logits add
    ``gamma * Cos(p(n) - f_a, p(a) - f_a)``.

    Raises:
        DegenerateDirection: when a proxy coincides with a sample.
    """
    _check_dims(batch, proxies)
    g = _signed(gamma, literal_sign)
    f, labels, p = batch.data, batch.labels, proxies.vectors
    if proxies.num_classes < 2:
        raise MissingProxy("ProxyNCA needs at least one negative proxy")
    rows = _proxy_rows_for(labels, proxies)
    b, n_prox = f.shape[0], p.shape[0]
    d = sq_dists(f, p)
    neg = np.ones((b, n_prox), dtype=bool)
    neg[np.arange(b), rows] = False
    u = p[None, :, :] - f[:, None, :]
    v = np.broadcast_to((p[rows] - f)[:, None, :], u.shape)
    if g != 0.0:
        cos, d_u, d_v = direction_cosine_batch(u, v, EPS_DIR)
        cos = np.where(neg, cos, 0.0)
    else:
        cos = np.zeros((b, n_prox))
    logits = -d + g * cos
    value = float(np.mean(d[np.arange(b), rows] + log_sum_exp(np.where(neg, logits, -np.inf), axis=1)))
    w = masked_softmax(logits, neg) / b
    g_d = -w
    g_d[np.arange(b), rows] = 1.0 / b
    grad_f, grad_p = sq_dists_backward(g_d, f, p)
    if g != 0.0:
        coef = (g * w)[:, :, None]
        gu, gv = coef * d_u, coef * d_v
        grad_p += gu.sum(axis=0)
        grad_f -= gu.sum(axis=1) + gv.sum(axis=1)
        np.add.at(grad_p, rows, gv.sum(axis=1))
    return LossOutput(value, grad_f, grad_p)
