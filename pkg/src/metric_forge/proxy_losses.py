"""Proxy-based losses and the NCA reference loss.

Proxies are trainable class representatives. Losses here return gradients
for both the embeddings (``grad_embeddings``) and the proxy matrix
(``grad_proxies``). As in the pair losses, inputs documented as normalized
are used as given; no normalization Jacobian is applied.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import (
    EmbeddingBatch,
    LossOutput,
    SimilarityMatrix,
    l2_normalize_rows,
    log1p_sum_exp,
    log_sum_exp,
    masked_softmax,
    require_unit_rows,
    softmax_rows,
    sq_dists,
    sq_dists_backward,
)
from .errors import (
    DegenerateRow,
    DimensionMismatch,
    KOutOfRange,
    MissingProxy,
    NoPositive,
    NonPositiveTemperature,
)

PA_ALPHA = 32.0
PA_DELTA = 0.1


@dataclass(frozen=True)
class ProxySet:
    """``(M*C) x d`` proxy matrix plus the class owning each row.

    Every class in ``[0, C)`` owns exactly ``M`` proxies.
    """

    vectors: np.ndarray
    proxy_class: np.ndarray
    normalized: bool = True

    def __post_init__(self):
        vectors = np.asarray(self.vectors, dtype=np.float64)
        proxy_class = np.asarray(self.proxy_class, dtype=np.int64)
        if vectors.ndim != 2 or proxy_class.shape != (vectors.shape[0],):
            raise DimensionMismatch("proxy_class must have one entry per proxy row")
        classes, counts = np.unique(proxy_class, return_counts=True)
        if not np.array_equal(classes, np.arange(len(classes))) or len(set(counts.tolist())) != 1:
            raise ValueError("every class 0..C-1 must own the same number of proxies")
        if self.normalized:
            require_unit_rows(vectors, tol=1e-9, what="proxy")
        object.__setattr__(self, "vectors", vectors)
        object.__setattr__(self, "proxy_class", proxy_class)

    @property
    def num_classes(self) -> int:
        return int(self.proxy_class.max()) + 1

    @property
    def per_class(self) -> int:
        return self.vectors.shape[0] // self.num_classes

    @property
    def M(self) -> int:
        return self.per_class

    def with_vectors(self, vectors, normalized=None) -> "ProxySet":
        return ProxySet(vectors, self.proxy_class, self.normalized if normalized is None else normalized)

    def class_index(self) -> np.ndarray:
        """Row index of each class's proxy; only valid when ``M == 1``."""
        if self.per_class != 1:
            raise ValueError("class_index requires one proxy per class")
        index = np.empty(self.num_classes, dtype=np.int64)
        index[self.proxy_class] = np.arange(len(self.proxy_class))
        return index


def init_proxies(num_classes: int, dim: int, per_class: int = 1, rng=None) -> ProxySet:
    """Seeded standard-normal proxies, L2-normalized, laid out class-major."""
    rng = np.random.default_rng(rng)
    vectors = l2_normalize_rows(rng.standard_normal((num_classes * per_class, dim)))
    return ProxySet(vectors, np.repeat(np.arange(num_classes), per_class))


def _proxy_rows_for(labels: np.ndarray, proxies: ProxySet) -> np.ndarray:
    if labels.size and labels.max() >= proxies.num_classes:
        missing = sorted(set(labels[labels >= proxies.num_classes].tolist()))
        raise MissingProxy(f"no proxy for classes {missing}")
    return proxies.class_index()[labels]


def _check_dims(batch: EmbeddingBatch, proxies: ProxySet):
    if batch.dim != proxies.vectors.shape[1]:
        raise DimensionMismatch(f"embedding dim {batch.dim} vs proxy dim {proxies.vectors.shape[1]}")


def nca_loss(batch: EmbeddingBatch) -> LossOutput:
    """Neighbourhood Component Analysis loss on squared Euclidean distances.

    For each sample, ``-log`` of the softmax mass (over all other samples,
    with logits ``-D``) that falls on same-class samples. Samples with no
    same-class partner are skipped and the mean is taken over the rest.

    Raises:
        NoPositive: if no sample in the batch has a same-class partner.
    """
    f, labels = batch.data, batch.labels
    b = f.shape[0]
    others = ~np.eye(b, dtype=bool)
    pos = (labels[:, None] == labels[None, :]) & others
    valid = pos.any(axis=1)
    if not valid.any():
        raise NoPositive("no sample has a same-class partner")
    d = sq_dists(f, f)
    logits = -d
    lse_all = _masked_lse(logits, others)
    lse_pos = _masked_lse(logits, pos)
    n_valid = int(valid.sum())
    per_sample = np.where(valid, lse_all - lse_pos, 0.0)
    q = _masked_softmax_safe(logits, others)
    r = _masked_softmax_safe(logits, pos)
    # dL/dD = (r - q) / n on valid rows
    g = np.where(valid[:, None], r - q, 0.0) / n_valid
    ga, gb = sq_dists_backward(g, f, f)
    return LossOutput(float(per_sample.sum() / n_valid), ga + gb, aux={"skipped": int(b - n_valid)})


def _masked_lse(x, mask):
    masked = np.where(mask, x, -np.inf)
    top = np.max(masked, axis=1, keepdims=True)
    top = np.where(np.isfinite(top), top, 0.0)
    with np.errstate(divide="ignore"):
        return np.log(np.sum(np.where(mask, np.exp(masked - top), 0.0), axis=1)) + top[:, 0]


def _masked_softmax_safe(x, mask):
    rows = mask.any(axis=1)
    out = np.zeros_like(x)
    if rows.any():
        out[rows] = masked_softmax(x[rows], mask[rows])
    return out


def proxynca_loss(batch: EmbeddingBatch, proxies: ProxySet) -> LossOutput:
    """ProxyNCA with the denominator over negative proxies only.

    ``(1/B) sum_i [D(f_i, P_{y_i}) + log sum_{k != y_i} exp(-D(f_i, P_k))]``.
    Because the positive proxy is absent from the denominator, the value can
    be negative.
    """
    _check_dims(batch, proxies)
    f, labels, p = batch.data, batch.labels, proxies.vectors
    if proxies.num_classes < 2:
        raise MissingProxy("ProxyNCA needs at least one negative proxy")
    rows = _proxy_rows_for(labels, proxies)
    b = f.shape[0]
    d = sq_dists(f, p)
    neg = np.ones_like(d, dtype=bool)
    neg[np.arange(b), rows] = False
    value = float(np.mean(d[np.arange(b), rows] + _masked_lse(-d, neg)))
    g = -masked_softmax(-d, neg)
    g[np.arange(b), rows] = 1.0
    g /= b
    gf, gp = sq_dists_backward(g, f, p)
    return LossOutput(value, gf, gp)


def proxynca_pp_loss(batch: EmbeddingBatch, proxies: ProxySet, temperature: float = 1.0) -> LossOutput:
    """ProxyNCA++: softmax over all proxies of ``-D / T``, NLL at the true class."""
    if temperature <= 0:
        raise NonPositiveTemperature(f"temperature must be positive, got {temperature}")
    _check_dims(batch, proxies)
    f, labels, p = batch.data, batch.labels, proxies.vectors
    rows = _proxy_rows_for(labels, proxies)
    b = f.shape[0]
    logits = -sq_dists(f, p) / temperature
    value = float(np.mean(log_sum_exp(logits, axis=1) - logits[np.arange(b), rows]))
    # dL/dlogits = softmax - onehot; dlogits/dD = -1/T
    g = softmax_rows(logits)
    g[np.arange(b), rows] -= 1.0
    g *= -1.0 / (temperature * b)
    gf, gp = sq_dists_backward(g, f, p)
    return LossOutput(value, gf, gp)


def proxy_anchor_loss(
    batch: EmbeddingBatch, proxies: ProxySet, alpha: float = PA_ALPHA, delta: float = PA_DELTA
) -> LossOutput:
    """Proxy Anchor loss with cosine similarity ``S = F P^T``.

    The positive term averages over proxies of classes present in the batch,
    the negative term over all proxies. ``aux["grad_similarity"]`` holds
    ``dL/dS`` (``B x num_proxies``).
    """
    if alpha <= 0 or delta < 0:
        raise ValueError("need alpha > 0 and delta >= 0")
    _check_dims(batch, proxies)
    f, labels, p = batch.data, batch.labels, proxies.vectors
    rows = _proxy_rows_for(labels, proxies)
    n_proxies = p.shape[0]
    s = f @ p.T
    pos = np.zeros_like(s, dtype=bool)
    pos[np.arange(f.shape[0]), rows] = True
    present = pos.any(axis=0)
    pos_val, pos_w = log1p_sum_exp((-alpha * (s - delta)).T, pos.T)
    neg_val, neg_w = log1p_sum_exp((alpha * (s + delta)).T, ~pos.T)
    n_pos = int(present.sum())
    value = float(pos_val.sum() / n_pos + neg_val.sum() / n_proxies)
    grad_s = (-alpha * pos_w / n_pos + alpha * neg_w / n_proxies).T
    return LossOutput(value, grad_s @ p, grad_s.T @ f, aux={"grad_similarity": grad_s})


@dataclass(frozen=True)
class ProxyGmlConfig:
    K: int
    lam: float = 0.3
    M: int = 1

    def validate(self, num_classes: int) -> None:
        if not self.M <= self.K <= self.M * num_classes:
            raise KOutOfRange(f"K={self.K} outside [M, M*C] = [{self.M}, {self.M * num_classes}]")
        if self.lam < 0:
            raise ValueError("regularizer weight must be non-negative")


def proxygml_select(s_p, labels, proxy_class, cfg: ProxyGmlConfig) -> np.ndarray:
    """Pick ``K`` proxies per sample.

    Args:
        s_p: proxy x sample similarity matrix, shape ``(M*C, B)``.
        labels: sample labels, length ``B``.
        proxy_class: class of each proxy row.
        cfg: ``K`` and ``M``.

    Returns:
        ``B x K`` integer array. Each row starts with the ``M`` proxies of the
        sample's own class (ascending index), followed by the ``K - M`` most
        similar remaining proxies; ties go to the lowest proxy index.
    """
    s_p = s_p.values if isinstance(s_p, SimilarityMatrix) else np.asarray(s_p, dtype=np.float64)
    labels = np.asarray(labels)
    proxy_class = np.asarray(proxy_class)
    n_proxies, b = s_p.shape
    if b != len(labels) or n_proxies != len(proxy_class):
        raise DimensionMismatch("similarity matrix shape does not match labels/proxies")
    num_classes = int(proxy_class.max()) + 1
    cfg.validate(num_classes)
    free = cfg.K - cfg.M
    out = np.empty((b, cfg.K), dtype=np.int64)
    for i in range(b):
        own = proxy_class == labels[i]
        if own.sum() != cfg.M:
            raise MissingProxy(f"class {labels[i]} does not own {cfg.M} proxies")
        others = np.flatnonzero(~own)
        order = np.argsort(-s_p[others, i], kind="stable")
        out[i, : cfg.M] = np.flatnonzero(own)
        out[i, cfg.M :] = others[order[:free]]
    return out


def selection_mask(selection: np.ndarray, n_proxies: int) -> np.ndarray:
    mask = np.zeros((selection.shape[0], n_proxies), dtype=bool)
    np.put_along_axis(mask, selection, True, axis=1)
    return mask


def proxygml_loss(
    batch: EmbeddingBatch,
    proxies: ProxySet,
    cfg: ProxyGmlConfig,
    selection: np.ndarray | None = None,
) -> LossOutput:
    """ProxyGML: top-K proxy graph, sub-proxy aggregation, masked softmax CE,
    plus a proxy-to-proxy regularizer weighted by ``cfg.lam``.

    ``selection`` (from :func:`proxygml_select`) is recomputed when omitted;
    passing it freezes the discrete step. A class enters a sample's softmax
    iff at least one of its proxies was selected.
    """
    _check_dims(batch, proxies)
    f, labels, p = batch.data, batch.labels, proxies.vectors
    pc = proxies.proxy_class
    c = proxies.num_classes
    if cfg.M != proxies.per_class:
        raise ValueError(f"config M={cfg.M} but proxy set has {proxies.per_class} per class")
    if labels.size and labels.max() >= c:
        raise MissingProxy("labels reference classes without proxies")
    b, n_proxies = f.shape[0], p.shape[0]
    s = f @ p.T
    if selection is None:
        selection = proxygml_select(s.T, labels, pc, cfg)
    sel = selection_mask(selection, n_proxies)
    onehot_pc = np.eye(c)[pc]
    agg = (s * sel) @ onehot_pc
    class_mask = (sel.astype(float) @ onehot_pc) > 0
    if not np.all(class_mask[np.arange(b), labels]):
        raise DegenerateRow("a sample's own class is missing from its selection")
    prob = masked_softmax(agg, class_mask)
    ce = float(-np.mean(np.log(prob[np.arange(b), labels])))
    g_agg = prob.copy()
    g_agg[np.arange(b), labels] -= 1.0
    g_agg /= b
    g_s = (g_agg @ onehot_pc.T) * sel
    grad_f = g_s @ p
    grad_p = g_s.T @ f

    sp = p @ p.T
    agg_p = sp @ onehot_pc
    prob_p = softmax_rows(agg_p)
    reg = float(-np.mean(np.log(prob_p[np.arange(n_proxies), pc])))
    g_aggp = prob_p.copy()
    g_aggp[np.arange(n_proxies), pc] -= 1.0
    g_aggp /= n_proxies
    g_sp = g_aggp @ onehot_pc.T
    grad_p = grad_p + cfg.lam * (g_sp + g_sp.T) @ p
    return LossOutput(
        ce + cfg.lam * reg,
        grad_f,
        grad_p,
        aux={"ce": ce, "reg": reg, "probabilities": prob, "class_mask": class_mask, "selection": selection},
    )
