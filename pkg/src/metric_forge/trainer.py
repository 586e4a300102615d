"""Deterministic mini-batch gradient descent over embeddings and proxies.

Two parameterizations are supported:

* ``free_embeddings``: the embedding table itself is trained (rows are
  re-projected to the unit sphere after each step when normalizing);
* ``linear``: a matrix ``W`` maps features to embeddings, and gradients are
  chained through the row normalization.

The optimizer is plain gradient descent with a constant learning rate.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from . import pair_losses as pl
from . import proxy_losses as px
from . import regularizers as rg
from .core import EmbeddingBatch, LossOutput, l2_normalize_rows, normalize_rows_backward
from .errors import ConfigError, InsufficientClasses, NonFiniteLoss
from .evaluation import RetrievalReport, evaluate

log = logging.getLogger(__name__)

LOSS_NAMES = (
    "contrastive",
    "triplet",
    "triplet_cosine",
    "npair",
    "ms",
    "nca",
    "proxynca",
    "proxynca_pp",
    "proxy_anchor",
    "proxygml",
    "directed_triplet",
    "directed_ms",
    "directed_proxynca",
)
PROXY_LOSSES = {"proxynca", "proxynca_pp", "proxy_anchor", "proxygml", "directed_proxynca"}
# losses written for unit-norm rows
NEEDS_UNIT = {
    "triplet_cosine",
    "npair",
    "ms",
    "proxynca",
    "proxynca_pp",
    "proxy_anchor",
    "proxygml",
    "directed_ms",
    "directed_proxynca",
}


@dataclass
class SyntheticSpec:
    num_classes: int = 8
    samples_per_class: int = 50
    ambient_dim: int = 32
    class_spread: float = 0.15
    seed: int = 7

    def validate(self):
        if self.num_classes < 2:
            raise ConfigError("need at least 2 classes")
        if self.samples_per_class < 1 or self.ambient_dim < 1:
            raise ConfigError("samples_per_class and ambient_dim must be positive")
        if self.class_spread < 0:
            raise ConfigError("class_spread must be non-negative")


@dataclass
class Dataset:
    features: np.ndarray
    labels: np.ndarray

    @property
    def num_classes(self) -> int:
        return int(self.labels.max()) + 1

    def __len__(self):
        return self.features.shape[0]


def generate_synthetic(spec: SyntheticSpec) -> Dataset:
    """Gaussian clusters around random unit centers, projected to the sphere.

    Rows are grouped by class (class 0 first). Identical specs give
    bit-identical datasets.
    """
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    centers = l2_normalize_rows(rng.standard_normal((spec.num_classes, spec.ambient_dim)))
    labels = np.repeat(np.arange(spec.num_classes), spec.samples_per_class)
    noise = rng.standard_normal((labels.size, spec.ambient_dim)) * spec.class_spread
    features = centers[labels] if spec.class_spread == 0 else l2_normalize_rows(centers[labels] + noise)
    return Dataset(features, labels)


def sample_batch(labels, sampler: str, batch_size: int, rng: np.random.Generator) -> np.ndarray:
    """Draw one batch of dataset indices.

    ``uniform`` draws without replacement; ``two_per_class`` picks
    ``batch_size / 2`` distinct classes and two samples of each, laid out
    as consecutive pairs.
    """
    labels = np.asarray(labels)
    if sampler == "uniform":
        return rng.choice(labels.size, size=min(batch_size, labels.size), replace=False)
    if sampler != "two_per_class":
        raise ConfigError(f"unknown sampler {sampler!r}")
    if batch_size % 2:
        raise ConfigError("two_per_class needs an even batch size")
    classes, counts = np.unique(labels, return_counts=True)
    eligible = classes[counts >= 2]
    need = batch_size // 2
    if eligible.size < need:
        raise InsufficientClasses(f"need {need} classes with >= 2 samples, have {eligible.size}")
    chosen = rng.choice(eligible, size=need, replace=False)
    return np.concatenate([rng.choice(np.flatnonzero(labels == c), size=2, replace=False) for c in chosen])


def epoch_batches(labels, sampler: str, batch_size: int, rng: np.random.Generator) -> list:
    """Index batches for one epoch.

    ``uniform`` splits a permutation into ``ceil(N / batch_size)`` batches
    (the last one may be short); ``two_per_class`` draws
    ``floor(N / batch_size)`` full batches.
    """
    n = len(labels)
    if sampler == "uniform":
        perm = rng.permutation(n)
        return [perm[i : i + batch_size] for i in range(0, n, batch_size)]
    return [sample_batch(labels, sampler, batch_size, rng) for _ in range(max(n // batch_size, 1))]


@dataclass
class LossSpec:
    """Loss name plus every hyperparameter (unused ones are ignored)."""

    name: str = "triplet"
    margin: float = 1.0
    triplet_alpha: float = pl.TRIPLET_ALPHA
    ms_alpha: float = pl.MS_ALPHA
    ms_beta: float = pl.MS_BETA
    ms_lambda: float = pl.MS_LAMBDA
    ms_epsilon: float = pl.MS_EPSILON
    temperature: float = 0.1
    pa_alpha: float = px.PA_ALPHA
    pa_delta: float = px.PA_DELTA
    M: int = 1
    K: Optional[int] = None
    gml_lambda: float = 0.3
    gamma: float = 1.0
    direction_literal_sign: bool = False
    npair_exponential: bool = True


@dataclass
class LanguageSpec:
    omega: float = 0.0
    gamma_L: float = 1.0
    table_path: Optional[str] = None
    synthetic_dim: int = 32
    synthetic_seed: int = 0


@dataclass
class TrainConfig:
    loss: LossSpec = field(default_factory=LossSpec)
    learning_rate: float = 0.05
    proxy_learning_rate: Optional[float] = None
    epochs: int = 100
    batch_size: int = 32
    seed: int = 0
    encoder_mode: str = "linear"
    embedding_dim: int = 16
    normalize_embeddings: bool = True
    sampler: str = "uniform"
    eval_ks: tuple = (1, 2, 4, 8)
    language: LanguageSpec = field(default_factory=LanguageSpec)

    @property
    def proxy_lr(self) -> float:
        return 10.0 * self.learning_rate if self.proxy_learning_rate is None else self.proxy_learning_rate

    def validate(self, num_classes: Optional[int] = None) -> None:
        """Reject inconsistent settings.

        Raises:
            ConfigError: describing the first problem found.
        """
        name = self.loss.name
        if name not in LOSS_NAMES:
            raise ConfigError(f"unknown loss {name!r}; choose from {', '.join(LOSS_NAMES)}")
        if self.learning_rate < 0 or self.proxy_lr < 0:
            raise ConfigError("learning rates must be non-negative")
        if self.batch_size < 2:
            raise ConfigError("batch_size must be at least 2")
        if self.epochs < 0:
            raise ConfigError("epochs must be non-negative")
        if self.sampler not in ("uniform", "two_per_class"):
            raise ConfigError(f"unknown sampler {self.sampler!r}")
        if self.sampler == "two_per_class" and self.batch_size % 2:
            raise ConfigError("two_per_class requires an even batch_size")
        if name == "npair" and self.sampler != "two_per_class":
            raise ConfigError("npair requires sampler two_per_class")
        if self.encoder_mode not in ("free_embeddings", "linear"):
            raise ConfigError(f"unknown encoder_mode {self.encoder_mode!r}")
        if self.embedding_dim < 1:
            raise ConfigError("embedding_dim must be positive")
        if (name in NEEDS_UNIT or self.language.omega) and not self.normalize_embeddings:
            raise ConfigError(f"{name} (and language guidance) need normalize_embeddings")
        if self.loss.M < 1:
            raise ConfigError("M must be >= 1")
        if self.loss.M > 1 and name in PROXY_LOSSES - {"proxygml"}:
            raise ConfigError(f"{name} uses one proxy per class (M=1)")
        if name == "proxygml" and num_classes is not None:
            k = self.loss.K if self.loss.K is not None else self.loss.M * num_classes
            if not self.loss.M <= k <= self.loss.M * num_classes:
                raise ConfigError(f"K={k} outside [M, M*C] = [{self.loss.M}, {self.loss.M * num_classes}]")


def make_objective(spec: LossSpec, num_classes: int) -> Callable[[EmbeddingBatch, Optional[px.ProxySet]], LossOutput]:
    """Batch-level loss function ``(batch, proxies) -> LossOutput``.

    Pair losses over single vectors are averaged over every valid pair or
    triplet of the batch; MS mining runs on the current batch each call.
    """
    name = spec.name
    if name == "contrastive":
        return lambda b, p: pl.batch_contrastive_loss(b, spec.margin)
    if name == "triplet":
        return lambda b, p: pl.batch_triplet_loss(b, spec.triplet_alpha, "euclidean")
    if name == "triplet_cosine":
        return lambda b, p: pl.batch_triplet_loss(b, spec.triplet_alpha, "cosine")
    if name == "directed_triplet":
        return lambda b, p: rg.batch_directed_triplet_loss(
            b, spec.triplet_alpha, spec.gamma, spec.direction_literal_sign
        )
    if name == "npair":
        return lambda b, p: pl.npair_loss(b, exponential=spec.npair_exponential)
    if name in ("ms", "directed_ms"):

        def ms(b, p):
            masks = pl.ms_mine(b.data @ b.data.T, b.labels, spec.ms_epsilon)
            if name == "ms":
                return pl.ms_loss(b, masks, spec.ms_alpha, spec.ms_beta, spec.ms_lambda)
            return rg.directed_ms_loss(
                b, masks, spec.ms_alpha, spec.ms_beta, spec.ms_lambda, spec.gamma,
                literal_sign=spec.direction_literal_sign,
            )

        return ms
    if name == "nca":
        return lambda b, p: px.nca_loss(b)
    if name == "proxynca":
        return lambda b, p: px.proxynca_loss(b, p)
    if name == "proxynca_pp":
        return lambda b, p: px.proxynca_pp_loss(b, p, spec.temperature)
    if name == "proxy_anchor":
        return lambda b, p: px.proxy_anchor_loss(b, p, spec.pa_alpha, spec.pa_delta)
    if name == "directed_proxynca":
        return lambda b, p: rg.directed_proxynca_loss(b, p, spec.gamma, spec.direction_literal_sign)
    if name == "proxygml":
        k = spec.K if spec.K is not None else spec.M * num_classes
        cfg = px.ProxyGmlConfig(k, spec.gml_lambda, spec.M)
        return lambda b, p: px.proxygml_loss(b, p, cfg)
    raise ConfigError(f"unknown loss {name!r}")


@dataclass
class EpochRecord:
    epoch: int
    mean_loss: float
    recall_at_1: float
    intra_inter_gap: float


@dataclass
class TrainResult:
    embeddings: np.ndarray
    labels: np.ndarray
    proxies: Optional[px.ProxySet]
    weights: Optional[np.ndarray]
    history: list
    initial_report: RetrievalReport
    final_report: RetrievalReport


class _Model:
    """Parameters plus the forward/backward map from features to embeddings."""

    def __init__(self, features, config: TrainConfig, rng):
        self.x = features
        self.mode = config.encoder_mode
        self.normalize = config.normalize_embeddings
        d_in = features.shape[1]
        w0 = rng.standard_normal((d_in, config.embedding_dim)) / math.sqrt(d_in)
        if self.mode == "linear":
            self.w = w0
            self.table = None
        else:
            self.w = None
            table = features @ w0
            self.table = l2_normalize_rows(table) if self.normalize else table

    def forward(self, idx):
        if self.mode == "linear":
            z = self.x[idx] @ self.w
            return (l2_normalize_rows(z) if self.normalize else z), z
        return self.table[idx], None

    def step(self, idx, z, grad_f, lr):
        if self.mode == "linear":
            grad_z = normalize_rows_backward(z, grad_f) if self.normalize else grad_f
            self.w = self.w - lr * (self.x[idx].T @ grad_z)
        else:
            rows = self.table[idx] - lr * grad_f
            self.table[idx] = l2_normalize_rows(rows) if self.normalize else rows

    def embed_all(self):
        return self.forward(np.arange(self.x.shape[0]))[0]


def train(dataset: Dataset, config: TrainConfig, label_table: Optional[rg.LabelEmbeddingTable] = None) -> TrainResult:
    """Run the training loop.

    Raises:
        ConfigError: for an invalid configuration.
        NonFiniteLoss: when a loss or gradient stops being finite; ``step``
            holds the global step index.
    """
    num_classes = dataset.num_classes
    config.validate(num_classes)
    rng = np.random.default_rng(config.seed)
    model = _Model(np.asarray(dataset.features, dtype=np.float64), config, rng)
    labels = np.asarray(dataset.labels)
    spec = config.loss
    objective = make_objective(spec, num_classes)
    proxies = None
    if spec.name in PROXY_LOSSES:
        proxies = px.init_proxies(num_classes, config.embedding_dim, spec.M, rng)
    omega = config.language.omega
    if omega and label_table is None:
        label_table = rg.synthetic_label_table(
            num_classes, config.language.synthetic_dim, config.language.synthetic_seed
        )

    def report():
        return evaluate(model.embed_all(), labels, config.eval_ks)

    initial = report()
    history = []
    step = 0
    for epoch in range(1, config.epochs + 1):
        losses = []
        for idx in epoch_batches(labels, config.sampler, config.batch_size, rng):
            f, z = model.forward(idx)
            batch = EmbeddingBatch(f, labels[idx])
            out = objective(batch, proxies)
            if omega:
                lang = rg.language_loss_on_batch(batch, label_table, config.language.gamma_L)
                out = rg.combine_with_language(out, lang, omega)
            finite = np.isfinite(out.value) and np.all(np.isfinite(out.grad_embeddings))
            if out.grad_proxies is not None:
                finite = finite and np.all(np.isfinite(out.grad_proxies))
            if not finite:
                raise NonFiniteLoss(f"non-finite loss or gradient at step {step}", step=step)
            losses.append(out.value)
            model.step(idx, z, out.grad_embeddings, config.learning_rate)
            if proxies is not None:
                vecs = proxies.vectors - config.proxy_lr * out.grad_proxies
                if config.normalize_embeddings:
                    vecs = l2_normalize_rows(vecs)
                proxies = proxies.with_vectors(vecs, normalized=config.normalize_embeddings)
            step += 1
        rep = report()
        history.append(EpochRecord(epoch, float(np.mean(losses)), rep.recall_at_k.get(1, float("nan")), rep.separation_gap))
        log.debug("epoch %d loss %.6f R@1 %.4f", epoch, history[-1].mean_loss, history[-1].recall_at_1)
    final = report()
    return TrainResult(model.embed_all(), labels, proxies, model.w, history, initial, final)
