"""Deep metric learning losses with analytic gradients, a gradient checker,
a deterministic trainer and retrieval metrics, all in numpy."""

from .core import (
    EmbeddingBatch,
    LossOutput,
    SimilarityMatrix,
    cosine_similarity_matrix,
    l2_normalize,
    l2_normalize_rows,
    log_sum_exp,
    masked_softmax,
    squared_euclidean_matrix,
)
from .errors import *  # noqa: F401,F403
from .evaluation import RetrievalReport, evaluate, recall_at_k, separation_stats
from .gradcheck import GradReport, check_all, default_registry, finite_diff
from .pair_losses import (
    MsMiningMasks,
    batch_contrastive_loss,
    batch_triplet_loss,
    contrastive_loss,
    ms_loss,
    ms_mine,
    npair_loss,
    triplet_loss_cosine,
    triplet_loss_euclidean,
)
from .proxy_losses import (
    ProxyGmlConfig,
    ProxySet,
    init_proxies,
    nca_loss,
    proxy_anchor_loss,
    proxygml_loss,
    proxygml_select,
    proxynca_loss,
    proxynca_pp_loss,
)
from .regularizers import (
    LabelEmbeddingTable,
    combine_with_language,
    direction_cos,
    directed_ms_loss,
    directed_proxynca_loss,
    directed_triplet_loss,
    language_distill_loss,
    synthetic_label_table,
)
from .trainer import Dataset, LanguageSpec, LossSpec, SyntheticSpec, TrainConfig, generate_synthetic, train

__version__ = "0.1.0"
