"""Affinity-feature re-ranking for instance retrieval.

Top-K candidates of a query are described by their similarities to the
top-L anchors of the same ranking, refined by a self-attention encoder,
and re-ranked by refined cosine similarity. Classical baselines (average,
rank-decayed and similarity-powered query expansion, graph diffusion) and
a synthetic training/evaluation harness are included.
"""

from .affinity import (
    AffinitySequence,
    EmbeddingMatrix,
    RankingList,
    TrainingSample,
    build_affinity_sequence,
    build_training_samples,
    ensure_query_first,
)
from .checkpoint import load_checkpoint, save_checkpoint
from .dataset import GroundTruth, SyntheticDatasetSpec, generate_synthetic, knn_search
from .encoder import EncoderConfig, EncoderParams, encoder_forward, init_params
from .evaluation import EvalReport, average_precision, mean_average_precision
from .kernels import Tape, make_rng
from .rerank import (
    RerankResult,
    alpha_qe,
    aqe,
    aqewd,
    csa_rerank,
    dfs_diffusion,
    qe_rerank,
    qe_second_round,
)
from .training import (
    LossConfig,
    SgdState,
    TrainRunConfig,
    contrastive_loss,
    cosine_lr,
    mse_loss,
    sgd_step,
    total_loss,
    train,
)

__version__ = "0.1.0"
