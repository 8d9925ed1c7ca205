"""Text-based localization of moments in a video corpus.

A trainable joint embedding: a hierarchical temporal-convolution encoder turns
each video's clip features into one embedding per candidate moment in a single
pass, a two-layer feed-forward encoder embeds sentences, and triplet losses
align the two at both the within-video and the whole-corpus level. Retrieval
is an exact cosine scan over every candidate moment of every indexed video.
"""

from .errors import (
    BatchSizeError,
    ConfigError,
    ContractError,
    FormatError,
    GeometryError,
    MomentlocError,
    NumericError,
    ShapeError,
    UnitError,
)
from .estimator import MomentRetriever
from .geometry import (
    BranchSpec,
    CandidateSet,
    ConvLayer,
    DatasetProfile,
    MomentSpan,
    enumerate_candidates,
    fit_length,
    get_profile,
    iou,
    positives_for,
)
from .model import ModelParams, encode_moments, encode_sentence, init_params
from .objective import (
    BatchScores,
    LossReport,
    intra_loss_max,
    intra_loss_sum,
    relevance,
    similarity,
    total_loss,
    video_loss_max,
    video_loss_sum,
)
from .retrieval import (
    CorpusIndex,
    EvalReport,
    EvalSettings,
    GroundTruth,
    RetrievalResult,
    build_index,
    evaluate,
    evaluate_prior,
    median_rank,
    moment_frequency_prior,
    query_top_k,
    recall_at_k_iou,
)
from .synthdata import (
    SyntheticCorpus,
    SyntheticSpec,
    generate_corpus,
    read_features,
    split,
    write_features,
)
from .training import (
    AdamState,
    Checkpoint,
    Hyperparams,
    adam_step,
    fit,
    load_checkpoint,
    lr_at,
    make_minibatches,
    save_checkpoint,
)

__version__ = "0.1.0"

__all__ = [
    "AdamState",
    "BatchScores",
    "BatchSizeError",
    "BranchSpec",
    "CandidateSet",
    "Checkpoint",
    "ConfigError",
    "ContractError",
    "ConvLayer",
    "CorpusIndex",
    "DatasetProfile",
    "EvalReport",
    "EvalSettings",
    "FormatError",
    "GeometryError",
    "GroundTruth",
    "Hyperparams",
    "LossReport",
    "ModelParams",
    "MomentRetriever",
    "MomentSpan",
    "MomentlocError",
    "NumericError",
    "RetrievalResult",
    "ShapeError",
    "SyntheticCorpus",
    "SyntheticSpec",
    "UnitError",
    "adam_step",
    "build_index",
    "encode_moments",
    "encode_sentence",
    "enumerate_candidates",
    "evaluate",
    "evaluate_prior",
    "fit",
    "fit_length",
    "generate_corpus",
    "get_profile",
    "init_params",
    "intra_loss_max",
    "intra_loss_sum",
    "iou",
    "load_checkpoint",
    "lr_at",
    "make_minibatches",
    "median_rank",
    "moment_frequency_prior",
    "positives_for",
    "query_top_k",
    "read_features",
    "recall_at_k_iou",
    "relevance",
    "save_checkpoint",
    "similarity",
    "split",
    "total_loss",
    "video_loss_max",
    "video_loss_sum",
    "write_features",
]
