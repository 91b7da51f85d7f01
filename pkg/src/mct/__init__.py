"""Transductive few-shot classification with meta-learned confidence.

The pieces compose bottom-up: ``numkit`` provides a small reverse-mode
tape over numpy, ``episodes`` samples few-shot tasks from synthetic
Gaussians or embedding tables, ``encoder`` and ``metric`` define the
model, ``transduce`` refines prototypes with confidence-weighted query
mass, ``metatrain`` fits everything episodically, and ``evalcli`` wraps
evaluation, gradient checking, and the command line.
"""

from .checkpoint import ModelState, load_state, save_state, load_tensors, save_tensors
from .encoder import (
    VIEWS,
    EncoderParams,
    PerturbPolicy,
    ViewSpec,
    embedding_dim,
    encode,
    encode_batch,
    per_position,
    perturb_input,
    view_by_name,
)
from .episodes import (
    BayesOracle,
    EmbeddingTable,
    Episode,
    SyntheticSpec,
    derive_seed,
    gen_synthetic,
    load_embeddings,
    sample_episode,
    save_embeddings,
)
from .errors import (
    CapacityError,
    ContractError,
    DomainError,
    FormatError,
    MctError,
)
from .evalcli import (
    EvalProtocol,
    GradcheckReport,
    Report,
    evaluate,
    gradcheck,
    main,
    nll,
    render_jsonl,
    render_table,
)
from .metatrain import (
    GlobalClassifier,
    LrSchedule,
    StepReport,
    TrainConfig,
    TrainState,
    dimension_loss,
    instance_loss,
    lr_at,
    train,
    train_step,
)
from .metric import METRIC_KINDS, MetricSpec, ScalerParams, distance, pairwise, scaler_eval
from .transduce import (
    Prototypes,
    check_confidence,
    confidence,
    init_prototypes,
    mct_infer,
    predict_labels,
    semi_infer,
    soft_kmeans,
    update_prototypes,
)

__version__ = "0.1.0"

__all__ = [
    "__version__",
    # errors
    "MctError", "DomainError", "ContractError", "CapacityError", "FormatError",
    # episodes
    "Episode", "SyntheticSpec", "EmbeddingTable", "BayesOracle",
    "sample_episode", "gen_synthetic", "derive_seed",
    "save_embeddings", "load_embeddings",
    # encoder
    "EncoderParams", "ViewSpec", "VIEWS", "view_by_name", "embedding_dim",
    "encode", "encode_batch", "per_position", "PerturbPolicy", "perturb_input",
    # metric
    "MetricSpec", "ScalerParams", "METRIC_KINDS",
    "scaler_eval", "pairwise", "distance",
    # transduction
    "Prototypes", "init_prototypes", "confidence", "update_prototypes",
    "soft_kmeans", "mct_infer", "semi_infer", "predict_labels",
    "check_confidence",
    # training
    "TrainConfig", "TrainState", "StepReport", "GlobalClassifier",
    "LrSchedule", "lr_at", "instance_loss", "dimension_loss",
    "train", "train_step",
    # checkpoints
    "ModelState", "save_state", "load_state", "save_tensors", "load_tensors",
    # evaluation
    "EvalProtocol", "Report", "evaluate", "nll", "render_jsonl",
    "render_table", "GradcheckReport", "gradcheck", "main",
]
