"""Context-aware implicit-feedback recommendation via tensor factorization.

A D-dimensional binary preference tensor (user x item x context...) with
per-cell confidence weights is factorized into one K x S_i matrix per
dimension by alternating least squares; approximate coordinate-descent and
conjugate-gradient column solvers trade exactness for speed. Seasonality and
sequentiality context builders and a recall/MAP evaluation harness round out
the pipeline.
"""

from .context import (
    ContextAssigner,
    NoContext,
    SeasonContext,
    SequenceContext,
    blend_weights,
    make_assigner,
)
from .data import (
    Event,
    EventLog,
    ParseError,
    SparseTensor,
    Vocabulary,
    build_tensor,
    parse_event_log,
    time_split,
)
from .evaluate import EvalReport, evaluate, map_at_n, recall_at_n, top_n
from .model import (
    FactorModel,
    ModelFormatError,
    init_model,
    load_model,
    save_model,
)
from .solvers import (
    ColumnSystem,
    CompressedNegatives,
    PerContextComposite,
    SingularSystemError,
    SolverDivergence,
    TrainConfig,
    als_update_dimension,
    build_column_system,
    cd_update_dimension,
    cg_update_dimension,
    compress_negatives,
    gram,
    loss,
    precompute_shared,
    solve_cg,
    solve_weighted_cd,
    train,
    train_per_context_baseline,
)

__version__ = "0.1.0"

__all__ = [
    "ColumnSystem",
    "CompressedNegatives",
    "ContextAssigner",
    "EvalReport",
    "Event",
    "EventLog",
    "FactorModel",
    "ModelFormatError",
    "NoContext",
    "ParseError",
    "PerContextComposite",
    "SeasonContext",
    "SequenceContext",
    "SingularSystemError",
    "SolverDivergence",
    "SparseTensor",
    "TrainConfig",
    "Vocabulary",
    "als_update_dimension",
    "blend_weights",
    "build_column_system",
    "build_tensor",
    "cd_update_dimension",
    "cg_update_dimension",
    "compress_negatives",
    "evaluate",
    "gram",
    "init_model",
    "load_model",
    "loss",
    "make_assigner",
    "map_at_n",
    "parse_event_log",
    "precompute_shared",
    "recall_at_n",
    "save_model",
    "solve_cg",
    "solve_weighted_cd",
    "time_split",
    "top_n",
    "train",
    "train_per_context_baseline",
]
