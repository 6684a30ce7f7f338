"""Routing engine for large libraries of low-rank (LoRA) adapters.

Adapters are spectrally aligned offline (rank-r SVD of the product BA), after
which each token is routed in two stages: a cheap top-k filter over arrow
vectors (the top right-singular direction of every adapter) followed by a
spectral rerank over the surviving candidates. Task and knowledge libraries
are routed independently per layer and applied additively.
"""

from lagroute.arrow import CandidateSet, arrow_scores, topk
from lagroute.core import (
    KNOWLEDGE,
    LIBRARY_TAGS,
    TASK,
    AdapterLibrary,
    AlignedAdapter,
    CapacityError,
    Dims,
    LagError,
    LibraryError,
    NumericError,
    RawAdapter,
    RoutingConfig,
    RoutingError,
    ShapeError,
)
from lagroute.linalg import SkippedAdapter, SvdResult, align, align_library, svd_rank_r
from lagroute.metrics import (
    CostReport,
    DatasetScore,
    cost_model,
    measured_flops_check,
    normalized_task_score,
)
from lagroute.router import FlopTally, RouteTrace, TraceEntry, apply, route_sequence, route_token
from lagroute.sim import LayerSpec, PlantedBenchmark, evaluate, generate_benchmark, sweep_k
from lagroute.spectral import Selection, rerank, spectr_score
from lagroute.store import LoadError, StoreError, load_library, save_library

__version__ = "0.1.0"

__all__ = [
    "AdapterLibrary",
    "AlignedAdapter",
    "CandidateSet",
    "CapacityError",
    "CostReport",
    "DatasetScore",
    "Dims",
    "FlopTally",
    "KNOWLEDGE",
    "LIBRARY_TAGS",
    "LagError",
    "LayerSpec",
    "LibraryError",
    "LoadError",
    "NumericError",
    "PlantedBenchmark",
    "RawAdapter",
    "RouteTrace",
    "RoutingConfig",
    "RoutingError",
    "Selection",
    "ShapeError",
    "SkippedAdapter",
    "StoreError",
    "SvdResult",
    "TASK",
    "TraceEntry",
    "align",
    "align_library",
    "apply",
    "arrow_scores",
    "cost_model",
    "evaluate",
    "generate_benchmark",
    "load_library",
    "measured_flops_check",
    "normalized_task_score",
    "rerank",
    "route_sequence",
    "route_token",
    "save_library",
    "spectr_score",
    "svd_rank_r",
    "sweep_k",
    "topk",
]
