"""Streaming PARAFAC2-style factorization of irregular tensors.

A library and CLI for factorizing collections of matrices that share a
column count but grow dual-way over time: existing slices gain rows and new
slices keep arriving.  Factors update in time linear in the size of new
data, a forgetting factor tilts them toward recent behavior, and
reconstruction errors drive slice- and tensor-level anomaly detection.
"""

__version__ = "0.1.0"

from .als import FactorSet, parafac2_als, reconstruct, relative_error
from .anomaly import AnomalyFlag, ErrorSeries, detect, moving_threshold, slice_error, tensor_error
from .evaluate import (
    BenchResult,
    ExperimentConfig,
    UpdateReport,
    cycle_benchmark,
    run_experiment,
    summarize,
    sweep_forgetting,
)
from .linalg import SolveError
from .stream import (
    HelperState,
    StreamState,
    UpdateResult,
    init_helpers,
    initialize,
    load_state,
    save_state,
)
from .synth import AnomalyInjection, SynthParams, synthesize
from .tensor import (
    CAUSAL,
    GLOBAL,
    ColumnStats,
    DatasetError,
    IrregularTensor,
    NewSlice,
    SliceMatrix,
    UpdateBatch,
    apply_batch,
    load_batch,
    load_dataset,
    normalize_batch,
    normalize_tensor,
    replay,
    save_batch,
    save_dataset,
)

__all__ = [
    "__version__",
    "AnomalyFlag",
    "AnomalyInjection",
    "BenchResult",
    "CAUSAL",
    "ColumnStats",
    "DatasetError",
    "ErrorSeries",
    "ExperimentConfig",
    "FactorSet",
    "GLOBAL",
    "HelperState",
    "IrregularTensor",
    "NewSlice",
    "SliceMatrix",
    "SolveError",
    "StreamState",
    "SynthParams",
    "UpdateBatch",
    "UpdateReport",
    "UpdateResult",
    "apply_batch",
    "cycle_benchmark",
    "detect",
    "init_helpers",
    "initialize",
    "load_batch",
    "load_dataset",
    "load_state",
    "moving_threshold",
    "normalize_batch",
    "normalize_tensor",
    "parafac2_als",
    "reconstruct",
    "relative_error",
    "replay",
    "run_experiment",
    "save_batch",
    "save_dataset",
    "save_state",
    "slice_error",
    "summarize",
    "sweep_forgetting",
    "synthesize",
    "tensor_error",
]
