"""Checkpoint merging engine and interference diagnostics."""

__version__ = "0.1.0"

from .archive import (
    Checkpoint,
    CompatibilityReport,
    TensorMeta,
    apply_dtype_policy,
    read_checkpoint,
    validate_compatible,
    write_checkpoint,
)
from .baselines import (
    FisherSidecar,
    GramSidecar,
    fisher_merge,
    regmean_merge,
    simple_average,
    task_arithmetic,
)
from .report import MergeReport
from .task_vector import (
    MagnitudeVector,
    SignVector,
    TaskVector,
    apply_task_vector,
    compute_task_vector,
    decompose,
    linear_combination,
    load_sign_vector,
    load_task_vector,
    recompose,
    save_sign_vector,
    save_task_vector,
)
from .ties import (
    TiesConfig,
    TrimmedTaskVector,
    disjoint_merge,
    elect_sign,
    merge_task_vectors,
    ties_merge,
    trim,
)

__all__ = [
    "Checkpoint",
    "CompatibilityReport",
    "FisherSidecar",
    "GramSidecar",
    "MagnitudeVector",
    "MergeReport",
    "SignVector",
    "TaskVector",
    "TensorMeta",
    "TiesConfig",
    "TrimmedTaskVector",
    "apply_dtype_policy",
    "apply_task_vector",
    "compute_task_vector",
    "decompose",
    "disjoint_merge",
    "elect_sign",
    "fisher_merge",
    "linear_combination",
    "load_sign_vector",
    "load_task_vector",
    "merge_task_vectors",
    "read_checkpoint",
    "recompose",
    "regmean_merge",
    "save_sign_vector",
    "save_task_vector",
    "simple_average",
    "task_arithmetic",
    "ties_merge",
    "trim",
    "validate_compatible",
    "write_checkpoint",
]
