"""Binary hash codes for implicit-feedback top-k recommendation."""

from .core import (
    CodeMatrix,
    ContentMatrix,
    DelegateMatrix,
    HyperParams,
    InteractionSet,
    auc,
    pack_signs,
    preference,
    total_loss,
)
from .errors import HashrecError
from .retrieval import (
    EvalReport,
    RankedList,
    bench_retrieval,
    encode_cold_item,
    evaluate,
    top_k,
)
from .solver import (
    FitResult,
    ModelArtifact,
    fit,
    initialize,
    load_model,
    project_delegate,
    save_model,
)

__version__ = "0.1.0"

__all__ = [
    "CodeMatrix",
    "ContentMatrix",
    "DelegateMatrix",
    "EvalReport",
    "FitResult",
    "HashrecError",
    "HyperParams",
    "InteractionSet",
    "ModelArtifact",
    "RankedList",
    "auc",
    "bench_retrieval",
    "encode_cold_item",
    "evaluate",
    "fit",
    "initialize",
    "load_model",
    "pack_signs",
    "preference",
    "project_delegate",
    "save_model",
    "top_k",
    "total_loss",
    "__version__",
]
