"""Neighbor metadata fusion for multilabel image annotation."""

from ._core import (
    DataError,
    Model,
    NumericError,
    UsageError,
    __version__,
    architectures,
    average_precision,
    candidate_count,
    cosine_distance,
    evaluate,
    grad_check,
    jaccard,
    run_synthetic_protocol,
    synth_corpus,
    upper_bound,
)

__all__ = [
    "DataError",
    "Model",
    "NumericError",
    "UsageError",
    "__version__",
    "architectures",
    "average_precision",
    "candidate_count",
    "cosine_distance",
    "evaluate",
    "grad_check",
    "jaccard",
    "run_synthetic_protocol",
    "synth_corpus",
    "upper_bound",
]
