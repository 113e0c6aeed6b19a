"""Heavy-tailed PLDA backend for speaker-embedding verification."""

from htplda.errors import DataError, HtPldaError, NumericalError
from htplda.model import (
    INFINITY,
    HtPldaModel,
    LabeledEmbeddings,
    Projections,
    likelihood_stats,
    precompute,
    sample,
    validate_model,
)

__all__ = [
    "INFINITY",
    "DataError",
    "HtPldaError",
    "HtPldaModel",
    "LabeledEmbeddings",
    "NumericalError",
    "Projections",
    "likelihood_stats",
    "precompute",
    "sample",
    "validate_model",
]

__version__ = "0.1.0"
