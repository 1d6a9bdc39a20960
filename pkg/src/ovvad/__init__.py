"""Open-vocabulary video anomaly detection on precomputed frame features.

The package trains a class-agnostic frame detector and a class-specific
video categorizer on top of frozen per-frame embeddings, synthesizes pseudo
novel anomalies in feature space, fine-tunes on them, and evaluates with
frame-level AUC/AP and video-level Top-1 accuracy split by base/novel
categories.
"""

from . import data, evaluation, losses, model, nas, numkernel, train
from .errors import DataError, NumericalError, OvvadError, UsageError

__version__ = "0.1.0"

__all__ = [
    "data",
    "evaluation",
    "losses",
    "model",
    "nas",
    "numkernel",
    "train",
    "DataError",
    "NumericalError",
    "OvvadError",
    "UsageError",
    "__version__",
]
