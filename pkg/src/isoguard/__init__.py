"""Unsupervised anomaly detection with isolation forests and a 1-D K-Means labeler."""
from __future__ import annotations

__version__ = "0.1.0"

from .errors import DataError, IsoGuardError, ModelError
from .iforest import ForestParams, IsolationForestModel, anomaly_score, fit, score_batch
from .labeler import KMeansLabelerModel, QuantileLabelerModel, kmeans_fit, label, quantile_fit

__all__ = [
    "__version__",
    "DataError",
    "ForestParams",
    "IsoGuardError",
    "IsolationForestModel",
    "KMeansLabelerModel",
    "ModelError",
    "QuantileLabelerModel",
    "anomaly_score",
    "fit",
    "kmeans_fit",
    "label",
    "quantile_fit",
    "score_batch",
]
