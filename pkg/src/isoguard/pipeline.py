"""Fit and apply the full record -> score -> label pipeline."""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Any, Iterable, Mapping, Sequence

import numpy as np

from .dataio import RecordView, numeric_matrix
from .errors import DegenerateInputError, IngestError, ParameterError
from .features import NUMERIC, FeatureSchema, transform_many
from .iforest import ForestParams, IsolationForestModel, fit as fit_forest
from .labeler import (
    DEFAULT_K,
    KMeansLabelerModel,
    QuantileLabelerModel,
    kmeans_fit,
    label_mask,
    quantile_fit,
)
from .model_store import ModelBundle, fingerprint

logger = logging.getLogger(__name__)

LABELERS = ("kmeans", "quantile")


@dataclass(frozen=True)
class LabelerConfig:
    """Which labeler to fit on the training scores, and its knobs."""

    kind: str = "kmeans"
    k: int = DEFAULT_K
    contamination: float = 0.1
    relative_error: float = 0.0

    def __post_init__(self) -> None:
        if self.kind not in LABELERS:
            raise ParameterError(f"labeler must be one of {LABELERS}, got {self.kind!r}")
        if self.k < 1:
            raise ParameterError(f"k must be >= 1, got {self.k}")
        if not 0.0 < self.contamination < 1.0:
            raise ParameterError(f"contamination must be in (0, 1), got {self.contamination}")
        if not 0.0 <= self.relative_error <= 1.0:
            raise ParameterError(f"relative_error must be in [0, 1], got {self.relative_error}")

    def to_dict(self) -> dict[str, Any]:
        if self.kind == "kmeans":
            return {"kind": "kmeans", "k": self.k}
        return {"kind": "quantile", "contamination": self.contamination, "relative_error": self.relative_error}


def fit_labeler(scores: np.ndarray, config: LabelerConfig, seed: int = 0) -> KMeansLabelerModel | QuantileLabelerModel:
    """Fit the configured labeler on training scores.

    K-Means on scores with fewer distinct values than ``k`` falls back to a
    single cluster, which labels everything normal.
    """
    if config.kind == "quantile":
        return quantile_fit(scores, config.contamination, config.relative_error)
    try:
        return kmeans_fit(scores, k=config.k, seed=seed)
    except DegenerateInputError as exc:
        logger.warning("%s", exc)
        return kmeans_fit(scores, k=1, seed=seed)


def encode(records: Sequence[Mapping[str, Any]], schema: FeatureSchema) -> np.ndarray:
    """Encode records into a matrix, with a fast path for all-numeric schemas."""
    if all(c.kind == NUMERIC for c in schema.columns):
        try:
            return numeric_matrix(records, schema.names)
        except (KeyError, IngestError):
            pass  # slow path below reports the exact row and column
    return transform_many(records, schema)[0]


def fit_pipeline(
    view: RecordView,
    schema: FeatureSchema | None = None,
    forest_params: ForestParams | None = None,
    labeler: LabelerConfig | None = None,
    n_jobs: int | None = None,
) -> ModelBundle:
    """Fit schema, forest and labeler on label-free records.

    ``schema`` may be unfitted (its categorical vocabularies are fitted
    here); when omitted every column is treated as numeric.
    """
    if not isinstance(view, RecordView):
        raise TypeError("fit_pipeline takes a RecordView; call Dataset.unlabeled() first")
    forest_params = forest_params or ForestParams()
    labeler = labeler or LabelerConfig()
    if schema is None:
        schema = FeatureSchema.numeric(view.columns)
    if not schema.fitted:
        schema = schema.fit(view.rows)
    X = encode(view.rows, schema)
    forest = fit_forest(X, forest_params, feature_schema=schema, n_jobs=n_jobs)
    train_scores = forest.score(X)
    lab = fit_labeler(train_scores, labeler, seed=forest_params.seed)
    config = {
        "schema": {"columns": [[c.name, c.kind] for c in schema.columns], "timezone": schema.timezone},
        "forest": forest_params.to_dict(),
        "labeler": labeler.to_dict(),
        "n_train": forest.n_train,
    }
    return ModelBundle(feature_schema=schema, forest=forest, labeler=lab, train_fingerprint=fingerprint(config))


def score_records(bundle: ModelBundle, records: Sequence[Mapping[str, Any]]) -> np.ndarray:
    return bundle.forest.score(encode(records, bundle.feature_schema))


def label_scores(bundle: ModelBundle, scores: Iterable[float]) -> np.ndarray:
    """Boolean anomaly mask for ``scores`` under the bundle's labeler."""
    return label_mask(bundle.labeler, np.asarray(list(scores) if not isinstance(scores, np.ndarray) else scores))


def summary(bundle: ModelBundle) -> dict[str, Any]:
    forest: IsolationForestModel = bundle.forest
    out: dict[str, Any] = {
        "trees": forest.params.num_trees,
        "subsample_size": forest.sample_size,
        "height_limit": forest.height_limit,
        "n_train": forest.n_train,
        "n_features": forest.n_features,
        "labeler": bundle.labeler.kind,
    }
    lab = bundle.labeler
    if isinstance(lab, KMeansLabelerModel):
        out["centroids"] = list(lab.centroids)
        out["cluster_sizes"] = list(lab.cluster_sizes)
        out["normal_cluster"] = lab.normal_cluster
        if lab.boundary() is not None:
            out["threshold"] = lab.boundary()
    else:
        out["threshold"] = lab.threshold
        out["contamination"] = lab.contamination
        out["relative_error"] = lab.relative_error
    return out
