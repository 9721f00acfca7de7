"""Save and load a fitted pipeline (schema + forest + labeler) as one JSON file.

The layout is documented in FORMAT.md at the repository root. Floats are
written with Python's ``repr``, the shortest decimal string that reads back
to the same double (never more than 17 significant digits), so every
threshold and centroid round-trips bit for bit.
"""
from __future__ import annotations

import hashlib
import json
import math
import os
from dataclasses import dataclass, field
from datetime import datetime, timezone
from typing import Any, Mapping

import numpy as np

from .errors import ModelLoadError, UnsupportedVersionError
from .features import FeatureSchema
from .iforest import LEAF, ForestParams, IsolationForestModel, IsolationTree
from .labeler import KMeansLabelerModel, QuantileLabelerModel

FORMAT_NAME = "isoguard-model"
FORMAT_VERSION = 1
SECTIONS = ("format_version", "created_at", "train_fingerprint", "feature_schema", "forest", "labeler")


@dataclass(eq=False)
class ModelBundle:
    """Everything needed to turn a raw record into a score and a label."""

    feature_schema: FeatureSchema
    forest: IsolationForestModel
    labeler: KMeansLabelerModel | QuantileLabelerModel
    train_fingerprint: str
    created_at: str = field(default_factory=lambda: datetime.now(timezone.utc).isoformat(timespec="seconds"))
    format_version: int = FORMAT_VERSION

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, ModelBundle):
            return NotImplemented
        return (
            self.format_version == other.format_version
            and self.created_at == other.created_at
            and self.train_fingerprint == other.train_fingerprint
            and self.feature_schema == other.feature_schema
            and self.forest.structure_equal(other.forest)
            and self.labeler == other.labeler
        )

    __hash__ = None  # type: ignore[assignment]


def fingerprint(config: Mapping[str, Any]) -> str:
    """SHA-256 of the canonical JSON form of a training config."""
    blob = json.dumps(config, sort_keys=True, separators=(",", ":"), allow_nan=False)
    return "sha256:" + hashlib.sha256(blob.encode("utf-8")).hexdigest()


# ---------------------------------------------------------------------------
# encode
# ---------------------------------------------------------------------------

def _tree_to_dict(tree: IsolationTree) -> dict[str, list]:
    return {
        "feature": tree.feature.tolist(),
        "threshold": tree.threshold.tolist(),
        "left": tree.left.tolist(),
        "right": tree.right.tolist(),
        "size": tree.size.tolist(),
    }


def _forest_to_dict(forest: IsolationForestModel) -> dict[str, Any]:
    return {
        "params": forest.params.to_dict(),
        "n_train": forest.n_train,
        "n_features": forest.n_features,
        "sample_size": forest.sample_size,
        "height_limit": forest.height_limit,
        "trees": [_tree_to_dict(t) for t in forest.trees],
    }


def _labeler_to_dict(model: KMeansLabelerModel | QuantileLabelerModel) -> dict[str, Any]:
    if isinstance(model, KMeansLabelerModel):
        return {
            "kind": "kmeans",
            "k": model.k,
            "centroids": list(model.centroids),
            "normal_cluster": model.normal_cluster,
            "cluster_sizes": list(model.cluster_sizes),
            "max_iter": model.max_iter,
            "tol": model.tol,
            "seed": model.seed,
            "n_iter": model.n_iter,
        }
    return {
        "kind": "quantile",
        "contamination": model.contamination,
        "relative_error": model.relative_error,
        "threshold": model.threshold,
    }


def to_document(bundle: ModelBundle) -> dict[str, Any]:
    return {
        "format": FORMAT_NAME,
        "format_version": bundle.format_version,
        "created_at": bundle.created_at,
        "train_fingerprint": bundle.train_fingerprint,
        "feature_schema": bundle.feature_schema.to_dict(),
        "forest": _forest_to_dict(bundle.forest),
        "labeler": _labeler_to_dict(bundle.labeler),
    }


def dumps(bundle: ModelBundle) -> str:
    return json.dumps(to_document(bundle), sort_keys=True, separators=(",", ":"), allow_nan=False) + "\n"


def save(bundle: ModelBundle, path: str | os.PathLike) -> None:
    """Write ``bundle`` to ``path`` (via a temp file, then rename)."""
    text = dumps(bundle)
    tmp = f"{os.fspath(path)}.tmp"
    try:
        with open(tmp, "w", encoding="utf-8") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except OSError as exc:
        raise OSError(exc.errno, f"cannot write model to {os.fspath(path)!r}: {exc.strerror}") from exc


# ---------------------------------------------------------------------------
# decode
# ---------------------------------------------------------------------------

def _need(doc: Mapping[str, Any], key: str, section: str, kind: type | tuple[type, ...]) -> Any:
    if key not in doc:
        raise ModelLoadError(f"missing field {key!r}", section=section)
    value = doc[key]
    if isinstance(value, bool) and bool not in (kind if isinstance(kind, tuple) else (kind,)):
        raise ModelLoadError(f"field {key!r} has the wrong type", section=section)
    if not isinstance(value, kind):
        raise ModelLoadError(f"field {key!r} has the wrong type", section=section)
    return value


def _real(value: Any, what: str, section: str) -> float:
    if isinstance(value, bool) or not isinstance(value, (int, float)) or not math.isfinite(value):
        raise ModelLoadError(f"{what} is not a finite number", section=section)
    return float(value)


def _tree_from_dict(doc: Any, index: int) -> IsolationTree:
    sec = "forest"
    if not isinstance(doc, Mapping):
        raise ModelLoadError(f"tree {index} is not an object", section=sec)
    try:
        feature = np.asarray(_need(doc, "feature", sec, list), dtype=np.int32)
        threshold = np.asarray(_need(doc, "threshold", sec, list), dtype=np.float64)
        left = np.asarray(_need(doc, "left", sec, list), dtype=np.int32)
        right = np.asarray(_need(doc, "right", sec, list), dtype=np.int32)
        size = np.asarray(_need(doc, "size", sec, list), dtype=np.int64)
    except (TypeError, ValueError, OverflowError) as exc:
        raise ModelLoadError(f"tree {index}: non-numeric node array ({exc})", section=sec) from None
    n = feature.shape[0]
    if n == 0 or any(a.ndim != 1 or a.shape[0] != n for a in (threshold, left, right, size)):
        raise ModelLoadError(f"tree {index}: node arrays are empty or differ in length", section=sec)
    internal = feature != LEAF
    if (feature[internal] < 0).any() or not np.isfinite(threshold).all():
        raise ModelLoadError(f"tree {index}: bad split feature or threshold", section=sec)
    # children are allocated as adjacent pairs after their parent
    idx = np.arange(n)
    if (
        (left[internal] <= idx[internal]).any()
        or (left[internal] >= n - 1).any()
        or (right[internal] != left[internal] + 1).any()
        or (left[~internal] != -1).any()
        or (right[~internal] != -1).any()
        or (size[~internal] < 1).any()
    ):
        raise ModelLoadError(f"tree {index}: inconsistent child references or leaf sizes", section=sec)
    return IsolationTree(feature, threshold, left, right, size)


def _forest_from_dict(doc: Any, schema: FeatureSchema) -> IsolationForestModel:
    sec = "forest"
    if not isinstance(doc, Mapping):
        raise ModelLoadError("section is not an object", section=sec)
    p = _need(doc, "params", sec, Mapping)
    try:
        params = ForestParams(
            num_trees=int(p["num_trees"]),
            subsample_size=int(p["subsample_size"]),
            height_limit=None if p.get("height_limit") is None else int(p["height_limit"]),
            seed=int(p["seed"]),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise ModelLoadError(f"bad params ({exc})", section=sec) from None
    trees_doc = _need(doc, "trees", sec, list)
    if len(trees_doc) != params.num_trees:
        raise ModelLoadError(f"{len(trees_doc)} trees stored but params say {params.num_trees}", section=sec)
    trees = [_tree_from_dict(t, i) for i, t in enumerate(trees_doc)]
    n_features = _need(doc, "n_features", sec, int)
    sample_size = _need(doc, "sample_size", sec, int)
    for i, t in enumerate(trees):
        if t.sample_count != sample_size:
            raise ModelLoadError(f"tree {i} holds {t.sample_count} samples, expected {sample_size}", section=sec)
        if (t.feature >= n_features).any():
            raise ModelLoadError(f"tree {i} splits on a feature >= {n_features}", section=sec)
    if schema.dimension != n_features:
        raise ModelLoadError(f"forest has {n_features} features but schema has {schema.dimension}", section=sec)
    return IsolationForestModel(
        trees=trees,
        params=params,
        n_train=_need(doc, "n_train", sec, int),
        n_features=n_features,
        sample_size=sample_size,
        height_limit=_need(doc, "height_limit", sec, int),
        feature_schema=schema,
    )


def _labeler_from_dict(doc: Any) -> KMeansLabelerModel | QuantileLabelerModel:
    sec = "labeler"
    if not isinstance(doc, Mapping):
        raise ModelLoadError("section is not an object", section=sec)
    kind = _need(doc, "kind", sec, str)
    if kind == "kmeans":
        centroids = tuple(_real(c, "centroid", sec) for c in _need(doc, "centroids", sec, list))
        sizes = tuple(_need(doc, "cluster_sizes", sec, list))
        k = _need(doc, "k", sec, int)
        normal = _need(doc, "normal_cluster", sec, int)
        if len(centroids) != k or len(sizes) != k or not 0 <= normal < k:
            raise ModelLoadError("centroids, cluster_sizes, k and normal_cluster disagree", section=sec)
        if list(centroids) != sorted(centroids):
            raise ModelLoadError("centroids must be sorted ascending", section=sec)
        return KMeansLabelerModel(
            k=k,
            centroids=centroids,
            normal_cluster=normal,
            cluster_sizes=tuple(int(s) for s in sizes),
            max_iter=_need(doc, "max_iter", sec, int),
            tol=_real(_need(doc, "tol", sec, (int, float)), "tol", sec),
            seed=_need(doc, "seed", sec, int),
            n_iter=_need(doc, "n_iter", sec, int),
        )
    if kind == "quantile":
        return QuantileLabelerModel(
            contamination=_real(_need(doc, "contamination", sec, (int, float)), "contamination", sec),
            relative_error=_real(_need(doc, "relative_error", sec, (int, float)), "relative_error", sec),
            threshold=_real(_need(doc, "threshold", sec, (int, float)), "threshold", sec),
        )
    raise ModelLoadError(f"unknown labeler kind {kind!r}", section=sec)


def from_document(doc: Any) -> ModelBundle:
    if not isinstance(doc, Mapping):
        raise ModelLoadError("model document is not a JSON object")
    if "format_version" not in doc:
        raise ModelLoadError("missing mandatory field", section="format_version")
    version = doc["format_version"]
    if isinstance(version, bool) or not isinstance(version, int):
        raise ModelLoadError(f"not an integer: {version!r}", section="format_version")
    if version != FORMAT_VERSION:
        raise UnsupportedVersionError(
            f"model format version {version} is not supported (this build reads version {FORMAT_VERSION})",
            section="format_version",
        )
    if doc.get("format", FORMAT_NAME) != FORMAT_NAME:
        raise ModelLoadError(f"not an {FORMAT_NAME} document", section="format")
    for sec in SECTIONS:
        if sec not in doc:
            raise ModelLoadError("section missing", section=sec)
    try:
        schema = FeatureSchema.from_dict(doc["feature_schema"])
    except ModelLoadError:
        raise
    except Exception as exc:
        raise ModelLoadError(f"cannot rebuild schema ({exc})", section="feature_schema") from None
    forest = _forest_from_dict(doc["forest"], schema)
    labeler = _labeler_from_dict(doc["labeler"])
    return ModelBundle(
        feature_schema=schema,
        forest=forest,
        labeler=labeler,
        train_fingerprint=_need(doc, "train_fingerprint", "train_fingerprint", str),
        created_at=_need(doc, "created_at", "created_at", str),
        format_version=version,
    )


def loads(text: str) -> ModelBundle:
    try:
        doc = json.loads(text)
    except ValueError as exc:
        raise ModelLoadError(f"not valid JSON ({exc})") from None
    return from_document(doc)


def load(path: str | os.PathLike) -> ModelBundle:
    """Read a bundle written by :func:`save`.

    Raises:
        ModelLoadError: unreadable or corrupt file; the message names the section.
        UnsupportedVersionError: ``format_version`` this build does not read.
    """
    try:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise ModelLoadError(f"cannot read {os.fspath(path)!r}: {exc.strerror}") from exc
    except UnicodeDecodeError as exc:
        raise ModelLoadError(f"{os.fspath(path)!r} is not UTF-8 text") from exc
    return loads(text)
