"""AUC, confusion counts, multi-seed benchmarks and labeler-parameter sweeps."""
from __future__ import annotations

import csv
import json
import logging
import os
import platform
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone
from typing import Any, Iterable, Sequence

import numpy as np

from .dataio import Dataset, RecordView
from .errors import ParameterError, UndefinedMetricError
from .features import FeatureSchema
from .iforest import ForestParams, fit as fit_forest
from .labeler import ANOMALY, label_mask
from .pipeline import LabelerConfig, encode, fit_labeler

logger = logging.getLogger(__name__)

METHODS = {"iforest-kmeans": "kmeans", "iforest-quantile": "quantile"}
SWEEP_PARAMS = ("contamination", "relative_error")
DEFAULT_SEEDS = tuple(range(1, 11))


def _truth_array(truth: Iterable[Any]) -> np.ndarray:
    arr = truth if isinstance(truth, np.ndarray) else np.asarray(list(truth), dtype=object)
    if arr.dtype == bool:
        return arr
    return np.array([t is True or t == ANOMALY or t == 1 for t in arr], dtype=bool)


def average_ranks(values: np.ndarray) -> np.ndarray:
    """1-based ranks, tied values sharing the mean of their positions."""
    order = np.argsort(values, kind="mergesort")
    sorted_v = values[order]
    starts = np.flatnonzero(np.r_[True, sorted_v[1:] != sorted_v[:-1]])
    ends = np.r_[starts[1:], sorted_v.size]
    mean_rank = (starts + ends + 1) / 2.0
    ranks = np.empty(values.size, dtype=np.float64)
    ranks[order] = np.repeat(mean_rank, ends - starts)
    return ranks


def auc(truth: Iterable[Any], values: Iterable[float]) -> float:
    """Probability that a random anomaly outranks a random normal; ties count 1/2.

    ``truth`` holds ``"anomaly"``/``"normal"`` strings or booleans.

    Raises:
        ParameterError: lengths differ or values are not finite.
        UndefinedMetricError: truth contains only one class.
    """
    y = _truth_array(truth)
    v = np.asarray(values if isinstance(values, np.ndarray) else list(values), dtype=np.float64)
    if y.shape != v.shape:
        raise ParameterError(f"truth has {y.size} entries but values has {v.size}")
    if not np.isfinite(v).all():
        raise ParameterError("values must be finite")
    n_pos = int(y.sum())
    n_neg = y.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("AUC needs at least one anomaly and one normal")
    ranks = average_ranks(v)
    u = ranks[y].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


@dataclass(frozen=True)
class Confusion:
    tp: int
    fp: int
    tn: int
    fn: int

    @classmethod
    def of(cls, truth: np.ndarray, predicted: np.ndarray) -> "Confusion":
        truth = np.asarray(truth, dtype=bool)
        predicted = np.asarray(predicted, dtype=bool)
        return cls(
            tp=int((truth & predicted).sum()),
            fp=int((~truth & predicted).sum()),
            tn=int((~truth & ~predicted).sum()),
            fn=int((truth & ~predicted).sum()),
        )

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn


@dataclass(frozen=True)
class SeedRun:
    seed: int
    auc_scores: float
    auc_labels: float
    confusion: Confusion
    threshold: float | None


@dataclass(frozen=True)
class EvalReport:
    """Result of one (dataset, method, params) benchmark over a seed set.

    ``auc_scores``/``auc_labels`` are means over seeds; ``confusion`` is
    the first seed's run (every run is kept in ``runs``).
    """

    dataset: str
    method: str
    auc_scores: float
    auc_scores_std: float
    auc_labels: float
    auc_labels_std: float
    confusion: Confusion
    params: dict[str, Any]
    seeds: tuple[int, ...]
    runs: tuple[SeedRun, ...] = field(repr=False, default=())

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)


def _score_dataset(view: RecordView, schema: FeatureSchema | None, params: ForestParams, n_jobs: int | None) -> np.ndarray:
    """Fit on the label-free view and score the same rows."""
    if schema is None:
        schema = FeatureSchema.numeric(view.columns)
    if not schema.fitted:
        schema = schema.fit(view.rows)
    X = encode(view.rows, schema)
    return fit_forest(X, params, n_jobs=n_jobs).score(X)


def seed_scores(
    dataset: Dataset,
    forest: ForestParams | None = None,
    seeds: Sequence[int] = DEFAULT_SEEDS,
    schema: FeatureSchema | None = None,
    n_jobs: int | None = None,
) -> list[tuple[int, np.ndarray]]:
    """``(seed, scores)`` per seed, one fit each (``forest.seed`` is replaced)."""
    forest = forest or ForestParams()
    view = dataset.unlabeled()
    out = []
    for s in seeds:
        p = ForestParams(forest.num_trees, forest.subsample_size, forest.height_limit, int(s))
        out.append((int(s), _score_dataset(view, schema, p, n_jobs)))
    return out


def evaluate_scores(
    dataset_name: str,
    truth: np.ndarray,
    scores_by_seed: Sequence[tuple[int, np.ndarray]],
    labeler: LabelerConfig,
    forest: ForestParams | None = None,
) -> EvalReport:
    """Label precomputed per-seed scores and summarise both AUCs."""
    if not scores_by_seed:
        raise ParameterError("seed set is empty")
    forest = forest or ForestParams()
    runs = []
    for s, scores in scores_by_seed:
        model = fit_labeler(scores, labeler, seed=s)
        pred = label_mask(model, scores)
        threshold = getattr(model, "threshold", None)
        if threshold is None and hasattr(model, "boundary"):
            threshold = model.boundary()
        runs.append(
            SeedRun(
                seed=s,
                auc_scores=auc(truth, scores),
                auc_labels=auc(truth, pred.astype(np.float64)),
                confusion=Confusion.of(truth, pred),
                threshold=threshold,
            )
        )
    a_s = np.array([r.auc_scores for r in runs])
    a_l = np.array([r.auc_labels for r in runs])
    method = "iforest-kmeans" if labeler.kind == "kmeans" else "iforest-quantile"
    params = {"forest": {k: v for k, v in forest.to_dict().items() if k != "seed"}, "labeler": labeler.to_dict()}
    return EvalReport(
        dataset=dataset_name,
        method=method,
        auc_scores=float(a_s.mean()),
        auc_scores_std=float(a_s.std()),
        auc_labels=float(a_l.mean()),
        auc_labels_std=float(a_l.std()),
        confusion=runs[0].confusion,
        params=params,
        seeds=tuple(s for s, _ in scores_by_seed),
        runs=tuple(runs),
    )


def run_benchmark(
    dataset: Dataset,
    method: str = "iforest-kmeans",
    forest: ForestParams | None = None,
    labeler: LabelerConfig | None = None,
    seeds: Sequence[int] = DEFAULT_SEEDS,
    schema: FeatureSchema | None = None,
    n_jobs: int | None = None,
) -> EvalReport:
    """Fit (labels hidden), score, label and compute both AUCs for each seed."""
    if method not in METHODS:
        raise ParameterError(f"method must be one of {sorted(METHODS)}, got {method!r}")
    if not seeds:
        raise ParameterError("seed set is empty")
    truth = dataset.truth()
    base = labeler or LabelerConfig()
    cfg = LabelerConfig(METHODS[method], base.k, base.contamination, base.relative_error)
    scores = seed_scores(dataset, forest, seeds, schema, n_jobs)
    return evaluate_scores(dataset.name, truth, scores, cfg, forest)


def parse_grid(text: str) -> list[float]:
    """``"0.1:0.5:0.1"`` (inclusive start:stop:step) or ``"0,0.25,0.5"``."""
    text = text.strip()
    if ":" in text:
        parts = text.split(":")
        if len(parts) != 3:
            raise ParameterError(f"grid {text!r} must be start:stop:step")
        start, stop, step = (float(p) for p in parts)
        if step <= 0 or stop < start:
            raise ParameterError(f"grid {text!r} needs step > 0 and stop >= start")
        count = int(np.floor((stop - start) / step + 1e-9)) + 1
        return [round(start + i * step, 12) for i in range(count)]
    values = [float(p) for p in text.split(",") if p.strip()]
    if not values:
        raise ParameterError("grid is empty")
    return values


def sweep(
    dataset: Dataset,
    param: str,
    grid: Sequence[float],
    forest: ForestParams | None = None,
    labeler: LabelerConfig | None = None,
    seeds: Sequence[int] = DEFAULT_SEEDS,
    schema: FeatureSchema | None = None,
    n_jobs: int | None = None,
) -> list[tuple[float, EvalReport]]:
    """One quantile-labeler report per grid value.

    Forests are fitted once per seed and reused across the grid, so the
    score-AUC column is identical for every grid value.
    """
    if param not in SWEEP_PARAMS:
        raise ParameterError(f"sweep parameter must be one of {SWEEP_PARAMS}, got {param!r}")
    if len(grid) == 0:
        raise ParameterError("grid is empty")
    base = labeler or LabelerConfig(kind="quantile")
    configs = []
    for value in grid:
        kw = {"contamination": base.contamination, "relative_error": base.relative_error, param: float(value)}
        configs.append(LabelerConfig(kind="quantile", k=base.k, **kw))
    truth = dataset.truth()
    scores = seed_scores(dataset, forest, seeds, schema, n_jobs)
    return [(float(v), evaluate_scores(dataset.name, truth, scores, c, forest)) for v, c in zip(grid, configs)]


def write_sweep_table(results: Sequence[tuple[float, EvalReport]], path: str | os.PathLike, param: str) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([param, "auc_labels", "auc_labels_std", "auc_scores", "auc_scores_std"])
        for value, rep in results:
            w.writerow([repr(value), repr(rep.auc_labels), repr(rep.auc_labels_std), repr(rep.auc_scores), repr(rep.auc_scores_std)])


def manifest(command: str, reports: Any, extra: dict[str, Any] | None = None) -> dict[str, Any]:
    """Machine-readable record of a benchmark invocation."""
    from . import __version__

    doc = {
        "command": command,
        "created_at": datetime.now(timezone.utc).isoformat(timespec="seconds"),
        "isoguard_version": __version__,
        "numpy_version": np.__version__,
        "python_version": platform.python_version(),
        "results": reports,
    }
    if extra:
        doc.update(extra)
    return doc


def write_json(doc: Any, path: str | os.PathLike) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")
