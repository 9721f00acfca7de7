"""Turn anomaly scores into normal/anomaly labels.

Two labelers live here:

* :func:`kmeans_fit` / :func:`kmeans_label` cluster the 1-D scores and call
  the biggest cluster normal. No contamination ratio is involved.
* :func:`quantile_fit` / :func:`quantile_label` cut at the
  ``(1 - contamination)`` quantile, computed through a mergeable
  rank-error sketch (:class:`QuantileSketch`).
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
from numba import njit

from .errors import DegenerateInputError, ParameterError, StateError

logger = logging.getLogger(__name__)

NORMAL = "normal"
ANOMALY = "anomaly"

DEFAULT_K = 2
DEFAULT_MAX_ITER = 100
DEFAULT_TOL = 1e-9
DEFAULT_N_INIT = 4


def _scores_1d(scores: Iterable[float]) -> np.ndarray:
    arr = np.asarray(list(scores) if not isinstance(scores, np.ndarray) else scores, dtype=np.float64)
    return arr.reshape(-1)


# ---------------------------------------------------------------------------
# K-Means
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class KMeansLabelerModel:
    """Fitted 1-D K-Means over anomaly scores.

    ``centroids`` are sorted ascending; ``normal_cluster`` indexes the
    cluster that held the most training scores (ties go to the lower
    centroid).
    """

    k: int
    centroids: tuple[float, ...]
    normal_cluster: int
    cluster_sizes: tuple[int, ...]
    max_iter: int = DEFAULT_MAX_ITER
    tol: float = DEFAULT_TOL
    seed: int = 0
    n_iter: int = 0
    kind: str = field(default="kmeans", init=False)

    def assign(self, scores: Iterable[float]) -> np.ndarray:
        return _nearest(_scores_1d(scores), np.asarray(self.centroids))

    def boundary(self) -> float | None:
        """Score cut equivalent to the labelling when k == 2 (else None)."""
        if self.k != 2:
            return None
        return 0.5 * (self.centroids[0] + self.centroids[1])


def _nearest(x: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    # argmin returns the first minimum, so distance ties go to the lower index
    return np.argmin(np.abs(x[:, None] - centroids[None, :]), axis=1)


def _plusplus_seed(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    centroids = [x[rng.integers(x.shape[0])]]
    for _ in range(1, k):
        d2 = np.min((x[:, None] - np.asarray(centroids)[None, :]) ** 2, axis=1)
        total = d2.sum()
        if total <= 0.0:
            break
        centroids.append(x[rng.choice(x.shape[0], p=d2 / total)])
    return np.asarray(centroids, dtype=np.float64)


def _lloyd(x: np.ndarray, centroids: np.ndarray, max_iter: int, tol: float) -> tuple[np.ndarray, int]:
    k = centroids.shape[0]
    n_iter = 0
    for n_iter in range(1, max_iter + 1):
        assign = _nearest(x, centroids)
        new = centroids.copy()
        for j in range(k):
            members = x[assign == j]
            if members.size:
                new[j] = members.mean()
            else:
                # empty cluster: move it onto the point worst served by its centroid
                far = np.argmax(np.abs(x - centroids[assign]))
                new[j] = x[far]
        shift = np.max(np.abs(new - centroids))
        centroids = new
        if shift <= tol:
            break
    return centroids, n_iter


def _best_split(x: np.ndarray) -> np.ndarray:
    """Centroids of the lowest-WCSS two-way split of sorted ``x``.

    In one dimension an optimal 2-means partition is contiguous in sorted
    order, so scanning every cut with prefix sums finds the global minimum.
    """
    s = np.sort(x)
    n = s.size
    c1 = np.cumsum(s)
    c2 = np.cumsum(s * s)
    i = np.arange(1, n)  # left part is s[:i]
    # only cut between distinct values
    i = i[s[i - 1] < s[i]]
    left = c2[i - 1] - c1[i - 1] ** 2 / i
    rs, rs2, rn = c1[-1] - c1[i - 1], c2[-1] - c2[i - 1], n - i
    cost = left + (rs2 - rs**2 / rn)
    j = i[int(np.argmin(cost))]
    return np.array([s[:j].mean(), s[j:].mean()])


def _wcss(x: np.ndarray, centroids: np.ndarray) -> float:
    assign = _nearest(x, centroids)
    return float(np.sum((x - centroids[assign]) ** 2))


def kmeans_fit(
    scores: Iterable[float],
    k: int = DEFAULT_K,
    seed: int = 0,
    max_iter: int = DEFAULT_MAX_ITER,
    tol: float = DEFAULT_TOL,
    n_init: int = DEFAULT_N_INIT,
) -> KMeansLabelerModel:
    """Cluster 1-D scores with k-means++ seeding and Lloyd iterations.

    ``n_init`` seedings are tried (each from its own stream of ``seed``) and
    the lowest within-cluster sum of squares wins. For ``k == 2`` the exact
    best contiguous split is added as one more starting point, which makes
    the result a global WCSS minimum.

    Raises:
        DegenerateInputError: fewer distinct scores than ``k`` (with k > 1).
            Label everything normal in that case.
    """
    x = _scores_1d(scores)
    if x.size == 0:
        raise ParameterError("cannot cluster an empty score list")
    if k < 1:
        raise ParameterError(f"k must be >= 1, got {k}")
    if max_iter < 1 or n_init < 1:
        raise ParameterError("max_iter and n_init must be >= 1")
    if not np.isfinite(x).all():
        raise ParameterError("scores must be finite")
    distinct = np.unique(x).size
    if k > 1 and distinct < k:
        raise DegenerateInputError(
            f"{distinct} distinct score value(s) cannot form {k} clusters; label all points normal"
        )

    best = None
    for stream in np.random.SeedSequence(seed).spawn(n_init):
        rng = np.random.Generator(np.random.PCG64(stream))
        init = _plusplus_seed(x, k, rng)
        centroids, n_iter = _lloyd(x, init, max_iter, tol)
        centroids = np.sort(centroids)
        cost = _wcss(x, centroids)
        if best is None or cost < best[0]:
            best = (cost, centroids, n_iter)
    if k == 2:
        # random seedings can stall in a local optimum; the exact split cannot
        centroids, n_iter = _lloyd(x, _best_split(x), max_iter, tol)
        centroids = np.sort(centroids)
        cost = _wcss(x, centroids)
        if cost < best[0]:
            best = (cost, centroids, n_iter)
    _, centroids, n_iter = best

    sizes = np.bincount(_nearest(x, centroids), minlength=k)
    # argmax takes the first maximum: equal sizes resolve to the lower centroid
    normal = int(np.argmax(sizes))
    return KMeansLabelerModel(
        k=k,
        centroids=tuple(float(c) for c in centroids),
        normal_cluster=normal,
        cluster_sizes=tuple(int(s) for s in sizes),
        max_iter=max_iter,
        tol=tol,
        seed=seed,
        n_iter=n_iter,
    )


def kmeans_label(model: KMeansLabelerModel, scores: Iterable[float]) -> list[str]:
    """Nearest-centroid assignment; anything outside the normal cluster is an anomaly."""
    if model is None or not model.centroids:
        raise StateError("K-Means labeler is not fitted")
    assign = model.assign(scores)
    return [NORMAL if a == model.normal_cluster else ANOMALY for a in assign]


# ---------------------------------------------------------------------------
# Quantile sketch
# ---------------------------------------------------------------------------

@njit(cache=True)
def _compress_keep(rmin, rmax, band):  # pragma: no cover - compiled
    n = rmin.shape[0]
    keep = np.zeros(n, np.bool_)
    keep[0] = True
    keep[n - 1] = True
    last = 0
    for i in range(1, n - 1):
        # tuple i can go if its neighbours still bracket every rank tightly enough
        if rmax[i + 1] - rmin[last] > band:
            keep[i] = True
            last = i
    return keep


class QuantileSketch:
    """Deterministic rank-error quantile summary with merge support.

    Keeps tuples ``(value, rmin, rmax)`` where ``rmin``/``rmax`` bound the
    rank of ``value`` among everything inserted so far. While consecutive
    tuples satisfy ``rmax[i+1] - rmin[i] <= 2 * eps * n`` any rank query can
    be answered within ``eps * n``. Inserts are buffered, sorted and folded
    in as an exact summary; merging two sketches uses the usual combine rule
    for such summaries, so the bound holds whatever the merge order.
    """

    def __init__(self, relative_error: float = 0.0, buffer_size: int = 65536):
        if not 0.0 <= relative_error <= 1.0:
            raise ParameterError(f"relative_error must be in [0, 1], got {relative_error}")
        self.relative_error = float(relative_error)
        self.buffer_size = max(1, int(buffer_size))
        self._values = np.empty(0, np.float64)
        self._rmin = np.empty(0, np.int64)
        self._rmax = np.empty(0, np.int64)
        self._n = 0
        self._buffer: list[np.ndarray] = []
        self._buffered = 0

    def __len__(self) -> int:
        return self._n + self._buffered

    @property
    def summary_size(self) -> int:
        self._flush()
        return int(self._values.shape[0])

    def update(self, values: Iterable[float]) -> "QuantileSketch":
        arr = _scores_1d(values)
        if np.isnan(arr).any():
            raise ParameterError("cannot insert NaN into a quantile sketch")
        for start in range(0, arr.shape[0], self.buffer_size):
            piece = arr[start:start + self.buffer_size]
            self._buffer.append(piece)
            self._buffered += piece.shape[0]
            if self._buffered >= self.buffer_size:
                self._flush()
        return self

    def _flush(self) -> None:
        if not self._buffered:
            return
        chunk = np.sort(np.concatenate(self._buffer))
        self._buffer = []
        self._buffered = 0
        ranks = np.arange(1, chunk.shape[0] + 1, dtype=np.int64)
        self._combine(chunk, ranks, ranks.copy(), chunk.shape[0])

    def _combine(self, b_v: np.ndarray, b_lo: np.ndarray, b_hi: np.ndarray, n_b: int) -> None:
        a_v, a_lo, a_hi, n_a = self._values, self._rmin, self._rmax, self._n
        na, nb = a_v.shape[0], b_v.shape[0]
        # ties are ordered A before B
        ja = np.searchsorted(b_v, a_v, side="left")  # B tuples strictly below each A tuple
        ib = np.searchsorted(a_v, b_v, side="right")  # A tuples at or below each B tuple
        b_lo_pad = np.concatenate(([0], b_lo))
        b_hi_pad = np.concatenate((b_hi - 1, [n_b]))
        a_lo_pad = np.concatenate(([0], a_lo))
        a_hi_pad = np.concatenate((a_hi - 1, [n_a]))
        lo_a = a_lo + b_lo_pad[ja]
        hi_a = a_hi + b_hi_pad[ja]
        lo_b = b_lo + a_lo_pad[ib]
        hi_b = b_hi + a_hi_pad[ib]
        pos_a = np.arange(na) + ja
        pos_b = np.arange(nb) + ib
        total = na + nb
        values = np.empty(total, np.float64)
        rmin = np.empty(total, np.int64)
        rmax = np.empty(total, np.int64)
        values[pos_a], rmin[pos_a], rmax[pos_a] = a_v, lo_a, hi_a
        values[pos_b], rmin[pos_b], rmax[pos_b] = b_v, lo_b, hi_b
        self._values, self._rmin, self._rmax = values, rmin, rmax
        self._n = n_a + n_b
        self._compress()

    def _compress(self) -> None:
        band = 2.0 * self.relative_error * self._n
        if band < 1.0 or self._values.shape[0] <= 2:
            return
        keep = _compress_keep(self._rmin, self._rmax, band)
        self._values = self._values[keep]
        self._rmin = self._rmin[keep]
        self._rmax = self._rmax[keep]

    def merge(self, other: "QuantileSketch") -> "QuantileSketch":
        """Fold ``other`` into this sketch (``other`` keeps its contents)."""
        self._flush()
        other._flush()
        self._combine(other._values.copy(), other._rmin.copy(), other._rmax.copy(), other._n)
        return self

    def query(self, q: float) -> float:
        """Value whose rank is within ``eps * n`` of ``ceil(q * n)``."""
        if not 0.0 <= q <= 1.0:
            raise ParameterError(f"quantile must be in [0, 1], got {q}")
        self._flush()
        if self._n == 0:
            raise ParameterError("cannot take a quantile of an empty score list")
        n = self._n
        target = min(max(math.ceil(q * n), 1), n)
        slack = self.relative_error * n
        ok = (self._rmin >= target - slack) & (self._rmax <= target + slack)
        hits = np.flatnonzero(ok)
        if hits.size == 0:
            raise AssertionError("quantile sketch invariant violated")
        return float(self._values[hits[0]])


def approx_quantile(scores: Iterable[float], q: float, relative_error: float = 0.0) -> float:
    """``q``-quantile of ``scores`` with rank error at most ``relative_error * n``.

    With ``relative_error == 0`` this is exactly the element of 1-based rank
    ``ceil(q * n)`` in ascending order.
    """
    sketch = QuantileSketch(relative_error)
    sketch.update(_scores_1d(scores).tolist())
    return sketch.query(q)


@dataclass(frozen=True)
class QuantileLabelerModel:
    """Threshold labeler: anomaly iff score >= threshold."""

    contamination: float
    relative_error: float
    threshold: float
    kind: str = field(default="quantile", init=False)


def _check_contamination(contamination: float) -> None:
    if not 0.0 < contamination < 1.0:
        raise ParameterError(f"contamination must be in (0, 1), got {contamination}")


def quantile_fit(scores: Iterable[float], contamination: float = 0.1, relative_error: float = 0.0) -> QuantileLabelerModel:
    _check_contamination(contamination)
    if not 0.0 <= relative_error <= 1.0:
        raise ParameterError(f"relative_error must be in [0, 1], got {relative_error}")
    threshold = approx_quantile(scores, 1.0 - contamination, relative_error)
    return QuantileLabelerModel(contamination=contamination, relative_error=relative_error, threshold=float(threshold))


def quantile_label(model: QuantileLabelerModel, scores: Iterable[float]) -> list[str]:
    if model is None:
        raise StateError("quantile labeler is not fitted")
    x = _scores_1d(scores)
    return [ANOMALY if s >= model.threshold else NORMAL for s in x]


def label(model: KMeansLabelerModel | QuantileLabelerModel, scores: Iterable[float]) -> list[str]:
    """Dispatch to the labeler matching ``model``'s type."""
    if isinstance(model, KMeansLabelerModel):
        return kmeans_label(model, scores)
    if isinstance(model, QuantileLabelerModel):
        return quantile_label(model, scores)
    raise StateError(f"unknown labeler model {type(model).__name__}")


def label_mask(model: KMeansLabelerModel | QuantileLabelerModel, scores: Sequence[float] | np.ndarray) -> np.ndarray:
    """Boolean anomaly mask, same decision rule as :func:`label`."""
    x = _scores_1d(scores)
    if isinstance(model, KMeansLabelerModel):
        return model.assign(x) != model.normal_cluster
    if isinstance(model, QuantileLabelerModel):
        return x >= model.threshold
    raise StateError(f"unknown labeler model {type(model).__name__}")
