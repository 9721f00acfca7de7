"""Isolation forest: tree construction, path lengths and anomaly scores.

Trees are stored as flat node arrays (no Python objects per node). Building
and traversal run in small numba kernels; all randomness is drawn in Python
from per-tree generators spawned off the master seed, so a forest is a pure
function of ``(data order, params)`` no matter how many worker threads build
it.
"""
from __future__ import annotations

import logging
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Any, Sequence

import numpy as np
from numba import njit

from .errors import (
    InsufficientDataError,
    ParameterError,
    SchemaError,
    StateError,
)

logger = logging.getLogger(__name__)

EULER_GAMMA = 0.5772156649
HARMONIC_EXACT_LIMIT = 1000

# _HARMONIC[i] = 1 + 1/2 + ... + 1/i, summed left to right
_HARMONIC = np.concatenate(([0.0], np.cumsum(1.0 / np.arange(1, HARMONIC_EXACT_LIMIT + 1))))

LEAF = -1


def harmonic(i: int) -> float:
    """Harmonic number H(i); exact partial sum up to 1000, ln(i) + gamma above."""
    if i < 0:
        raise ParameterError(f"harmonic number undefined for i={i}")
    if i <= HARMONIC_EXACT_LIMIT:
        return float(_HARMONIC[i])
    return math.log(i) + EULER_GAMMA


def avg_path_length_c(n: int) -> float:
    """Average path length of an unsuccessful BST search over ``n`` keys.

    ``c(n) = 2 H(n-1) - 2 (n-1) / n`` with ``c(0) = c(1) = 0``.
    """
    if n <= 1:
        return 0.0
    return 2.0 * harmonic(n - 1) - 2.0 * (n - 1) / n


def default_threads() -> int:
    env = os.environ.get("ISOGUARD_THREADS")
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            logger.warning("ignoring non-integer ISOGUARD_THREADS=%r", env)
    return os.cpu_count() or 1


@dataclass(frozen=True)
class ForestParams:
    """Forest hyperparameters.

    ``height_limit=None`` means ``ceil(log2(psi))`` where ``psi`` is the
    per-tree sample size actually used, ``min(subsample_size, n)``.
    """

    num_trees: int = 256
    subsample_size: int = 256
    height_limit: int | None = None
    seed: int = 0

    def __post_init__(self) -> None:
        if self.num_trees < 1:
            raise ParameterError(f"num_trees must be >= 1, got {self.num_trees}")
        if self.subsample_size < 2:
            raise ParameterError(f"subsample_size must be >= 2, got {self.subsample_size}")
        if self.height_limit is not None and self.height_limit < 1:
            raise ParameterError(f"height_limit must be >= 1, got {self.height_limit}")
        if not 0 <= self.seed < 2**64:
            raise ParameterError(f"seed must fit in an unsigned 64-bit integer, got {self.seed}")

    def resolved_height(self, sample_size: int) -> int:
        if self.height_limit is not None:
            return self.height_limit
        return max(1, math.ceil(math.log2(max(sample_size, 2))))

    def to_dict(self) -> dict[str, Any]:
        return {
            "num_trees": self.num_trees,
            "subsample_size": self.subsample_size,
            "height_limit": self.height_limit,
            "seed": self.seed,
        }


@dataclass(frozen=True, eq=False)
class IsolationTree:
    """One isolation tree as parallel node arrays.

    Node 0 is the root. ``feature[i] == -1`` marks an external node; for those
    ``left``/``right`` are -1 and ``size`` holds the number of training
    instances that reached it. Internal nodes have ``size == 0``.
    """

    feature: np.ndarray  # int32
    threshold: np.ndarray  # float64
    left: np.ndarray  # int32
    right: np.ndarray  # int32
    size: np.ndarray  # int64

    def __post_init__(self) -> None:
        for arr in (self.feature, self.threshold, self.left, self.right, self.size):
            arr.setflags(write=False)

    @property
    def node_count(self) -> int:
        return int(self.feature.shape[0])

    @property
    def sample_count(self) -> int:
        """Sum of external-node sizes; equals the tree's subsample size."""
        return int(self.size[self.feature == LEAF].sum())

    def is_leaf(self, node: int) -> bool:
        return bool(self.feature[node] == LEAF)

    def depths(self) -> np.ndarray:
        depth = np.zeros(self.node_count, dtype=np.int64)
        for i in range(self.node_count):
            if self.feature[i] != LEAF:
                depth[self.left[i]] = depth[i] + 1
                depth[self.right[i]] = depth[i] + 1
        return depth

    def leaf_values(self) -> np.ndarray:
        """Path length contributed by each node if it is where an instance lands."""
        depth = self.depths()
        vals = np.zeros(self.node_count, dtype=np.float64)
        for i in np.flatnonzero(self.feature == LEAF):
            vals[i] = depth[i] + avg_path_length_c(int(self.size[i]))
        return vals

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, IsolationTree):
            return NotImplemented
        return all(
            np.array_equal(a, b)
            for a, b in (
                (self.feature, other.feature),
                (self.threshold, other.threshold),
                (self.left, other.left),
                (self.right, other.right),
                (self.size, other.size),
            )
        )

    __hash__ = None  # type: ignore[assignment]


@njit(cache=True, nogil=True)
def _grow(X, height_limit, u):  # pragma: no cover - compiled
    m, d = X.shape
    cap = 2 * m - 1
    feature = np.full(cap, -1, np.int32)
    threshold = np.zeros(cap, np.float64)
    left = np.full(cap, -1, np.int32)
    right = np.full(cap, -1, np.int32)
    size = np.zeros(cap, np.int64)

    idx = np.arange(m)
    st_node = np.empty(cap, np.int64)
    st_start = np.empty(cap, np.int64)
    st_end = np.empty(cap, np.int64)
    st_depth = np.empty(cap, np.int64)
    lo = np.empty(d, np.float64)
    hi = np.empty(d, np.float64)
    cand = np.empty(d, np.int64)

    sp = 0
    st_node[0] = 0
    st_start[0] = 0
    st_end[0] = m
    st_depth[0] = 0
    sp = 1
    n_nodes = 1
    ui = 0
    while sp > 0:
        sp -= 1
        node = st_node[sp]
        s = st_start[sp]
        e = st_end[sp]
        depth = st_depth[sp]
        cnt = e - s
        if cnt <= 1 or depth >= height_limit:
            size[node] = cnt
            continue
        for j in range(d):
            lo[j] = np.inf
            hi[j] = -np.inf
        for r in range(s, e):
            row = idx[r]
            for j in range(d):
                v = X[row, j]
                if v < lo[j]:
                    lo[j] = v
                if v > hi[j]:
                    hi[j] = v
        nc = 0
        for j in range(d):
            if lo[j] < hi[j]:
                cand[nc] = j
                nc += 1
        if nc == 0:
            size[node] = cnt
            continue
        k = int(u[ui] * nc)
        if k >= nc:
            k = nc - 1
        f = cand[k]
        a = lo[f]
        b = hi[f]
        v = a + u[ui + 1] * (b - a)
        ui += 2
        if not (a < v and v < b):
            v = a + 0.5 * (b - a)
            if not (a < v and v < b):
                # a and b are adjacent doubles: nothing lies strictly between
                v = b
        i = s
        j2 = e - 1
        while i <= j2:
            if X[idx[i], f] < v:
                i += 1
            else:
                tmp = idx[i]
                idx[i] = idx[j2]
                idx[j2] = tmp
                j2 -= 1
        lc = n_nodes
        rc = n_nodes + 1
        n_nodes += 2
        feature[node] = f
        threshold[node] = v
        left[node] = lc
        right[node] = rc
        st_node[sp] = rc
        st_start[sp] = i
        st_end[sp] = e
        st_depth[sp] = depth + 1
        sp += 1
        st_node[sp] = lc
        st_start[sp] = s
        st_end[sp] = i
        st_depth[sp] = depth + 1
        sp += 1
    return (
        feature[:n_nodes].copy(),
        threshold[:n_nodes].copy(),
        left[:n_nodes].copy(),
        right[:n_nodes].copy(),
        size[:n_nodes].copy(),
    )


@njit(cache=True, nogil=True)
def _score_kernel(X, feature, threshold, left, leaf_value, roots, c_norm, out_mean, out_score):  # pragma: no cover - compiled
    # tree-outer keeps one tree hot in cache; per-row accumulation order is
    # still tree 0, 1, 2, ... so results do not depend on the batch size
    n = X.shape[0]
    n_trees = roots.shape[0]
    acc = np.zeros(n, np.float64)
    for t in range(n_trees):
        root = roots[t]
        for i in range(n):
            node = root
            while feature[node] >= 0:
                # right child is always left + 1
                node = left[node] + (X[i, feature[node]] >= threshold[node])
            acc[i] += leaf_value[node]
    for i in range(n):
        mean = acc[i] / n_trees
        out_mean[i] = mean
        out_score[i] = 2.0 ** (-mean / c_norm)


def _as_matrix(data: Any) -> np.ndarray:
    X = np.asarray(data, dtype=np.float64)
    if X.ndim == 1:
        X = X.reshape(-1, 1) if X.size else X.reshape(0, 0)
    if X.ndim != 2:
        raise SchemaError(f"expected a 2-D array of feature vectors, got shape {X.shape}")
    return np.ascontiguousarray(X)


def build_tree(sample: Sequence[Sequence[float]] | np.ndarray, height_limit: int, rng: np.random.Generator) -> IsolationTree:
    """Grow one isolation tree over ``sample``.

    Splitting stops at singletons, at partitions whose rows are identical on
    every feature, or at ``height_limit``. Two uniforms are drawn from ``rng``
    per internal node (feature pick, split position); features that are
    constant within a partition are never picked.
    """
    try:
        X = _as_matrix(sample)
    except ValueError as exc:  # ragged input
        raise SchemaError(f"sample vectors differ in dimension: {exc}") from exc
    if X.shape[0] == 0:
        raise InsufficientDataError("cannot build a tree from an empty sample")
    if height_limit < 1:
        raise ParameterError(f"height_limit must be >= 1, got {height_limit}")
    if not np.isfinite(X).all():
        raise SchemaError("feature vectors must be finite")
    u = rng.random(2 * X.shape[0])
    return IsolationTree(*_grow(X, int(height_limit), u))


def path_length(tree: IsolationTree, x: Sequence[float]) -> float:
    """Edges from root to the external node ``x`` lands in, plus c(size) there."""
    x = np.asarray(x, dtype=np.float64)
    node = 0
    depth = 0
    while tree.feature[node] != LEAF:
        f = int(tree.feature[node])
        if f >= x.shape[0]:
            raise SchemaError(f"tree splits on feature {f} but vector has {x.shape[0]} values")
        node = int(tree.left[node] if x[f] < tree.threshold[node] else tree.right[node])
        depth += 1
    return depth + avg_path_length_c(int(tree.size[node]))


@dataclass(eq=False)
class IsolationForestModel:
    """A fitted forest.

    ``n_train`` is fixed at fit time and never recomputed. Scores are
    normalised by ``c(sample_size)``, the per-tree subsample size the trees
    were actually grown on.
    """

    trees: list[IsolationTree]
    params: ForestParams
    n_train: int
    n_features: int
    sample_size: int
    height_limit: int
    feature_schema: Any = None
    _packed: tuple | None = field(default=None, init=False, repr=False)

    def __post_init__(self) -> None:
        if len(self.trees) != self.params.num_trees:
            raise StateError(f"expected {self.params.num_trees} trees, got {len(self.trees)}")

    @property
    def c_norm(self) -> float:
        return avg_path_length_c(self.sample_size)

    def _pack(self) -> tuple:
        if self._packed is None:
            feats, thr, lefts, leafv, roots = [], [], [], [], []
            offset = 0
            for tree in self.trees:
                roots.append(offset)
                feats.append(tree.feature)
                thr.append(tree.threshold)
                lefts.append(np.where(tree.left >= 0, tree.left + offset, -1))
                leafv.append(tree.leaf_values())
                offset += tree.node_count
            self._packed = (
                np.concatenate(feats).astype(np.int32),
                np.concatenate(thr).astype(np.float64),
                np.concatenate(lefts).astype(np.int32),
                np.concatenate(leafv).astype(np.float64),
                np.asarray(roots, dtype=np.int64),
            )
        return self._packed

    def _run(self, X: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        X = _as_matrix(X)
        if X.shape[0] == 0:
            return np.empty(0), np.empty(0)
        if X.shape[1] != self.n_features:
            raise SchemaError(f"model expects {self.n_features} features, got {X.shape[1]}")
        mean = np.empty(X.shape[0])
        score = np.empty(X.shape[0])
        _score_kernel(X, *self._pack(), self.c_norm, mean, score)
        return mean, score

    def mean_path_length(self, X: Any) -> np.ndarray:
        """E(h(x)) for each row of ``X``."""
        return self._run(X)[0]

    def score(self, X: Any) -> np.ndarray:
        """Anomaly score in (0, 1] for each row of ``X``."""
        return self._run(X)[1]

    def structure_equal(self, other: "IsolationForestModel") -> bool:
        return (
            self.params == other.params
            and self.n_train == other.n_train
            and self.n_features == other.n_features
            and self.sample_size == other.sample_size
            and self.height_limit == other.height_limit
            and len(self.trees) == len(other.trees)
            and all(a == b for a, b in zip(self.trees, other.trees))
        )


def _tree_task(X: np.ndarray, m: int, height: int, seed_seq: np.random.SeedSequence) -> IsolationTree:
    rng = np.random.Generator(np.random.PCG64(seed_seq))
    n = X.shape[0]
    if m < n:
        rows = rng.choice(n, size=m, replace=False)
        sample = X[rows]
    else:
        sample = X
    u = rng.random(2 * m)
    return IsolationTree(*_grow(sample, height, u))


def fit(data: Any, params: ForestParams | None = None, feature_schema: Any = None, n_jobs: int | None = None) -> IsolationForestModel:
    """Fit an isolation forest on a matrix of feature vectors.

    Each tree gets an independent subsample of ``min(subsample_size, n)``
    rows drawn without replacement from its own random stream. Labels are
    never accepted here.
    """
    params = params or ForestParams()
    try:
        X = _as_matrix(data)
    except ValueError as exc:
        raise SchemaError(f"rows differ in dimension: {exc}") from exc
    n = X.shape[0]
    if n < 2:
        raise InsufficientDataError(f"need at least 2 rows to fit, got {n}")
    if X.shape[1] == 0:
        raise SchemaError("feature vectors are empty")
    if not np.isfinite(X).all():
        bad = int(np.flatnonzero(~np.isfinite(X).all(axis=1))[0])
        raise SchemaError(f"row {bad} has a non-finite feature value")

    m = min(params.subsample_size, n)
    height = params.resolved_height(m)
    seqs = np.random.SeedSequence(params.seed).spawn(params.num_trees)
    workers = max(1, min(n_jobs or default_threads(), params.num_trees))
    logger.debug("fitting %d trees on %d rows (psi=%d, height=%d, workers=%d)", params.num_trees, n, m, height, workers)
    if workers == 1:
        trees = [_tree_task(X, m, height, s) for s in seqs]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            trees = list(pool.map(lambda s: _tree_task(X, m, height, s), seqs))
    return IsolationForestModel(
        trees=trees,
        params=params,
        n_train=n,
        n_features=X.shape[1],
        sample_size=m,
        height_limit=height,
        feature_schema=feature_schema,
    )


def anomaly_score(model: IsolationForestModel | None, x: Sequence[float]) -> float:
    """Score a single feature vector: ``2 ** (-E(h(x)) / c(psi))``."""
    if model is None or not getattr(model, "trees", None):
        raise StateError("model is not fitted")
    return float(model.score(np.asarray(x, dtype=np.float64).reshape(1, -1))[0])


def score_batch(model: IsolationForestModel | None, data: Any) -> np.ndarray:
    """Scores for every row of ``data``, in row order."""
    if model is None or not getattr(model, "trees", None):
        raise StateError("model is not fitted")
    return model.score(data)
