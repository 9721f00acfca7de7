from __future__ import annotations

import math
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra import numpy as hnp

from isoguard.errors import InsufficientDataError, ParameterError, SchemaError, StateError
from isoguard.iforest import (
    LEAF,
    ForestParams,
    IsolationTree,
    anomaly_score,
    avg_path_length_c,
    build_tree,
    fit,
    harmonic,
    path_length,
    score_batch,
)


def c_oracle(n: int) -> float:
    """Average unsuccessful-search path length with the exact harmonic sum."""
    if n <= 1:
        return 0.0
    h = sum(Fraction(1, i) for i in range(1, n))
    return float(2 * h - Fraction(2 * (n - 1), n))


def tree(feature, threshold, left, right, size) -> IsolationTree:
    return IsolationTree(
        np.asarray(feature, np.int32),
        np.asarray(threshold, np.float64),
        np.asarray(left, np.int32),
        np.asarray(right, np.int32),
        np.asarray(size, np.int64),
    )


# -- c(n) --------------------------------------------------------------------

def test_c_small_values_exact():
    assert avg_path_length_c(0) == 0.0
    assert avg_path_length_c(1) == 0.0
    assert avg_path_length_c(2) == 1.0


def test_c_256_matches_exact_harmonic():
    # frozen from c_oracle(256); the ln approximation would give 10.24477
    assert avg_path_length_c(256) == pytest.approx(10.248689925634562, abs=1e-12)
    assert avg_path_length_c(256) == pytest.approx(c_oracle(256), abs=1e-12)


@pytest.mark.parametrize("n", [3, 4, 10, 100, 999, 1000, 1001])
def test_c_against_fraction_oracle(n):
    assert avg_path_length_c(n) == pytest.approx(c_oracle(n), rel=1e-12)


def test_harmonic_switches_to_log_form_above_1000():
    assert harmonic(1000) == pytest.approx(float(sum(Fraction(1, i) for i in range(1, 1001))), rel=1e-14)
    assert harmonic(1001) == math.log(1001) + 0.5772156649
    with pytest.raises(ParameterError):
        harmonic(-1)


@given(st.integers(2, 5000))
def test_c_is_increasing(n):
    assert avg_path_length_c(n + 1) > avg_path_length_c(n)


# -- params ------------------------------------------------------------------

def test_params_defaults_and_validation():
    p = ForestParams()
    assert (p.num_trees, p.subsample_size, p.height_limit) == (256, 256, None)
    assert p.resolved_height(256) == 8
    assert p.resolved_height(683) == 10
    assert ForestParams(height_limit=3).resolved_height(256) == 3
    for bad in ({"num_trees": 0}, {"subsample_size": 1}, {"height_limit": 0}, {"seed": -1}, {"seed": 2**64}):
        with pytest.raises(ParameterError):
            ForestParams(**bad)


# -- build_tree --------------------------------------------------------------

def test_single_vector_is_one_leaf():
    t = build_tree([[1.0, 2.0]], 8, np.random.default_rng(0))
    assert t.node_count == 1 and t.feature[0] == LEAF and t.size[0] == 1


def test_two_distinct_points_split_once():
    t = build_tree([[0.0], [1.0]], 8, np.random.default_rng(0))
    assert t.node_count == 3
    assert t.feature[0] == 0 and 0.0 < t.threshold[0] < 1.0
    assert list(t.size[1:]) == [1, 1]


def test_identical_vectors_are_one_leaf():
    t = build_tree([[3.0, 3.0]] * 7, 8, np.random.default_rng(0))
    assert t.node_count == 1 and t.size[0] == 7


def test_height_limit_caps_depth():
    X = np.random.default_rng(1).random((200, 3))
    t = build_tree(X, 2, np.random.default_rng(0))
    assert t.depths().max() <= 2
    assert t.sample_count == 200


def test_adjacent_doubles_still_split():
    a = 1.0
    b = np.nextafter(a, 2.0)
    t = build_tree([[a], [b]], 4, np.random.default_rng(0))
    assert t.node_count == 3
    assert path_length(t, [a]) == 1.0 and path_length(t, [b]) == 1.0


def test_build_tree_rejects_bad_input():
    with pytest.raises(SchemaError):
        build_tree([[1.0, 2.0], [1.0]], 4, np.random.default_rng(0))
    with pytest.raises(InsufficientDataError):
        build_tree(np.empty((0, 2)), 4, np.random.default_rng(0))


@given(
    hnp.arrays(np.float64, st.tuples(st.integers(1, 60), st.integers(1, 4)), elements=st.floats(-1e6, 1e6, allow_nan=False)),
    st.integers(1, 12),
    st.integers(0, 2**32),
)
def test_tree_structure_invariants(X, height, seed):
    t = build_tree(X, height, np.random.default_rng(seed))
    # mass conservation
    assert t.sample_count == X.shape[0]
    leaves = t.feature == LEAF
    assert (t.size[leaves] >= 1).all()
    # every sample lands in a leaf, and leaf sizes match the landing counts
    counts = np.zeros(t.node_count, np.int64)
    for x in X:
        node = 0
        while t.feature[node] != LEAF:
            node = t.left[node] if x[t.feature[node]] < t.threshold[node] else t.right[node]
        counts[node] += 1
    assert np.array_equal(counts[leaves], t.size[leaves])
    # split values strictly inside the partition's range
    for node in np.flatnonzero(~leaves):
        members = [x for x in X if _reaches(t, x, node)]
        col = np.array([m[t.feature[node]] for m in members])
        assert col.min() < t.threshold[node] <= col.max()
        assert (col < t.threshold[node]).any() and (col >= t.threshold[node]).any()
    assert t.depths().max() <= height


def _reaches(t: IsolationTree, x, target: int) -> bool:
    node = 0
    while True:
        if node == target:
            return True
        if t.feature[node] == LEAF:
            return False
        node = t.left[node] if x[t.feature[node]] < t.threshold[node] else t.right[node]


# -- path_length -------------------------------------------------------------

def test_path_length_examples():
    assert path_length(tree([LEAF], [0.0], [-1], [-1], [1]), [0.3]) == 0.0
    one_split = tree([0, LEAF, LEAF], [0.5, 0, 0], [1, -1, -1], [2, -1, -1], [0, 1, 1])
    assert path_length(one_split, [0.1]) == 1.0
    # depth-3 leaf of size 4: 3 + c(4) = 3 + 2*(11/6) - 1.5
    chain = tree(
        [0, LEAF, 0, LEAF, 0, LEAF, LEAF],
        [0.5, 0, 0.6, 0, 0.7, 0, 0],
        [1, -1, 3, -1, 5, -1, -1],
        [2, -1, 4, -1, 6, -1, -1],
        [0, 1, 0, 1, 0, 1, 4],
    )
    assert path_length(chain, [0.9]) == pytest.approx(3 + 2 * 11 / 6 - 1.5, abs=1e-12)
    assert path_length(chain, [0.9]) == pytest.approx(5.1667, abs=1e-4)


def test_path_length_feature_out_of_range():
    t = tree([2, LEAF, LEAF], [0.5, 0, 0], [1, -1, -1], [2, -1, -1], [0, 1, 1])
    with pytest.raises(SchemaError):
        path_length(t, [0.1, 0.2])


# -- fit / score -------------------------------------------------------------

def test_fit_structure():
    X = np.random.default_rng(0).random((1000, 3))
    m = fit(X, ForestParams(seed=1))
    assert len(m.trees) == 256 and m.n_train == 1000 and m.sample_size == 256
    assert all(t.sample_count == 256 for t in m.trees)


def test_subsample_clamped_to_data_size():
    X = np.random.default_rng(0).random((500, 2))
    m = fit(X, ForestParams(num_trees=8, subsample_size=1000))
    assert m.sample_size == 500
    assert all(t.sample_count == 500 for t in m.trees)
    assert m.height_limit == math.ceil(math.log2(500))


def test_fit_is_deterministic_and_thread_independent():
    X = np.random.default_rng(0).random((300, 4))
    a = fit(X, ForestParams(num_trees=16, seed=9), n_jobs=1)
    b = fit(X, ForestParams(num_trees=16, seed=9), n_jobs=4)
    c = fit(X, ForestParams(num_trees=16, seed=10), n_jobs=1)
    assert a.structure_equal(b)
    assert not a.structure_equal(c)
    assert np.array_equal(a.score(X), b.score(X))


def test_fit_errors():
    with pytest.raises(InsufficientDataError):
        fit([[1.0]])
    with pytest.raises(InsufficientDataError):
        fit(np.empty((0, 3)))
    with pytest.raises(SchemaError):
        fit([[1.0, np.nan], [2.0, 3.0]])
    with pytest.raises(StateError):
        anomaly_score(None, [1.0])
    with pytest.raises(StateError):
        score_batch(None, [[1.0]])


def test_score_formula_matches_mean_path_length():
    X = np.random.default_rng(2).random((200, 2))
    m = fit(X, ForestParams(num_trees=20, seed=3))
    e = m.mean_path_length(X[:10])
    oracle = np.array([np.mean([path_length(t, x) for t in m.trees]) for x in X[:10]])
    assert np.allclose(e, oracle, rtol=0, atol=1e-12)
    assert np.allclose(m.score(X[:10]), 2.0 ** (-oracle / avg_path_length_c(200)), rtol=0, atol=1e-15)


def test_score_reference_points():
    # exponent -1 gives 0.5, exponent 0 gives 1, and E(h)=5 at psi=256 gives ~0.713
    c = avg_path_length_c(256)
    assert 2.0 ** (-c / c) == 0.5
    assert 2.0 ** (-0.0 / c) == 1.0
    assert 2.0 ** (-5 / c) == pytest.approx(0.713, abs=5e-4)


def test_batch_equals_single_row():
    X = np.random.default_rng(5).normal(size=(64, 3))
    m = fit(X, ForestParams(num_trees=50, seed=5))
    batch = score_batch(m, X)
    single = np.array([anomaly_score(m, x) for x in X])
    assert np.array_equal(batch, single)
    assert score_batch(m, np.empty((0, 3))).shape == (0,)


def test_score_dimension_mismatch():
    m = fit(np.random.default_rng(0).random((20, 3)), ForestParams(num_trees=4))
    with pytest.raises(SchemaError):
        m.score(np.zeros((2, 4)))


def test_planted_outlier_gets_top_score():
    r = np.random.default_rng(7)
    X = np.concatenate([r.random(100), [10.0]]).reshape(-1, 1)
    s = fit(X, ForestParams(seed=7)).score(X)
    assert int(np.argmax(s)) == 100


@given(
    hnp.arrays(np.float64, st.tuples(st.integers(2, 80), st.integers(1, 3)), elements=st.floats(-1e3, 1e3, allow_nan=False)),
    st.integers(0, 1000),
)
def test_scores_in_unit_interval_and_monotone_in_path_length(X, seed):
    m = fit(X, ForestParams(num_trees=8, seed=seed))
    e = m.mean_path_length(X)
    s = m.score(X)
    assert ((s > 0) & (s <= 1)).all()
    order = np.argsort(e)
    # shorter mean path means higher score
    assert (np.diff(s[order]) <= 0).all()
