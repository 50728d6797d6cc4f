import math

import numpy as np
import pandas as pd
import pytest
from hypothesis import given, settings, strategies as st

from edgecast.group_cache import (
    HistoryIndex,
    baseline_popularity,
    baseline_topk,
    cosine_similarity,
    decide_cache,
    emotion_proportions,
    group_interest,
    group_similarities,
    group_similarity,
    penalized_similarity,
    similarity_matrix,
    similarity_weights,
)


def naive_pre(P, a_si, delta):
    N, C = P.shape
    out = np.zeros(C)
    for m in range(C):
        po = sum(P[n, m] >= delta for n in range(N)) / N
        ne = 1 - po
        out[m] = sum(a_si[n] * P[n, m] * (po if P[n, m] >= delta else ne) for n in range(N)) / N
    return out


def test_disjoint_histories():
    idx = HistoryIndex.from_sets({1: {10}, 2: {20}, 3: {30}})
    assert penalized_similarity(idx, 1, 2) == 0.0
    np.testing.assert_array_equal(group_similarities(idx), 0.0)


def test_shared_single_video():
    # both users watched f, so |I(f)| = 2
    idx = HistoryIndex.from_sets({1: {7}, 2: {7}})
    assert penalized_similarity(idx, 1, 2) == pytest.approx(1 / math.log(3))


def test_three_identical_users():
    idx = HistoryIndex.from_sets({1: {5}, 2: {5}, 3: {5}})
    for u in (1, 2, 3):
        assert group_similarity(idx, u) == pytest.approx(2 / math.log(4))


def test_empty_history_user_changes_nothing():
    a = HistoryIndex.from_sets({1: {5, 6}, 2: {5}, 3: {6, 9}})
    b = HistoryIndex.from_sets({1: {5, 6}, 2: {5}, 3: {6, 9}, 4: set()})
    np.testing.assert_allclose(group_similarities(b)[:3], group_similarities(a))
    assert group_similarities(b)[3] == 0.0


def test_group_similarity_needs_two_users():
    with pytest.raises(ValueError):
        group_similarity(HistoryIndex.from_sets({1: {5}}), 1)


def test_matrix_matches_pairwise_and_cosine():
    sets = {1: {1, 2, 3}, 2: {2, 3, 4, 5}, 3: {1, 5}, 4: {6}}
    idx = HistoryIndex.from_sets(sets)
    S = similarity_matrix(idx)
    C = similarity_matrix(idx, penalized=False)
    for i, u in enumerate(idx.users):
        for j, v in enumerate(idx.users):
            if i != j:
                assert S[i, j] == pytest.approx(penalized_similarity(idx, u, v))
                assert C[i, j] == pytest.approx(cosine_similarity(idx, u, v))
    np.testing.assert_allclose(S, S.T)


def test_penalty_factor_one_reduces_to_cosine(monkeypatch):
    import edgecast.group_cache as gc

    sets = {1: {1, 2, 3}, 2: {2, 3, 4}, 3: {3}}
    idx = HistoryIndex.from_sets(sets)
    # |I(m)| = e - 1 makes 1/ln(1 + |I(m)|) == 1
    monkeypatch.setattr(gc, "_penalty", lambda deg: 1.0 / np.log1p(np.full(len(deg), math.e - 1)))
    np.testing.assert_allclose(gc.similarity_matrix(idx), gc.similarity_matrix(idx, penalized=False))


def test_similarity_weights():
    np.testing.assert_allclose(similarity_weights([0, 5, 10]), [0, 0.5, 1])
    np.testing.assert_array_equal(similarity_weights([3, 3, 3]), 1.0)
    s = np.array([4.0, 1.0, 9.0, 2.0])
    assert list(np.argsort(similarity_weights(s))) == list(np.argsort(s))


def test_emotion_proportions():
    po, ne = emotion_proportions(np.array([[0.6], [0.6], [0.4], [0.2]]), 0.5)
    assert (po[0], ne[0]) == (0.5, 0.5)
    po, ne = emotion_proportions(np.array([[0.5], [0.9]]), 0.5)
    assert po[0] == 1.0 and ne[0] == 0.0


def test_group_interest_examples():
    g = group_interest(np.array([[0.8]]), np.array([1.0]), 0.5)
    assert g.pre[0] == pytest.approx(0.8)
    g = group_interest(np.zeros((3, 4)), np.ones(3), 0.5)
    np.testing.assert_array_equal(g.pre, 0.0)


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 6), st.integers(1, 8), st.integers(0, 2**31 - 1), st.floats(0.1, 10))
def test_group_interest_matches_naive(N, C, seed, scale):
    rng = np.random.default_rng(seed)
    P = rng.random((N, C))
    P[rng.random((N, C)) < 0.2] = 0.5
    a = rng.random(N)
    g = group_interest(P, a, 0.5)
    np.testing.assert_allclose(g.pre, naive_pre(P, a, 0.5), atol=1e-12)
    np.testing.assert_allclose(g.a_po + g.a_ne, 1.0)
    scaled = group_interest(P, a * scale, 0.5)
    assert list(np.lexsort((np.arange(C), -scaled.pre))) == list(np.lexsort((np.arange(C), -g.pre)))


def test_group_interest_shape_check():
    with pytest.raises(ValueError):
        group_interest(np.ones((2, 3)), np.ones(3))


def test_decide_cache():
    g = group_interest(np.array([[0.9, 0.3, 0.6]]), np.ones(1), 0.5, items=np.array([10, 11, 12]))
    plan = decide_cache(g, 2)
    assert list(plan.selected) == [10, 12]
    assert plan.cached.sum() == 2
    assert decide_cache(g, 10).cached.all()
    assert decide_cache(g, 10).size == 3
    tie = group_interest(np.array([[0.7, 0.7]]), np.ones(1), 0.5, items=np.array([9, 4]))
    assert list(decide_cache(tie, 1).selected) == [4]
    with pytest.raises(ValueError):
        decide_cache(g, 0)


def test_decide_cache_idempotent():
    rng = np.random.default_rng(0)
    g = group_interest(rng.random((5, 30)), rng.random(5), 0.5)
    a, b = decide_cache(g, 7), decide_cache(g, 7)
    np.testing.assert_array_equal(a.cached, b.cached)


def test_popularity_baseline():
    idx = HistoryIndex.from_sets({1: {1, 2}, 2: {1, 2}, 3: {1, 3}})
    assert list(baseline_popularity(idx, 1).selected) == [1]
    assert list(baseline_popularity(idx, 2).selected) == [1, 2]
    empty = HistoryIndex(pd.DataFrame({"user_id": [], "item_id": []}, dtype=np.int64), users=[1], items=[5, 3, 8])
    assert list(baseline_popularity(empty, 2).selected) == [3, 5]
    counts = HistoryIndex.from_sets({u: ({1} if u <= 5 else set()) | ({2} if u <= 3 else set()) for u in range(1, 7)})
    assert list(baseline_popularity(counts, 1).selected) == [1]


def test_topk_baseline():
    P = np.array([[0.9, 0.1, 0.8, 0.2]])
    assert list(baseline_topk(P, 2).selected) == [0, 2]
    P = np.array([[0.95, 0.1, 0.3], [0.94, 0.2, 0.9]])
    # video 0 carries the two highest individual scores but is cached once
    assert list(baseline_topk(P, 2).selected) == [0, 2]
    assert list(baseline_topk(P, 1).selected) == [0]


def test_history_index_queries():
    idx = HistoryIndex.from_sets({1: {10, 11}, 2: {11}})
    assert idx.watched(1) == {10, 11}
    assert idx.watchers(11) == {1, 2}
    assert idx.watchers(99) == set()
    np.testing.assert_array_equal(idx.watch_counts([11, 10, 99]), [2, 1, 0])
    np.testing.assert_array_equal(idx.user_degree, [2, 1])
