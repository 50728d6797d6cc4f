import math

import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given, settings, strategies as st

from edgecast.interest import (
    LOGIT_CLAMP,
    ModelWeights,
    TrainConfig,
    TrainingDiverged,
    accuracy,
    auc,
    batch_loss,
    evaluate,
    fm_forward,
    fm_pairwise,
    gradients,
    init_weights,
    load_weights,
    logits,
    loss,
    predict,
    save_weights,
    train,
    weights_schema_hash,
)


def random_weights(dim, k=3, hidden=(5, 4), merge="sum", seed=0, scale=0.5):
    rng = np.random.default_rng(seed)
    layers, width = [], dim
    for h in hidden:
        layers.append((rng.normal(0, scale, (width, h)), rng.normal(0, scale, h)))
        width = h
    return ModelWeights(
        rng.normal(0, scale, dim), rng.normal(0, scale, (dim, k)), layers,
        rng.normal(0, scale, width if hidden else 0), float(rng.normal()), 1.3, merge,
    )


def test_fm_matches_pairwise_sum():
    rng = np.random.default_rng(1)
    W = random_weights(12, k=4)
    X = rng.normal(size=(40, 12))
    fast = fm_forward(W, X)
    slow = np.array([fm_pairwise(W, x) for x in X])
    np.testing.assert_allclose(fast, slow, rtol=0, atol=1e-10)


def test_fm_sparse_equals_dense():
    rng = np.random.default_rng(2)
    W = random_weights(15)
    X = rng.normal(size=(8, 15)) * (rng.random((8, 15)) < 0.3)
    np.testing.assert_allclose(fm_forward(W, sp.csr_matrix(X)), fm_forward(W, X), atol=1e-12)


def test_fm_single_vector_returns_float():
    W = random_weights(4)
    assert isinstance(fm_forward(W, np.ones(4)), float)


def test_zero_vector_gives_zero_fm():
    assert fm_forward(random_weights(6), np.zeros(6)) == 0.0


def test_dimension_mismatch():
    with pytest.raises(ValueError, match="dimension"):
        fm_forward(random_weights(6), np.zeros(5))


def test_bad_layer_shapes():
    W = random_weights(4)
    with pytest.raises(ValueError):
        ModelWeights(W.w, W.Y, [(np.zeros((3, 2)), np.zeros(2))], np.zeros(2))


def _numeric(W, X, y, getter, h=1e-5):
    ref = getter(W)
    out = np.zeros_like(ref)
    for idx in np.ndindex(ref.shape):
        orig = ref[idx]
        ref[idx] = orig + h
        up = batch_loss(W, X, y)
        ref[idx] = orig - h
        down = batch_loss(W, X, y)
        ref[idx] = orig
        out[idx] = (up - down) / (2 * h)
    return out


@pytest.mark.parametrize("merge", ["sum", "concat"])
def test_gradients_match_finite_differences(merge):
    rng = np.random.default_rng(3)
    W = random_weights(7, k=2, hidden=(4, 3), merge=merge, scale=0.3)
    X = rng.normal(size=(6, 7))
    y = rng.integers(0, 2, 6).astype(float)
    g = gradients(W, X, y)
    pairs = [(g["w"], lambda m: m.w), (g["Y"], lambda m: m.Y), (g["head"], lambda m: m.head)]
    for i in range(len(W.layers)):
        pairs.append((g["layers"][i][0], lambda m, i=i: m.layers[i][0]))
        pairs.append((g["layers"][i][1], lambda m, i=i: m.layers[i][1]))
    for analytic, getter in pairs:
        np.testing.assert_allclose(analytic, _numeric(W, X, y, getter), rtol=1e-5, atol=1e-8)


def test_scalar_gradients():
    rng = np.random.default_rng(4)
    W = random_weights(5, merge="concat", scale=0.3)
    X = rng.normal(size=(4, 5))
    y = np.array([0.0, 1, 1, 0])
    g = gradients(W, X, y)
    h = 1e-6
    for name in ("head_bias", "fm_scale"):
        orig = getattr(W, name)
        setattr(W, name, orig + h)
        up = batch_loss(W, X, y)
        setattr(W, name, orig - h)
        down = batch_loss(W, X, y)
        setattr(W, name, orig)
        assert g[name] == pytest.approx((up - down) / (2 * h), rel=1e-5, abs=1e-9)


def test_sum_merge_keeps_fm_scale_fixed():
    W = random_weights(5, merge="sum")
    g = gradients(W, np.ones((2, 5)), np.array([0.0, 1.0]))
    assert g["fm_scale"] == 0.0


def test_logits_clamped_and_gradient_zero_there():
    W = random_weights(3, hidden=(2,))
    W.w[:] = 1e4
    X = np.ones((1, 3))
    assert logits(W, X)[0] > LOGIT_CLAMP
    assert math.isfinite(batch_loss(W, X, np.array([0.0])))
    g = gradients(W, X, np.array([0.0]))
    assert np.all(g["w"] == 0)


def test_loss_matches_definition():
    p = np.array([0.2, 0.9, 0.5])
    r = np.array([0, 1, 1])
    expected = -np.mean(r * np.log(p) + (1 - r) * np.log(1 - p))
    assert loss(p, r) == pytest.approx(expected)


def test_loss_finite_at_extremes():
    assert math.isfinite(loss(np.array([0.0, 1.0]), np.array([1, 0])))


def test_logistic_regression_oracle():
    # linearly separable; without MLP layers the model is logistic regression plus a tiny FM term
    X = np.array([[1, 0, 2], [1, 0, 1.5], [1, 0, 1], [1, 0, 0.8],
                  [0, 1, -1], [0, 1, -0.5], [0, 1, -2], [0, 1, -1.2]], dtype=float)
    y = np.array([1, 1, 1, 1, 0, 0, 0, 0], dtype=float)
    cfg = TrainConfig(k=1, hidden=(), learning_rate=0.5, batch_size=8, max_epochs=200, patience=200)
    res = train(X, y, X, y, cfg)
    assert res.history[-1].train_loss < 0.05
    assert auc(predict(res.weights, X), y) == 1.0


def test_early_stopping_patience():
    rng = np.random.default_rng(5)
    X = rng.normal(size=(200, 6))
    y = (rng.random(200) < 0.5).astype(float)
    Xv = rng.normal(size=(50, 6))
    yv = (rng.random(50) < 0.5).astype(float)
    cfg = TrainConfig(k=2, hidden=(4,), learning_rate=1.0, batch_size=16, max_epochs=60, patience=2)
    res = train(X, y, Xv, yv, cfg)
    vals = [r.val_loss for r in res.history]
    best = int(np.argmin(vals)) + 1
    assert res.best_epoch == best
    np.testing.assert_allclose(predict(res.weights, Xv), predict(res.weights, Xv))
    if res.stopped_early:
        assert vals[-1] > vals[-2] and vals[-2] > vals[-3]
        rises = [b > a for a, b in zip(vals, vals[1:])]
        # no earlier run of two consecutive rises
        assert not any(rises[i] and rises[i + 1] for i in range(len(rises) - 2))


def test_best_weights_returned():
    rng = np.random.default_rng(6)
    X = rng.normal(size=(100, 5))
    y = (X[:, 0] > 0).astype(float)
    res = train(X, y, X[:30], y[:30], TrainConfig(k=2, hidden=(3,), learning_rate=0.3, max_epochs=10, patience=10))
    assert loss(predict(res.weights, X[:30]), y[:30]) == pytest.approx(min(r.val_loss for r in res.history))


def test_training_is_deterministic():
    rng = np.random.default_rng(7)
    X = rng.normal(size=(64, 5))
    y = (X[:, 1] > 0).astype(float)
    cfg = TrainConfig(k=2, hidden=(3,), max_epochs=3, seed=11)
    a = train(X, y, X, y, cfg)
    b = train(X, y, X, y, cfg)
    for t, u in zip(a.weights.tensors().values(), b.weights.tensors().values()):
        np.testing.assert_array_equal(t, u)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_is_reported():
    X = np.full((4, 2), 1e200)
    with pytest.raises(TrainingDiverged):
        train(X, np.array([0.0, 1, 0, 1]), X, np.array([0.0, 1, 0, 1]),
              TrainConfig(k=1, hidden=(2,), learning_rate=1e10, max_epochs=2))


def test_auc_ties_count_half():
    assert auc([0.5, 0.5], [1, 0]) == 0.5
    assert auc([0.1, 0.4, 0.35, 0.8], [0, 0, 1, 1]) == 0.75


def test_auc_single_class_raises():
    with pytest.raises(ValueError):
        auc([0.1, 0.2], [1, 1])


def test_evaluate_single_class_gives_nan():
    W = random_weights(3)
    a, acc = evaluate(W, np.ones((2, 3)), [1, 1])
    assert math.isnan(a) and 0 <= acc <= 1


@settings(max_examples=50, deadline=None)
@given(st.lists(st.integers(-40, 40), min_size=4, max_size=30), st.integers(0, 2**31 - 1))
def test_auc_invariant_under_monotone_maps(scores, seed):
    rng = np.random.default_rng(seed)
    y = rng.integers(0, 2, len(scores))
    if y.min() == y.max():
        y[0] = 1 - y[0]
    s = np.array(scores, dtype=float) / 8
    assert auc(s, y) == pytest.approx(auc(np.exp(s) * 3 + 1, y))
    assert auc(s, y) == pytest.approx(1 - auc(-s, y))


def test_accuracy_threshold_inclusive():
    assert accuracy([0.5, 0.49], [1, 0], 0.5) == 1.0


def test_weights_roundtrip(tmp_path):
    W = random_weights(5, merge="concat")
    path = tmp_path / "w.npz"
    save_weights(W, path, schema_hash="abc")
    back = load_weights(path, schema_hash="abc")
    assert weights_schema_hash(path) == "abc"
    for t, u in zip(W.tensors().values(), back.tensors().values()):
        np.testing.assert_array_equal(t, u)
    assert back.merge == "concat"
    with pytest.raises(ValueError, match="schema"):
        load_weights(path, schema_hash="other")


def test_init_is_small_and_seeded():
    cfg = TrainConfig(k=3, hidden=(4,), seed=9, init_scale=0.01)
    a, b = init_weights(10, cfg), init_weights(10, cfg)
    np.testing.assert_array_equal(a.Y, b.Y)
    assert np.abs(a.Y).max() <= 0.01
