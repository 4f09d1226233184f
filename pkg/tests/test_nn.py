import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from bypassfl.errors import DomainError, NumericError, StructuralError, UsageError
from bypassfl.gradcheck import check_layer
from bypassfl.nn import (MLP, LayerSpec, OptimizerState, ParamSet, cross_entropy_loss, dense_forward,
                         dice_loss, finite_difference_check, mlp_specs, optimizer_step, softmax)


def naive_matmul_bias(x, W, b):
    rows, inner = len(x), len(W)
    cols = len(b)
    out = [[0.0] * cols for _ in range(rows)]
    for r in range(rows):
        for j in range(cols):
            acc = 0.0
            for k in range(inner):
                acc += x[r][k] * W[k][j]
            out[r][j] = acc + b[j]
    return out


# -- dense_forward ----------------------------------------------------------

def test_dense_identity():
    out = dense_forward(np.array([[1.0, 2.0]]), np.eye(2), np.zeros(2))
    np.testing.assert_array_equal(out, [[1.0, 2.0]])


def test_dense_hand_arithmetic():
    out = dense_forward(np.array([[1.0, 1.0]]), np.array([[2.0], [3.0]]), np.array([1.0]))
    assert out.tolist() == [[6.0]]


def test_dense_matches_triple_loop():
    rng = np.random.default_rng(3)
    x, W, b = rng.standard_normal((3, 4)), rng.standard_normal((4, 2)), rng.standard_normal(2)
    expected = naive_matmul_bias(x.tolist(), W.tolist(), b.tolist())
    np.testing.assert_allclose(dense_forward(x, W, b), expected, atol=1e-12, rtol=0)


def test_dense_shape_error_names_both_shapes():
    with pytest.raises(StructuralError, match=r"x\[1, 3\].*W\[2, 2\]"):
        dense_forward(np.ones((1, 3)), np.ones((2, 2)), np.ones(2))


# -- softmax / cross-entropy ------------------------------------------------

def test_softmax_examples():
    np.testing.assert_allclose(softmax([0.0, 0.0]), [0.5, 0.5], atol=1e-15)
    np.testing.assert_allclose(softmax([math.log(2.0), 0.0]), [2 / 3, 1 / 3], atol=1e-15)
    big = softmax([1000.0, 0.0])
    assert np.all(np.isfinite(big))
    assert big[0] == pytest.approx(1.0) and big[1] == pytest.approx(0.0, abs=1e-300)


def test_softmax_rejects_nonfinite():
    with pytest.raises(NumericError):
        softmax([np.nan, 0.0])


@settings(max_examples=200, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(1, 6)),
              elements=st.floats(-1e3, 1e3)))
def test_softmax_slices_sum_to_one(z):
    np.testing.assert_allclose(softmax(z).sum(axis=-1), 1.0, atol=1e-12, rtol=0)


def test_cross_entropy_uniform_is_log_c():
    assert cross_entropy_loss(np.zeros((5, 3)), [0, 1, 2, 0, 1]) == pytest.approx(math.log(3), abs=1e-15)


def test_cross_entropy_near_point_mass():
    assert cross_entropy_loss([[10.0, -10.0]], [0]) == pytest.approx(0.0, abs=1e-8)


def test_cross_entropy_matches_per_sample_oracle():
    rng = np.random.default_rng(11)
    logits = rng.standard_normal((4, 3))
    labels = [2, 0, 1, 2]
    total = 0.0
    for row, y in zip(logits.tolist(), labels):
        total += -(row[y] - math.log(sum(math.exp(v) for v in row)))
    assert cross_entropy_loss(logits, labels) == pytest.approx(total / 4, abs=1e-12)


def test_cross_entropy_label_out_of_range():
    with pytest.raises(StructuralError):
        cross_entropy_loss(np.zeros((1, 3)), [3])


@settings(max_examples=100, deadline=None)
@given(arrays(np.float64, (3, 4), elements=st.floats(-50, 50)), st.lists(st.integers(0, 3), min_size=3, max_size=3))
def test_cross_entropy_nonnegative(logits, labels):
    assert cross_entropy_loss(logits, labels) >= 0.0


# -- dice loss --------------------------------------------------------------

def test_dice_perfect_overlap_bias_bound():
    n = 6
    loss = dice_loss(np.ones((1, n)), np.ones((1, n)))
    assert 0.0 <= loss <= 1.0 / (2 * n + 1)


def test_dice_closed_form():
    assert dice_loss(np.zeros((1, 4)), np.ones((1, 4))) == pytest.approx(0.8, abs=1e-15)


def test_dice_matches_set_formula_oracle():
    rng = np.random.default_rng(5)
    pred = rng.uniform(size=(3, 10))
    target = (rng.uniform(size=(3, 10)) > 0.5).astype(float)
    per_sample = []
    for p, t in zip(pred.tolist(), target.tolist()):
        inter = sum(a * b for a, b in zip(p, t))
        per_sample.append(1.0 - (2 * inter + 1.0) / (sum(p) + sum(t) + 1.0))
    assert dice_loss(pred, target) == pytest.approx(sum(per_sample) / 3, abs=1e-12)


def test_dice_domain_error():
    with pytest.raises(DomainError):
        dice_loss(np.full((1, 2), 1.5), np.ones((1, 2)))


@settings(max_examples=100, deadline=None)
@given(st.integers(1, 12), st.integers(0, 2**31 - 1))
def test_dice_range_and_monotone_in_overlap(n, seed):
    rng = np.random.default_rng(seed)
    target = (rng.uniform(size=(1, n)) > 0.5).astype(float)
    pred = rng.uniform(size=(1, n))
    loss = dice_loss(pred, target)
    assert 0.0 <= loss < 1.0
    # shift prediction mass from a background pixel onto a foreground one: same marginal, more overlap
    fg, bg = np.flatnonzero(target[0] == 1), np.flatnonzero(target[0] == 0)
    if fg.size and bg.size:
        moved = pred.copy()
        delta = min(moved[0, bg[0]], 1.0 - moved[0, fg[0]])
        moved[0, bg[0]] -= delta
        moved[0, fg[0]] += delta
        assert dice_loss(moved, target) <= loss + 1e-15


# -- backward / gradient checks --------------------------------------------

def test_backward_linear_scalar():
    params = ParamSet({"0.W": [[2.0]], "0.b": [0.0]})
    net = MLP([LayerSpec("dense", 1, 1)], params)
    net.forward(np.array([[3.0]]))
    grads = {}
    net.backward(np.array([[1.0]]), grads)
    assert grads["0.W"].item() == 3.0


def test_backward_without_forward_is_usage_error():
    net = MLP.build([LayerSpec("dense", 2, 2)], np.random.default_rng(0))
    with pytest.raises(UsageError):
        net.backward(np.ones((1, 2)), {})


def test_frozen_parameters_get_no_gradient():
    net = MLP.build(mlp_specs([3, 4, 2], final_relu=False), np.random.default_rng(0))
    net.params.freeze()
    net.forward(np.ones((2, 3)))
    grads = {}
    net.backward(np.ones((2, 2)), grads)
    assert grads == {}


@pytest.mark.parametrize("kind", ["dense", "relu", "softmax-output"])
@pytest.mark.parametrize("seed", range(20))
def test_layer_gradients_match_finite_differences(kind, seed):
    assert check_layer(kind, seed, tolerance=1e-4).passed


def test_linear_model_grad_check_is_tight():
    rng = np.random.default_rng(0)
    net = MLP.build([LayerSpec("dense", 3, 2)], rng)
    x, r = rng.standard_normal((4, 3)), rng.standard_normal((4, 2))

    def loss():
        return float(np.sum(r * net.forward(x, False)))

    net.forward(x)
    grads = {}
    net.backward(r, grads)
    report = finite_difference_check(loss, net.params, grads, tolerance=1e-9)
    assert report.passed, report.max_rel_error


def test_corrupted_gradient_is_reported():
    rng = np.random.default_rng(1)
    net = MLP.build(mlp_specs([3, 4, 2], final_relu=False), rng)
    x, y = rng.standard_normal((5, 3)), np.array([0, 1, 1, 0, 1])
    from bypassfl.nn import cross_entropy_with_grad

    def loss():
        return cross_entropy_with_grad(net.forward(x, False), y)[0]

    _, d = cross_entropy_with_grad(net.forward(x), y)
    grads = {}
    net.backward(d, grads)
    grads["2.W"] = grads["2.W"] * 2.0
    report = finite_difference_check(loss, net.params, grads)
    assert not report.passed
    assert report.failures() == ["2.W"]


# -- optimizers -------------------------------------------------------------

def test_sgd_step():
    ps = ParamSet({"p": [1.0]})
    optimizer_step(ps, {"p": np.array([2.0])}, OptimizerState("sgd", 0.1))
    assert ps["p"][0] == pytest.approx(0.8, abs=1e-15)


@pytest.mark.parametrize("scale", [1e-3, 1.0, 1e3])
def test_adam_first_step_magnitude_is_lr(scale):
    ps = ParamSet({"p": np.zeros(5)})
    optimizer_step(ps, {"p": np.full(5, scale)}, OptimizerState("adam", 1e-2))
    np.testing.assert_allclose(ps["p"], -1e-2, rtol=1e-4)


def test_frozen_entry_untouched_for_100_steps():
    ps = ParamSet({"a": [1.0, 2.0], "b": [3.0]})
    ps._trainable["b"] = False
    before = ps["b"].copy()
    state = OptimizerState("adam", 0.1)
    rng = np.random.default_rng(0)
    for _ in range(100):
        optimizer_step(ps, {"a": rng.standard_normal(2), "b": rng.standard_normal(1)}, state)
    assert np.array_equal(ps["b"], before)
    assert not np.array_equal(ps["a"], [1.0, 2.0])


def test_optimizer_shape_mismatch():
    ps = ParamSet({"p": np.zeros(3)})
    with pytest.raises(StructuralError):
        optimizer_step(ps, {"p": np.zeros(2)}, OptimizerState())


def test_adam_matches_reference_recurrence():
    ps = ParamSet({"p": [0.5]})
    state = OptimizerState("adam", 0.01)
    m = v = 0.0
    p = 0.5
    for t, g in enumerate([0.3, -1.2, 0.7], start=1):
        optimizer_step(ps, {"p": np.array([g])}, state)
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        p -= 0.01 * (m / (1 - 0.9 ** t)) / (math.sqrt(v / (1 - 0.999 ** t)) + 1e-8)
    assert ps["p"][0] == pytest.approx(p, abs=1e-15)


# -- containers -------------------------------------------------------------

def test_paramset_order_and_compatibility():
    a = ParamSet({"w": np.zeros((2, 2)), "b": np.zeros(2)})
    assert a.names() == ["w", "b"]
    assert a.compatible(a.copy())
    assert not a.compatible(ParamSet({"b": np.zeros(2), "w": np.zeros((2, 2))}))
    with pytest.raises(StructuralError):
        a.add("w", np.zeros(1))


def test_layer_chain_checked():
    with pytest.raises(StructuralError):
        MLP.build([LayerSpec("dense", 2, 3), LayerSpec("dense", 4, 1)], np.random.default_rng(0))


def test_init_is_bounded_and_seeded():
    specs = mlp_specs([16, 8], final_relu=False)
    a = MLP.build(specs, np.random.default_rng(7))
    b = MLP.build(specs, np.random.default_rng(7))
    assert a.params.equal(b.params)
    assert np.abs(a.params["0.W"]).max() <= math.sqrt(1 / 16)
    assert not a.params["0.b"].any()
