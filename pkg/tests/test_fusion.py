import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from bypassfl.errors import StructuralError
from bypassfl.fusion import (FusionProjection, FusionWeights, fuse_local, fusion_weights, resample_fused,
                             resample_global)
from bypassfl.gradcheck import check_fusion_path
from bypassfl.nn import dense_forward

finite = st.floats(-1e3, 1e3, allow_nan=False)


def identity_projection(dim):
    return FusionProjection.from_weights(np.eye(dim), np.zeros(dim), np.eye(dim), np.zeros(dim))


def test_resample_identity():
    x = np.random.default_rng(0).standard_normal((3, 4))
    proj = identity_projection(4)
    np.testing.assert_array_equal(resample_global(x, proj), x)
    np.testing.assert_array_equal(resample_fused(x, proj), x)


def test_resample_matches_dense_oracle():
    up_W = np.array([[1.0, -2.0, 0.5], [3.0, 0.0, 1.0]])
    up_b = np.array([0.1, 0.2, 0.3])
    proj = FusionProjection.from_weights(up_W, up_b, np.ones((3, 2)), np.zeros(2))
    x = np.array([[1.0, 2.0], [-1.0, 0.5]])
    np.testing.assert_allclose(resample_global(x, proj), dense_forward(x, up_W, up_b), atol=1e-15)


def test_resample_zero_input_gives_bias():
    proj = FusionProjection.from_weights(np.ones((2, 3)), np.array([1.0, 2.0, 3.0]),
                                         np.ones((3, 2)), np.array([-1.0, 4.0]))
    np.testing.assert_array_equal(resample_global(np.zeros((2, 2)), proj), [[1, 2, 3], [1, 2, 3]])
    np.testing.assert_array_equal(resample_fused(np.zeros((1, 3)), proj), [[-1, 4]])


def test_resample_pseudo_inverse_round_trip():
    rng = np.random.default_rng(2)
    up_W = rng.standard_normal((3, 5))  # full row rank
    up_b = rng.standard_normal(5)
    down_W = np.linalg.pinv(up_W)
    down_b = -up_b @ down_W
    proj = FusionProjection.from_weights(up_W, up_b, down_W, down_b)
    x = rng.standard_normal((4, 3))
    np.testing.assert_allclose(resample_fused(resample_global(x, proj), proj), x, atol=1e-10)


def test_resample_dimension_errors():
    proj = FusionProjection.init(3, 5, np.random.default_rng(0))
    with pytest.raises(StructuralError):
        resample_global(np.ones((2, 4)), proj)
    with pytest.raises(StructuralError):
        resample_fused(np.ones((2, 3)), proj)


def test_projection_init_identity_square():
    proj = FusionProjection.init(3, 5, np.random.default_rng(0))
    np.testing.assert_array_equal(proj.params["up.W"][:3, :3], np.eye(3))
    np.testing.assert_array_equal(proj.params["down.W"][:3, :3], np.eye(3))
    assert np.abs(proj.params["up.W"][:, 3:]).max() <= 1e-2


def test_weights_examples():
    w = fusion_weights(np.array([[1.5, -3.0]]), np.array([[1.5, -3.0]]))
    np.testing.assert_array_equal(w.a, 0.5)
    np.testing.assert_array_equal(w.b, 0.5)
    w = fusion_weights(np.array([[math.log(2.0)]]), np.zeros((1, 1)))
    assert w.a.item() == pytest.approx(2 / 3, abs=1e-15)
    assert w.b.item() == pytest.approx(1 / 3, abs=1e-15)
    w = fusion_weights(np.array([[500.0]]), np.array([[-500.0]]))
    assert np.isfinite(w.a).all() and w.a.item() == pytest.approx(1.0)


def test_weights_shape_error():
    with pytest.raises(StructuralError):
        fusion_weights(np.ones((2, 3)), np.ones((2, 4)))


def test_fuse_examples():
    rng = np.random.default_rng(4)
    x = rng.standard_normal((2, 3))
    np.testing.assert_array_equal(fuse_local(x, x, fusion_weights(x, x)), x)
    g, l = rng.standard_normal((2, 3)), rng.standard_normal((2, 3))
    half = FusionWeights(np.full((2, 3), 0.5), np.full((2, 3), 0.5))
    np.testing.assert_allclose(fuse_local(g, l, half), (g + l) / 2, atol=1e-15)


def test_fuse_matches_scalar_loop():
    rng = np.random.default_rng(8)
    g, l = rng.standard_normal((3, 4)), rng.standard_normal((3, 4))
    fused = fuse_local(g, l, fusion_weights(g, l))
    for r in range(3):
        for i in range(4):
            eg, el = math.exp(g[r, i]), math.exp(l[r, i])
            expected = eg / (eg + el) * g[r, i] + el / (eg + el) * l[r, i]
            assert fused[r, i] == pytest.approx(expected, abs=1e-12)


pairs = st.integers(1, 6).flatmap(lambda c: st.tuples(
    arrays(np.float64, (2, c), elements=finite), arrays(np.float64, (2, c), elements=finite)))


@settings(max_examples=1000, deadline=None)
@given(pairs)
def test_weights_sum_to_one(pair):
    w = fusion_weights(*pair)
    np.testing.assert_allclose(w.a + w.b, 1.0, atol=1e-12, rtol=0)
    assert np.all((w.a >= 0) & (w.a <= 1))


@settings(max_examples=500, deadline=None)
@given(pairs)
def test_fuse_is_channelwise_convex(pair):
    g, l = pair
    fused = fuse_local(g, l, fusion_weights(g, l))
    slack = 1e-12 * np.maximum(1.0, np.abs(np.stack([g, l])).max(axis=0))
    assert np.all(fused >= np.minimum(g, l) - slack)
    assert np.all(fused <= np.maximum(g, l) + slack)


@settings(max_examples=500, deadline=None)
@given(pairs, st.floats(-100, 100))
def test_weights_shift_covariant(pair, c):
    g, l = pair
    w0, w1 = fusion_weights(g, l), fusion_weights(g + c, l + c)
    np.testing.assert_allclose(w1.a, w0.a, atol=1e-12, rtol=0)
    np.testing.assert_allclose(w1.b, w0.b, atol=1e-12, rtol=0)


@pytest.mark.parametrize("seed", range(20))
def test_full_fusion_path_gradients(seed):
    assert check_fusion_path(seed).passed
