import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bypassfl.data import (gen_blobs, load_dataset_csv, partition_dirichlet, regenerate, resolution_shift,
                           save_dataset_csv, simplex_means)
from bypassfl.errors import ConfigError
from bypassfl.nn import MLP, LayerSpec, OptimizerState, cross_entropy_with_grad, optimizer_step


def test_blobs_deterministic():
    a = gen_blobs(300, 8, 3, 2.0, seed=5)
    b = gen_blobs(300, 8, 3, 2.0, seed=5)
    assert np.array_equal(a.features, b.features) and np.array_equal(a.labels, b.labels)
    assert not np.array_equal(a.features, gen_blobs(300, 8, 3, 2.0, seed=6).features)


def test_blobs_regenerate_from_metadata():
    ds = resolution_shift(gen_blobs(200, 8, 4, 3.0, seed=1), 2)
    again = regenerate(ds.metadata)
    assert np.array_equal(ds.features, again.features) and np.array_equal(ds.labels, again.labels)


def test_blobs_single_class():
    ds = gen_blobs(50, 3, 1, 1.0, seed=0)
    assert set(ds.labels.tolist()) == {0}


def test_blobs_balanced():
    counts = np.bincount(gen_blobs(103, 5, 4, 1.0, seed=0).labels)
    assert counts.max() - counts.min() <= 1


def test_simplex_edges_equal_separation():
    means = simplex_means(10, 5, 3.5, np.random.default_rng(0))
    dists = [np.linalg.norm(means[i] - means[j]) for i in range(5) for j in range(i + 1, 5)]
    np.testing.assert_allclose(dists, 3.5, atol=1e-12)


@pytest.mark.parametrize("kwargs", [dict(n=2, d=3, n_classes=3, separation=1.0),
                                    dict(n=10, d=3, n_classes=3, separation=0.0),
                                    dict(n=10, d=1, n_classes=4, separation=1.0)])
def test_blobs_degenerate_params(kwargs):
    with pytest.raises(ConfigError):
        gen_blobs(seed=0, **kwargs)


def test_separated_blobs_linearly_learnable():
    ds = gen_blobs(400, 2, 3, 10.0, seed=0)
    net = MLP.build([LayerSpec("dense", 2, 3)], np.random.default_rng(0))
    state = OptimizerState("adam", 0.05)
    for _ in range(300):
        _, d = cross_entropy_with_grad(net.forward(ds.features), ds.labels)
        grads = {}
        net.backward(d, grads)
        optimizer_step(net.params, grads, state)
    acc = np.mean(np.argmax(net.forward(ds.features, False), axis=1) == ds.labels)
    assert acc > 0.99


def test_dirichlet_single_client():
    ds = gen_blobs(40, 4, 2, 1.0, seed=0)
    assert partition_dirichlet(ds, 1, 0.5, seed=0) == {0: list(range(40))}


def test_dirichlet_large_alpha_is_near_iid():
    ds = gen_blobs(8000, 4, 4, 1.0, seed=0)
    plan = partition_dirichlet(ds, 4, 1e6, seed=0)
    global_hist = np.bincount(ds.labels, minlength=4) / len(ds)
    for idx in plan.values():
        hist = np.bincount(ds.labels[idx], minlength=4) / len(idx)
        assert np.abs(hist - global_hist).max() < 0.05


def test_dirichlet_small_alpha_is_skewed():
    ds = gen_blobs(2000, 8, 4, 1.0, seed=0)
    for seed in range(10):
        plan = partition_dirichlet(ds, 8, 0.1, seed)
        top = max(np.bincount(ds.labels[idx], minlength=4).max() / len(idx) for idx in plan.values())
        assert top > 0.6


def test_dirichlet_needs_enough_samples():
    with pytest.raises(ConfigError):
        partition_dirichlet(gen_blobs(3, 2, 1, 1.0, seed=0), 4, 0.5, seed=0)


@settings(max_examples=100, deadline=None)
@given(st.integers(1, 12), st.floats(0.01, 100.0), st.integers(0, 10_000))
def test_partition_plan_invariants(k, alpha, seed):
    ds = gen_blobs(60, 3, 3, 1.0, seed=1)
    plan = partition_dirichlet(ds, k, alpha, seed)
    assert sorted(plan) == list(range(k))
    merged = [i for idx in plan.values() for i in idx]
    assert sorted(merged) == list(range(60))  # disjoint and covering
    assert all(len(idx) > 0 for idx in plan.values())


def test_resolution_identity_and_hand_average():
    ds = gen_blobs(10, 4, 2, 1.0, seed=0)
    assert np.array_equal(resolution_shift(ds, 1).features, ds.features)
    ds.features[0] = [1.0, 3.0, 5.0, 7.0]
    assert resolution_shift(ds, 2).features[0].tolist() == [2.0, 2.0, 6.0, 6.0]


def test_resolution_errors():
    ds = gen_blobs(10, 6, 2, 1.0, seed=0)
    with pytest.raises(ConfigError):
        resolution_shift(ds, 4)
    with pytest.raises(ConfigError):
        resolution_shift(ds, 3)


def test_resolution_reduces_variance():
    ds = gen_blobs(2000, 32, 3, 1.0, seed=0)
    var2 = resolution_shift(ds, 2).features.var(axis=0).mean()
    var8 = resolution_shift(ds, 8).features.var(axis=0).mean()
    assert var8 < var2


@pytest.mark.parametrize("factor", [1, 2, 4, 8])
def test_resolution_keeps_labels(factor):
    ds = gen_blobs(100, 16, 3, 1.0, seed=0)
    assert np.array_equal(resolution_shift(ds, factor).labels, ds.labels)


def test_dataset_csv_round_trip(tmp_path):
    ds = gen_blobs(20, 3, 2, 1.0, seed=0)
    save_dataset_csv(ds, tmp_path / "d.csv")
    back = load_dataset_csv(tmp_path / "d.csv")
    assert np.array_equal(back.features, ds.features) and np.array_equal(back.labels, ds.labels)
