import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fedstab.data import (
    differing_positions,
    dirichlet_partition,
    draw_probes,
    generate_synthetic,
    load_federation,
    make_neighbor,
    save_federation,
)


def test_small_pool_is_balanced():
    pool = generate_synthetic(2, 2, 4, seed=0)
    assert pool.X.shape == (4, 2)
    assert np.bincount(pool.y).tolist() == [2, 2]


def test_pool_class_counts_large():
    pool = generate_synthetic(10, 10, 10000, seed=7)
    assert np.bincount(pool.y, minlength=10).tolist() == [1000] * 10
    np.testing.assert_allclose(np.linalg.norm(pool.means, axis=1), 1.0)


def test_pool_is_deterministic():
    a, b = generate_synthetic(5, 3, 50, seed=3), generate_synthetic(5, 3, 50, seed=3)
    assert np.array_equal(a.X, b.X) and np.array_equal(a.y, b.y)
    c = generate_synthetic(5, 3, 50, seed=4)
    assert not np.array_equal(a.X, c.X)


def test_pool_rejects():
    with pytest.raises(ValueError):
        generate_synthetic(3, 5, 4, seed=0)
    with pytest.raises(ValueError):
        generate_synthetic(3, 1, 4, seed=0)


@settings(max_examples=30, deadline=None)
@given(
    m=st.integers(1, 12),
    per=st.integers(1, 20),
    extra=st.integers(0, 11),
    C=st.integers(2, 6),
    beta=st.sampled_from([0.05, 0.1, 1.0, 100.0]),
    seed=st.integers(0, 1000),
)
def test_partition_shapes_and_multiset(m, per, extra, C, beta, seed):
    total = max(m * per + extra, C)
    pool = generate_synthetic(3, C, total, seed)
    fed = dirichlet_partition(pool, m, beta, seed)
    S = total // m
    assert fed.X.shape == (m, S, 3) and fed.y.shape == (m, S)
    idx = fed.meta["pool_index"].ravel()
    # no duplication: every pool sample lands in at most one shard
    assert len(set(idx.tolist())) == m * S
    assert np.array_equal(fed.X.reshape(-1, 3), pool.X[idx])
    assert np.array_equal(fed.y.ravel(), pool.y[idx])
    assert fed.class_counts.sum() == m * S


def test_partition_deterministic():
    pool = generate_synthetic(4, 5, 200, 1)
    a, b = dirichlet_partition(pool, 8, 0.1, 2), dirichlet_partition(pool, 8, 0.1, 2)
    assert np.array_equal(a.X, b.X) and np.array_equal(a.y, b.y)


def test_partition_large_beta_near_uniform():
    pool = generate_synthetic(4, 5, 1000, 0)
    fed = dirichlet_partition(pool, 10, 1e6, 0)
    assert np.max(np.abs(fed.proportions - 0.2)) < 0.02


def test_partition_small_beta_heterogeneous():
    majority = []
    for seed in range(10):
        pool = generate_synthetic(10, 5, 16 * 64, seed)
        fed = dirichlet_partition(pool, 16, 0.1, seed)
        frac = fed.class_counts.max(axis=1) / fed.S
        majority.append(np.mean(frac > 0.5) > 0.5)
    assert np.mean(majority) > 0.5


def test_partition_single_client():
    pool = generate_synthetic(3, 3, 31, 0)
    fed = dirichlet_partition(pool, 1, 0.5, 0)
    assert fed.S == 31
    assert sorted(fed.meta["pool_index"][0].tolist()) == list(range(31))


def test_partition_rejects():
    pool = generate_synthetic(3, 3, 10, 0)
    with pytest.raises(ValueError):
        dirichlet_partition(pool, 4, 0.0, 0)
    with pytest.raises(ValueError):
        dirichlet_partition(pool, 11, 1.0, 0)


@pytest.fixture
def fed():
    return dirichlet_partition(generate_synthetic(6, 4, 8 * 16, 0), 8, 0.1, 0)


def test_neighbor_differs_at_one_position(fed):
    nb, pert = make_neighbor(fed, 3, 5, seed=9)
    assert differing_positions(fed, nb) == [(3, 5)]
    assert pert.replacement_y == pert.original_y
    assert not pert.is_null
    assert np.array_equal(pert.original_x, fed.X[3, 5])
    assert np.array_equal(nb.X[3, 5], pert.replacement_x)


def test_neighbor_deterministic(fed):
    a, pa = make_neighbor(fed, 1, 2, seed=4)
    b, pb = make_neighbor(fed, 1, 2, seed=4)
    assert np.array_equal(pa.replacement_x, pb.replacement_x)
    assert np.array_equal(a.X, b.X)


def test_neighbor_forced_null(fed):
    nb, pert = make_neighbor(fed, 0, 0, seed=0, replacement=(fed.X[0, 0], fed.y[0, 0]))
    assert pert.is_null
    assert differing_positions(fed, nb) == []


def test_neighbor_rejects(fed):
    with pytest.raises(IndexError):
        make_neighbor(fed, fed.m, 0, 0)
    with pytest.raises(IndexError):
        make_neighbor(fed, 0, fed.S, 0)
    with pytest.raises(IndexError):
        make_neighbor(fed, -1, 0, 0)


def test_neighbor_leaves_original_untouched(fed):
    before = fed.X.copy()
    make_neighbor(fed, 2, 2, 1)
    assert np.array_equal(fed.X, before)


def test_probes(fed):
    X, y = draw_probes(fed, 50, 3)
    assert X.shape == (50, fed.d) and y.shape == (50,)
    X2, _ = draw_probes(fed, 50, 3)
    assert np.array_equal(X, X2)
    with pytest.raises(ValueError):
        draw_probes(fed, 0, 3)


def test_save_load_roundtrip(fed, tmp_path):
    save_federation(fed, tmp_path / "fed")
    assert (tmp_path / "fed" / "client_0000.csv").exists()
    back = load_federation(tmp_path / "fed")
    assert np.array_equal(back.X, fed.X)
    assert np.array_equal(back.y, fed.y)
    assert back.beta == fed.beta and back.seed == fed.seed
