import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.spatial import cKDTree

from dvcm.distlike import (
    DistanceLikeSpec,
    WeightedPointCloud,
    full_k_sites,
    geometric_median,
    geometric_median_batch,
    grid_eval,
    grid_nodes,
    k_distance,
    k_distance_many,
    knn,
    median_sites,
    power_distance,
    power_distance_many,
    witness_groups,
    witnessed_sites,
    write_grid_csv,
)

E = np.eye(3)


def brute_power(S, W, X):
    d2 = ((X[:, None, :] - S[None]) ** 2).sum(axis=2) + W[None]
    return np.sqrt(d2.min(axis=1)), d2.argmin(axis=1)


# ---------------------------------------------------------------------------
# power distance


def test_power_distance_examples():
    c = WeightedPointCloud.create(np.zeros((1, 3)))
    assert power_distance(c, [3, 4, 0]) == (5.0, 0)
    c = WeightedPointCloud.create([[0, 0, 0], [2, 0, 0]], [0.0, 3.0])
    v, i = power_distance(c, [1, 0, 0])
    assert v == pytest.approx(1.0) and i == 0
    c = WeightedPointCloud.create([[1, 2, 3]], [2.0])
    assert power_distance(c, [1, 2, 3])[0] == pytest.approx(math.sqrt(2.0))


def test_power_distance_tie_goes_to_lower_index():
    c = WeightedPointCloud.create([[2, 0, 0], [-2, 0, 0]])
    assert power_distance(c, [0, 0, 0])[1] == 0
    c = WeightedPointCloud.create([[0, 0, 0], [2, 0, 0]], [1.0, 1.0])
    assert power_distance(c, [1, 0, 0])[1] == 0


def test_power_distance_matches_bruteforce():
    rng = np.random.default_rng(0)
    for n in (5, 70, 500):
        S = rng.random((n, 3))
        W = rng.uniform(0, 0.05, n)
        c = WeightedPointCloud.create(S, W)
        X = rng.uniform(-0.5, 1.5, (2000, 3))
        v, i = power_distance_many(c, X)
        bv, bi = brute_power(c.sites, c.weights, X)
        assert np.allclose(v, bv, rtol=0, atol=1e-12)
        assert np.array_equal(i, bi)


def test_empty_cloud_rejected():
    c = WeightedPointCloud.create(np.zeros((0, 3)))
    with pytest.raises(ValueError):
        power_distance(c, [0, 0, 0])


def test_cloud_validation_and_dedup():
    with pytest.raises(ValueError):
        WeightedPointCloud.create([[0, 0, 0]], [-1.0])
    c = WeightedPointCloud.create([[0, 0, 0], [1, 0, 0], [0, 0, 0]], [0.5, 0.0, 0.2])
    assert len(c) == 2
    assert np.allclose(c.sites, [[0, 0, 0], [1, 0, 0]])
    assert np.allclose(c.weights, [0.2, 0.0])


# ---------------------------------------------------------------------------
# k-distance


def test_k_distance_examples():
    P = np.array([[0, 0, 0], [1, 0, 0]], dtype=float)
    assert k_distance(P, 2, [0, 0, 0]) == pytest.approx(math.sqrt(0.5))
    assert k_distance(np.zeros((1, 3)), 1, [0, 0, 2]) == pytest.approx(2.0)
    rng = np.random.default_rng(1)
    Q = rng.random((50, 3))
    X = rng.random((100, 3))
    d = cKDTree(Q).query(X)[0]
    assert np.allclose(k_distance_many(Q, 1, X), d)
    with pytest.raises(ValueError):
        k_distance(P, 3, [0, 0, 0])
    with pytest.raises(ValueError):
        k_distance(P, 0, [0, 0, 0])


def test_knn_ties_by_index():
    P = np.array([[1, 0, 0], [-1, 0, 0], [0, 1, 0], [0, 0, 5]], dtype=float)
    idx, d2 = knn(cKDTree(P), P, np.zeros((1, 3)), 2)
    assert idx.tolist() == [[0, 1]]
    idx, _ = knn(cKDTree(P), P, P[:1], 2, exclude=np.array([0]))
    assert idx.tolist() == [[2, 1]]  # |p0 - p2| = sqrt(2) < |p0 - p1| = 2


# ---------------------------------------------------------------------------
# witnessed and median sites


def test_witnessed_example():
    P = np.array([[0, 0, 0], [1, 0, 0], [3, 0, 0]], dtype=float)
    c = witnessed_sites(P, 2)
    assert len(c) == 2
    assert np.allclose(c.sites, [[0.5, 0, 0], [2, 0, 0]])
    assert np.allclose(c.weights, [0.25, 1.0])


def test_witnessed_k1_and_k_all():
    rng = np.random.default_rng(2)
    P = rng.random((30, 3))
    c = witnessed_sites(P, 1)
    assert np.array_equal(c.sites, P) and np.all(c.weights == 0)
    c = witnessed_sites(P, 30)
    assert len(c) == 1
    assert np.allclose(c.sites[0], P.mean(axis=0))
    with pytest.raises(ValueError):
        witnessed_sites(P, 31)


def test_witnessed_weights_are_k_distance_squared():
    rng = np.random.default_rng(3)
    P = rng.random((300, 3))
    for k in (2, 5, 12):
        c = witnessed_sites(P, k)
        kd = k_distance_many(P, k, c.sites)
        assert np.allclose(c.weights, kd**2, rtol=0, atol=1e-9)
        m = median_sites(P, k)
        assert np.allclose(m.weights, k_distance_many(P, k, m.sites) ** 2, rtol=0, atol=1e-9)


def test_witness_groups_exclude_self():
    rng = np.random.default_rng(4)
    P = rng.random((40, 3))
    g = witness_groups(P, 4)
    assert np.array_equal(g[:, 0], np.arange(40))
    assert all(len(set(row)) == 4 for row in g.tolist())


def test_median_sites_examples():
    P = np.array([[0, 0, 0], [1, 0, 0], [3, 0, 0], [7, 0, 0]], dtype=float)
    c = median_sites(P, 2)
    w = witnessed_sites(P, 2)
    assert np.allclose(c.sites, w.sites)
    tri = np.array([[0, 0, 0], [1, 0, 0], [0.5, math.sqrt(3) / 2, 0]])
    m = median_sites(tri, 3)
    assert np.allclose(m.sites[0], tri.mean(axis=0), atol=1e-9)
    col = np.array([[0, 0, 0], [1, 0, 0], [10, 0, 0]], dtype=float)
    assert np.allclose(median_sites(col, 3).sites[0], E[0], atol=1e-9)


# ---------------------------------------------------------------------------
# geometric median


def test_geometric_median_examples():
    assert np.allclose(geometric_median([[1, 2, 3]]), [1, 2, 3])
    sq = np.array([[0, 0, 0], [1, 0, 0], [1, 1, 0], [0, 1, 0]], dtype=float)
    assert np.allclose(geometric_median(sq), [0.5, 0.5, 0], atol=1e-9)
    assert np.allclose(geometric_median([[0, 0, 0], [1, 0, 0], [10, 0, 0]]), E[0], atol=1e-9)
    assert np.allclose(geometric_median([[0, 0, 0], [2, 0, 0]]), E[0])


def test_geometric_median_optimality():
    rng = np.random.default_rng(5)
    for trial in range(30):
        n = int(rng.integers(3, 40))
        P = rng.normal(size=(n, 3)) * rng.uniform(0.1, 10)
        if trial % 3 == 0:
            P[: n // 2] = P[0]  # heavy repeated point
        m = geometric_median(P)
        f = lambda x: np.linalg.norm(P - x, axis=1).sum()  # noqa: E731
        diam = np.linalg.norm(P.max(axis=0) - P.min(axis=0))
        fm = f(m)
        assert fm <= f(P.mean(axis=0)) + 1e-7 * diam
        for _ in range(100):
            assert fm <= f(m + rng.normal(size=3) * 1e-3 * diam) + 1e-7 * diam


def test_geometric_median_batch_matches_single():
    rng = np.random.default_rng(6)
    G = rng.random((25, 7, 3))
    B = geometric_median_batch(G)
    for i in range(25):
        assert np.allclose(B[i], geometric_median(G[i]), atol=1e-12)


# ---------------------------------------------------------------------------
# full k sites and the k-distance identity


def test_full_k_sites_counts():
    rng = np.random.default_rng(7)
    assert len(full_k_sites(rng.random((3, 3)), 2)) == 3
    P = rng.random((4, 3))
    c = full_k_sites(P, 4)
    assert len(c) == 1 and np.allclose(c.sites[0], P.mean(axis=0))
    with pytest.raises(ValueError):
        full_k_sites(rng.random((15, 3)), 2)
    with pytest.raises(ValueError):
        full_k_sites(rng.random((10, 3)), 5)


def test_full_k_two_points():
    P = np.array([[0, 0, 0], [1, 0, 0]], dtype=float)
    v, _ = power_distance(full_k_sites(P, 2), [0, 0, 0])
    assert v == pytest.approx(k_distance(P, 2, [0, 0, 0]))
    assert v == pytest.approx(math.sqrt(0.5))


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 12), st.integers(1, 3), st.integers(0, 2**31 - 1))
def test_k_distance_is_power_distance(n, k, seed):
    k = min(k, n)
    rng = np.random.default_rng(seed)
    P = rng.normal(size=(n, 3))
    X = rng.normal(size=(500, 3)) * 2
    pd = power_distance_many(full_k_sites(P, k), X)[0]
    assert np.allclose(pd, k_distance_many(P, k, X), rtol=0, atol=1e-9)


# ---------------------------------------------------------------------------
# distance-like properties


@pytest.mark.parametrize("kind,k", [("plain", 1), ("witnessed", 5), ("median", 5), ("k", 5)])
def test_one_lipschitz_and_semiconcave(kind, k):
    rng = np.random.default_rng(8)
    P = rng.random((200, 3))
    spec = DistanceLikeSpec(kind, k)
    X = rng.uniform(-0.5, 1.5, (2000, 3))
    Y = X + rng.normal(size=X.shape) * 0.1
    dx, dy = spec.evaluate(P, X), spec.evaluate(P, Y)
    assert np.all(np.abs(dx - dy) <= np.linalg.norm(X - Y, axis=1) + 1e-12)
    M = (X + Y) / 2
    g = lambda Z, d: d**2 - (Z**2).sum(axis=1)  # noqa: E731
    # concavity: value at the midpoint is at least the chord average
    assert np.all(g(M, spec.evaluate(P, M)) >= (g(X, dx) + g(Y, dy)) / 2 - 1e-9)


# ---------------------------------------------------------------------------
# grids


def test_grid_single_point_radial(tmp_path):
    nodes, vals = grid_eval(DistanceLikeSpec("plain"), np.zeros((1, 3)), ([-1] * 3, [1] * 3), 3)
    assert nodes.shape == (27, 3)
    assert np.allclose(vals, np.linalg.norm(nodes, axis=1))
    assert np.allclose(nodes[1], [-1, -1, 0])  # z runs fastest
    out = tmp_path / "g.csv"
    write_grid_csv(out, nodes, vals)
    lines = out.read_text().splitlines()
    assert lines[0] == "x,y,z,value" and len(lines) == 28
    back = np.array([[float(t) for t in ln.split(",")] for ln in lines[1:]])
    assert np.allclose(back[:, 3], vals, rtol=1e-9)


def test_grid_reductions():
    rng = np.random.default_rng(9)
    P = rng.random((10, 3))
    box = ([-0.2] * 3, [1.2] * 3)
    _, a = grid_eval(DistanceLikeSpec("witnessed", 1), P, box, 6)
    _, b = grid_eval(DistanceLikeSpec("plain", 1), P, box, 6)
    assert np.array_equal(a, b)
    _, kd = grid_eval(DistanceLikeSpec("k", 2), P, box, 6)
    _, fk = grid_eval(DistanceLikeSpec("full-k", 2), P, box, 6)
    assert np.allclose(kd, fk, rtol=0, atol=1e-9)


def test_grid_guard():
    with pytest.raises(ValueError):
        grid_nodes(([0] * 3, [1] * 3), 1025)
    with pytest.raises(ValueError):
        DistanceLikeSpec("bogus")
