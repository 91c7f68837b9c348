"""Distance-like functions of a point cloud and the weighted site sets behind them.

Every distance-like function used here is a power distance

    delta(x) = min_b sqrt(|x - b|^2 + w_b)

over some weighted site set.  The plain distance uses the points themselves
with zero weights; the witnessed and median k-distances replace each point by
the barycenter (resp. geometric median) of it and its k-1 nearest neighbours.
"""

from __future__ import annotations

import itertools
import logging
import math
from dataclasses import dataclass

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components
from scipy.spatial import cKDTree

log = logging.getLogger(__name__)

DEDUP_REL_TOL = 1e-12
FULL_K_MAX_N = 14
FULL_K_MAX_K = 4
GRID_MAX_SAMPLES = 1024**3

KINDS = ("plain", "witnessed", "median", "k", "full-k")


def _as_points(P) -> np.ndarray:
    P = np.asarray(P, dtype=float)
    if P.ndim == 1:
        P = P.reshape(1, 3)
    if P.ndim != 2 or P.shape[1] != 3:
        raise ValueError(f"expected an (n, 3) point array, got shape {P.shape}")
    if not np.all(np.isfinite(P)):
        raise ValueError("point coordinates must be finite")
    return P


def bbox_diameter(P) -> float:
    P = np.asarray(P, dtype=float)
    if len(P) == 0:
        return 0.0
    return float(np.linalg.norm(P.max(axis=0) - P.min(axis=0)))


@dataclass
class WeightedPointCloud:
    """Sites with non-negative weights (squared lengths).

    Build instances with :meth:`create` (or the site constructors below) to get
    the deduplication guarantee; the raw constructor trusts its input.
    """

    sites: np.ndarray
    weights: np.ndarray

    @classmethod
    def create(cls, sites, weights=None, dedup: bool = True, scale: float | None = None) -> "WeightedPointCloud":
        """Validate and deduplicate; ``scale`` (default: site diameter) sets the merge tolerance."""
        sites = _as_points(sites)
        if weights is None:
            weights = np.zeros(len(sites))
        weights = np.asarray(weights, dtype=float).reshape(-1)
        if weights.shape[0] != sites.shape[0]:
            raise ValueError("sites and weights differ in length")
        if np.any(weights < 0) or not np.all(np.isfinite(weights)):
            raise ValueError("weights must be finite and non-negative")
        if dedup:
            sites, weights = merge_duplicates(sites, weights, scale=scale)
        return cls(sites, weights)

    @classmethod
    def plain(cls, points) -> "WeightedPointCloud":
        return cls.create(points)

    def __len__(self) -> int:
        return len(self.sites)

    @property
    def diameter(self) -> float:
        return bbox_diameter(self.sites)


def merge_duplicates(sites, weights, rel_tol: float = DEDUP_REL_TOL, scale: float | None = None):
    """Merge sites closer than ``rel_tol * scale`` (scale defaults to their diameter).

    Each cluster keeps the position of its lowest index and its minimum
    weight; clusters are ordered by that lowest index.
    """
    n = len(sites)
    if n < 2:
        return sites, weights
    tol = rel_tol * (bbox_diameter(sites) if scale is None else scale)
    pairs = cKDTree(sites).query_pairs(tol, output_type="ndarray")
    if len(pairs) == 0:
        return sites, weights
    graph = coo_matrix((np.ones(len(pairs)), (pairs[:, 0], pairs[:, 1])), shape=(n, n))
    _, label = connected_components(graph, directed=False)
    first = np.full(label.max() + 1, n)
    np.minimum.at(first, label, np.arange(n))
    wmin = np.full(label.max() + 1, np.inf)
    np.minimum.at(wmin, label, weights)
    order = np.argsort(first, kind="stable")
    return sites[first[order]], wmin[order]


# ---------------------------------------------------------------------------
# nearest neighbours with index tie-breaking


def knn(tree: cKDTree, points: np.ndarray, X: np.ndarray, k: int, exclude=None):
    """k nearest neighbours of each row of ``X``, ties broken by lower index.

    ``exclude`` optionally gives, per query row, one index to leave out (used
    for "neighbours of p in P minus p").  Returns ``(idx, sqdist)``.
    """
    n = len(points)
    X = np.atleast_2d(X)
    extra = 1 if exclude is None else 2
    kk = min(n, k + extra)
    _, idx = tree.query(X, k=kk)
    idx = idx.reshape(len(X), kk)
    d2 = ((points[idx] - X[:, None, :]) ** 2).sum(axis=2)
    if exclude is not None:
        d2 = np.where(idx == np.asarray(exclude)[:, None], np.inf, d2)
    order = np.lexsort((idx, d2), axis=1)
    idx = np.take_along_axis(idx, order, axis=1)
    d2 = np.take_along_axis(d2, order, axis=1)
    out_idx = idx[:, :k].copy()
    out_d2 = d2[:, :k].copy()
    if kk > k:
        # a tie straddling position k may hide a lower index outside the query
        tied = np.flatnonzero(d2[:, k - 1] == d2[:, k])
        for row in tied:
            r = math.sqrt(d2[row, k - 1])
            cand = np.array(tree.query_ball_point(X[row], r * (1 + 1e-12) + 1e-300))
            if exclude is not None:
                cand = cand[cand != exclude[row]]
            cd2 = ((points[cand] - X[row]) ** 2).sum(axis=1)
            o = np.lexsort((cand, cd2))[:k]
            out_idx[row] = cand[o]
            out_d2[row] = cd2[o]
    return out_idx, out_d2


# ---------------------------------------------------------------------------
# evaluation


def power_distance(cloud: WeightedPointCloud, x) -> tuple[float, int]:
    """``min_p sqrt(|x-p|^2 + w_p)`` and the (lowest) index attaining it."""
    vals, idx = power_distance_many(cloud, np.asarray(x, dtype=float).reshape(1, 3))
    return float(vals[0]), int(idx[0])


def power_distance_many(cloud: WeightedPointCloud, X, tree: cKDTree | None = None):
    if len(cloud) == 0:
        raise ValueError("power distance of an empty cloud")
    X = _as_points(X)
    S, W = cloud.sites, cloud.weights
    n = len(S)
    if n <= 64:
        v, i = _power_brute(S, W, X)
        return np.sqrt(v), i
    if tree is None:
        tree = cKDTree(S)
    wmin = W.min()
    kk = min(n, 16)
    _, idx = tree.query(X, k=kk)
    d2 = ((S[idx] - X[:, None, :]) ** 2).sum(axis=2)
    val = d2 + W[idx]
    best = val.min(axis=1)
    # any winner must satisfy |x-p|^2 <= best - wmin
    need = (best - wmin) >= d2[:, -1]
    out_v = np.empty(len(X))
    out_i = np.empty(len(X), dtype=np.int64)
    ok = ~need
    if ok.any():
        v = val[ok]
        ii = idx[ok]
        m = v.min(axis=1, keepdims=True)
        cand = np.where(v == m, ii, n)
        out_i[ok] = cand.min(axis=1)
        out_v[ok] = m[:, 0]
    for row in np.flatnonzero(need):
        cand = np.sort(tree.query_ball_point(X[row], math.sqrt(best[row] - wmin) * (1 + 1e-12)))
        v, i = _power_brute(S[cand], W[cand], X[row : row + 1])
        out_v[row] = v[0]
        out_i[row] = cand[i[0]]
    return np.sqrt(out_v), out_i


def _power_brute(S, W, X, chunk: int = 4096):
    vals = np.empty(len(X))
    idx = np.empty(len(X), dtype=np.int64)
    for lo in range(0, len(X), chunk):
        x = X[lo : lo + chunk]
        v = ((x[:, None, :] - S[None]) ** 2).sum(axis=2) + W[None]
        i = np.argmin(v, axis=1)  # first occurrence = lowest index
        idx[lo : lo + chunk] = i
        vals[lo : lo + chunk] = v[np.arange(len(x)), i]
    return vals, idx


def k_distance(P, k: int, x) -> float:
    """Root mean squared distance from ``x`` to its k nearest points of ``P``."""
    return float(k_distance_many(P, k, np.asarray(x, dtype=float).reshape(1, 3))[0])


def k_distance_many(P, k: int, X, tree: cKDTree | None = None) -> np.ndarray:
    P = _as_points(P)
    if not 1 <= k <= len(P):
        raise ValueError(f"k must be in [1, {len(P)}], got {k}")
    X = _as_points(X)
    if tree is None:
        tree = cKDTree(P)
    # recompute squared distances exactly rather than squaring the tree's roots
    _, idx = tree.query(X, k=k)
    idx = np.asarray(idx).reshape(len(X), k)
    d2 = ((P[idx] - X[:, None, :]) ** 2).sum(axis=2)
    return np.sqrt(d2.mean(axis=1))


# ---------------------------------------------------------------------------
# site constructions


def witness_groups(P, k: int, tree: cKDTree | None = None) -> np.ndarray:
    """Row i = [i, (k-1) nearest neighbours of P[i] in P minus {P[i]}]."""
    P = _as_points(P)
    n = len(P)
    if k > n:
        raise ValueError(f"need at least k={k} points, got {n}")
    if tree is None:
        tree = cKDTree(P)
    if k == 1:
        return np.arange(n)[:, None]
    nbr, _ = knn(tree, P, P, k - 1, exclude=np.arange(n))
    return np.concatenate([np.arange(n)[:, None], nbr], axis=1)


def _weights_from_neighbours(P, tree, k, B, groups=None):
    idx, d2 = knn(tree, P, B, k)
    w = d2.mean(axis=1)
    if groups is not None and k > 1:
        mism = np.count_nonzero(np.sort(idx, axis=1) != np.sort(groups, axis=1), axis=1)
        n_bad = int(np.count_nonzero(mism))
        if n_bad:
            log.info("%d of %d witnesses have a neighbour set different from their group", n_bad, len(B))
    return w


def witnessed_sites(P, k: int) -> WeightedPointCloud:
    """Barycenters of each point with its k-1 nearest neighbours.

    The weight of a barycenter b is the mean squared distance from b to its
    own k nearest neighbours in P.
    """
    P = _as_points(P)
    if k < 1:
        raise ValueError("k must be >= 1")
    if k == 1:
        return WeightedPointCloud.create(P)
    tree = cKDTree(P)
    groups = witness_groups(P, k, tree)
    B = P[groups].mean(axis=1)
    w = _weights_from_neighbours(P, tree, k, B, groups)
    return WeightedPointCloud.create(B, w, scale=bbox_diameter(P))


def median_sites(P, k: int) -> WeightedPointCloud:
    """Like :func:`witnessed_sites` with the geometric median of each group."""
    P = _as_points(P)
    if k < 1:
        raise ValueError("k must be >= 1")
    if k == 1:
        return WeightedPointCloud.create(P)
    tree = cKDTree(P)
    groups = witness_groups(P, k, tree)
    B = geometric_median_batch(P[groups])
    w = _weights_from_neighbours(P, tree, k, B, groups)
    return WeightedPointCloud.create(B, w, scale=bbox_diameter(P))


def full_k_sites(P, k: int) -> WeightedPointCloud:
    """All C(n, k) isobarycenters, weighted by their group's mean squared spread.

    Exponential in k; guarded to n <= 14 and k <= 4.
    """
    P = _as_points(P)
    n = len(P)
    if n > FULL_K_MAX_N or k > FULL_K_MAX_K:
        raise ValueError(f"full k-site enumeration limited to n <= {FULL_K_MAX_N}, k <= {FULL_K_MAX_K}")
    if not 1 <= k <= n:
        raise ValueError(f"k must be in [1, {n}], got {k}")
    groups = np.array(list(itertools.combinations(range(n), k)))
    G = P[groups]
    B = G.mean(axis=1)
    w = ((G - B[:, None, :]) ** 2).sum(axis=2).mean(axis=1)
    return WeightedPointCloud.create(B, w, scale=bbox_diameter(P))


# ---------------------------------------------------------------------------
# geometric median


MEDIAN_MAX_ITER = 200


def geometric_median(points) -> np.ndarray:
    """Point minimising the sum of Euclidean distances to ``points``."""
    pts = _as_points(points)
    return geometric_median_batch(pts[None])[0]


def geometric_median_batch(groups) -> np.ndarray:
    """Weiszfeld iteration run on every group of an ``(m, k, 3)`` array at once."""
    G = np.asarray(groups, dtype=float)
    m, k, _ = G.shape
    x = G.mean(axis=1)
    if k <= 2:
        return x
    diam = np.linalg.norm(G.max(axis=1) - G.min(axis=1), axis=1)
    active = diam > 0
    land_tol = 1e-12 * diam
    step_tol = 1e-9 * diam
    landed = np.zeros(m, dtype=bool)
    for _ in range(MEDIAN_MAX_ITER):
        if not active.any():
            break
        a = np.flatnonzero(active)
        diff = G[a] - x[a, None, :]
        dist = np.linalg.norm(diff, axis=2)
        hit = (dist <= land_tol[a, None]).any(axis=1)
        if hit.any():
            landed[a[hit]] = True
            active[a[hit]] = False
            a, dist = a[~hit], dist[~hit]
        w = 1.0 / dist
        xn = (w[:, :, None] * G[a]).sum(axis=1) / w.sum(axis=1)[:, None]
        step = np.linalg.norm(xn - x[a], axis=1)
        x[a] = xn
        active[a[step < step_tol[a]]] = False
    for i in np.flatnonzero(landed):
        x[i] = _median_from_landing(G[i], x[i], diam[i])
    # a data point satisfying the optimality condition is the exact minimiser
    for i in range(m):
        if diam[i] > 0:
            x[i] = _snap_to_vertex(G[i], x[i], diam[i])
    return x


def _vertex_condition(pts, j, tol):
    p = pts[j]
    diff = p - pts
    dist = np.linalg.norm(diff, axis=1)
    same = dist <= tol
    grad = (diff[~same] / dist[~same, None]).sum(axis=0)
    return np.linalg.norm(grad), int(same.sum()), grad


def _snap_to_vertex(pts, x, diam):
    j = int(np.argmin(np.linalg.norm(pts - x, axis=1)))
    g, mult, _ = _vertex_condition(pts, j, 1e-12 * diam)
    return pts[j].copy() if g <= mult else x


def _median_from_landing(pts, x, diam):
    for _ in range(5):
        j = int(np.argmin(np.linalg.norm(pts - x, axis=1)))
        g, mult, grad = _vertex_condition(pts, j, 1e-12 * diam)
        if g <= mult:
            return pts[j].copy()
        # restart just off the vertex along the descent direction
        x = pts[j] - 1e-3 * diam * grad / g
        for _ in range(MEDIAN_MAX_ITER):
            dist = np.linalg.norm(pts - x, axis=1)
            if dist.min() <= 1e-12 * diam:
                break
            w = 1.0 / dist
            xn = (w[:, None] * pts).sum(axis=0) / w.sum()
            done = np.linalg.norm(xn - x) < 1e-9 * diam
            x = xn
            if done:
                return x
        else:
            return x
    return x


# ---------------------------------------------------------------------------
# spec objects and grids


@dataclass(frozen=True)
class DistanceLikeSpec:
    """Which distance-like function to build from a point cloud.

    ``kind`` is one of ``plain``, ``witnessed``, ``median``, ``k`` (exact
    k-distance, evaluation only) or ``full-k`` (all barycenters, tiny inputs).
    """

    kind: str = "plain"
    k: int = 1

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown distance kind {self.kind!r}; expected one of {KINDS}")
        if self.k < 1:
            raise ValueError("k must be >= 1")

    def sites(self, P) -> WeightedPointCloud:
        if self.kind == "plain":
            return WeightedPointCloud.create(P)
        if self.kind == "witnessed":
            return witnessed_sites(P, self.k)
        if self.kind == "median":
            return median_sites(P, self.k)
        if self.kind == "full-k":
            return full_k_sites(P, self.k)
        raise ValueError("the exact k-distance has no tractable site set; use 'full-k' on tiny inputs")

    def evaluate(self, P, X) -> np.ndarray:
        P = _as_points(P)
        if not self.k <= len(P):
            raise ValueError(f"k={self.k} exceeds the number of points {len(P)}")
        if self.kind == "k":
            return k_distance_many(P, self.k, X)
        return power_distance_many(self.sites(P), X)[0]


def grid_nodes(bbox, resolution) -> np.ndarray:
    """Row-major (x slowest, z fastest) nodes of a regular grid over ``bbox``."""
    lo, hi = (np.asarray(b, dtype=float) for b in bbox)
    res = np.broadcast_to(np.asarray(resolution, dtype=int), (3,))
    if np.any(res < 1):
        raise ValueError("grid resolution must be >= 1 per axis")
    if int(np.prod(res.astype(object))) > GRID_MAX_SAMPLES:
        raise ValueError(f"grid has more than {GRID_MAX_SAMPLES} nodes")
    axes = [np.linspace(lo[i], hi[i], res[i]) if res[i] > 1 else np.array([(lo[i] + hi[i]) / 2]) for i in range(3)]
    gx, gy, gz = np.meshgrid(*axes, indexing="ij")
    return np.stack([gx.ravel(), gy.ravel(), gz.ravel()], axis=1)


def grid_eval(spec: DistanceLikeSpec, P, bbox, resolution):
    """Evaluate a distance-like function on a grid; returns ``(nodes, values)``."""
    nodes = grid_nodes(bbox, resolution)
    return nodes, spec.evaluate(P, nodes)


def write_grid_csv(path, nodes, values) -> None:
    with open(path, "w") as fh:
        fh.write("x,y,z,value\n")
        for (x, y, z), v in zip(nodes, values):
            fh.write(f"{x:.12g},{y:.12g},{z:.12g},{v:.12g}\n")
