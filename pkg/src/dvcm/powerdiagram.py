"""Bounded power cells ``Pow(p) ∩ (p + sqrt(R^2 - w_p) B)`` for weighted sites.

Each cell is built independently by clipping the scaled polyball with the
bisector half-spaces of nearby sites.  A site q can only matter if its
bisector plane comes closer to p than the farthest vertex of the current
cell; with ``rho`` that distance this needs

    |q - p| < rho + sqrt(rho^2 + max(w_p - w_q, 0)),

so neighbours are visited in distance order until the bound is passed.
"""

from __future__ import annotations

import logging
import math
from contextlib import contextmanager
from dataclasses import dataclass
from functools import lru_cache

import numba
import numpy as np
from scipy.spatial import cKDTree

from . import _kernels
from .distlike import WeightedPointCloud
from .geom import ConvexPolytope, HalfSpace, PolyBall, clip, get_polyball, polytope_volume_and_moment

log = logging.getLogger(__name__)

_E1 = np.array([1.0, 0.0, 0.0])


def bisector(p, wp: float, q, wq: float, p_wins_ties: bool = True) -> HalfSpace:
    """Half-space of points at least as close (in power) to p as to q.

    Coincident sites give a degenerate half-space: offset ``+inf`` when p keeps
    everything, ``-inf`` when p's cell is empty.  Equal weights at the same
    position are settled by ``p_wins_ties`` (normally "p has the lower index").
    """
    p = np.asarray(p, dtype=float)
    q = np.asarray(q, dtype=float)
    diff = q - p
    d = float(np.linalg.norm(diff))
    if d == 0.0:
        if wp < wq or (wp == wq and p_wins_ties):
            return HalfSpace(_E1, math.inf)
        return HalfSpace(_E1, -math.inf)
    n = diff / d
    t = (d * d + wq - wp) / (2.0 * d)
    return HalfSpace(n, float(n @ p) + t)


@dataclass
class PowerCellRequest:
    cloud: WeightedPointCloud
    index: int
    R: float
    ball: PolyBall | str = "dodeca"

    def __post_init__(self):
        if not self.R > 0:
            raise ValueError(f"R must be positive, got {self.R!r}")
        self.ball = get_polyball(self.ball)


@lru_cache(maxsize=None)
def _unit_polytope(tag: str) -> ConvexPolytope:
    return get_polyball(tag).polytope(1.0)


def scaled_polyball(ball: PolyBall, radius: float, center) -> ConvexPolytope:
    """The polyball polytope scaled by ``radius`` about ``center``."""
    unit = _unit_polytope(ball.tag)
    center = np.asarray(center, dtype=float)
    planes = [HalfSpace(h.normal, radius * h.offset + h.normal @ center) for h in unit.planes]
    return ConvexPolytope(unit.vertices * radius + center, [list(f) for f in unit.faces], planes, unit.scale * radius)


def _initial(req: PowerCellRequest):
    S, W = req.cloud.sites, req.cloud.weights
    r2 = req.R * req.R - W[req.index]
    if r2 <= 0.0:
        return None
    return scaled_polyball(req.ball, math.sqrt(r2), S[req.index])


def _clip_by_site(poly, cloud, i, j):
    S, W = cloud.sites, cloud.weights
    return clip(poly, bisector(S[i], W[i], S[j], W[j], p_wins_ties=i < j))


def build_cell(req: PowerCellRequest, tree: cKDTree | None = None) -> ConvexPolytope:
    """Bounded power cell of one site, visiting neighbours in distance order."""
    poly = _initial(req)
    if poly is None:
        return ConvexPolytope.empty()
    cloud, i = req.cloud, req.index
    S, W = cloud.sites, cloud.weights
    p = S[i]
    wslack = max(W[i] - W.min(), 0.0)
    rho = _rho(poly, p)
    bound = rho + math.sqrt(rho * rho + wslack)
    if tree is None:
        cand = np.arange(len(S))
    else:
        cand = np.asarray(tree.query_ball_point(p, bound * (1 + 1e-9)), dtype=np.int64)
    d2 = ((S[cand] - p) ** 2).sum(axis=1)
    o = np.lexsort((cand, d2))
    # the bound only shrinks, so the first query already holds every relevant site
    for j, dj in zip(cand[o], np.sqrt(d2[o])):
        if dj >= bound:
            break
        if j == i:
            continue
        new = _clip_by_site(poly, cloud, i, j)
        if new is not poly:
            poly = new
            if poly.is_empty:
                return poly
            rho = _rho(poly, p)
            bound = rho + math.sqrt(rho * rho + wslack)
    return poly


def _rho(poly, p) -> float:
    if poly.is_empty:
        return 0.0
    return float(np.sqrt(((poly.vertices - p) ** 2).sum(axis=1).max()))


def build_cell_bruteforce(req: PowerCellRequest) -> ConvexPolytope:
    """Clip by the bisector of every other site, in index order (oracle)."""
    poly = _initial(req)
    if poly is None:
        return ConvexPolytope.empty()
    for j in range(len(req.cloud)):
        if j == req.index:
            continue
        poly = _clip_by_site(poly, req.cloud, req.index, j)
        if poly.is_empty:
            break
    return poly


def build_all_cells(cloud: WeightedPointCloud, R: float, ball="dodeca", bruteforce: bool = False) -> list:
    """One bounded cell per site, ordered by site index (pure-Python path)."""
    ball = get_polyball(ball)
    tree = None if bruteforce else cKDTree(cloud.sites)
    out = []
    for i in range(len(cloud)):
        req = PowerCellRequest(cloud, i, R, ball)
        out.append(build_cell_bruteforce(req) if bruteforce else build_cell(req, tree))
    return out


def cell_moments_python(cloud: WeightedPointCloud, R: float, ball="dodeca", bruteforce: bool = False):
    """Volumes and second moments about each site from :func:`build_all_cells`."""
    cells = build_all_cells(cloud, R, ball, bruteforce)
    vols = np.zeros(len(cells))
    moms = np.zeros((len(cells), 3, 3))
    for i, c in enumerate(cells):
        vols[i], moms[i] = polytope_volume_and_moment(c, cloud.sites[i])
    return vols, moms


# ---------------------------------------------------------------------------
# compiled path


@contextmanager
def thread_count(threads: int | None):
    if threads is None:
        yield
        return
    old = numba.get_num_threads()
    numba.set_num_threads(max(1, min(int(threads), numba.config.NUMBA_NUM_THREADS)))
    try:
        yield
    finally:
        numba.set_num_threads(old)


_KNN = 24
_VMAX = 128


def _sym(m6: np.ndarray) -> np.ndarray:
    out = np.empty((len(m6), 3, 3))
    out[:, 0, 0] = m6[:, 0]
    out[:, 0, 1] = out[:, 1, 0] = m6[:, 1]
    out[:, 0, 2] = out[:, 2, 0] = m6[:, 2]
    out[:, 1, 1] = m6[:, 3]
    out[:, 1, 2] = out[:, 2, 1] = m6[:, 4]
    out[:, 2, 2] = m6[:, 5]
    return out


def cell_moments(
    cloud: WeightedPointCloud,
    R: float,
    ball="dodeca",
    threads: int | None = None,
    tree: cKDTree | None = None,
):
    """Volume, second moment about the site, and circumradius of every cell.

    Pass one clips each cell by its nearest neighbours.  The power difference
    between p and q is affine, so q can cut that cell only if it beats p at
    one of the cell's vertices v, i.e. lies within
    ``sqrt(|v - p|^2 + w_p - w_min)`` of v.  Sites with such candidates
    outside their first neighbour list are rebuilt with all of them.
    """
    if not R > 0:
        raise ValueError(f"R must be positive, got {R!r}")
    ball = get_polyball(ball)
    S = np.ascontiguousarray(cloud.sites, dtype=np.float64)
    W = np.ascontiguousarray(cloud.weights, dtype=np.float64)
    n = len(S)
    if n == 0:
        return np.zeros(0), np.zeros((0, 3, 3)), np.zeros(0)
    if tree is None:
        tree = cKDTree(S)
    pbn = np.ascontiguousarray(ball.normals)
    pbo = np.ascontiguousarray(ball.offsets)
    circ = ball.circumradius
    fmax, kmax = 96 + len(pbn) // 4, 48

    kk = min(n, _KNN + 1)
    _, idx = tree.query(S, k=kk)
    idx = idx.reshape(n, kk)
    knn = np.where(idx == np.arange(n)[:, None], -1, idx)
    knn = np.take_along_axis(knn, np.argsort(knn < 0, axis=1, kind="stable"), axis=1)[:, : max(kk - 1, 1)]
    knn = np.ascontiguousarray(knn)
    if kk == 1:
        knn[:] = -1

    wmin = W.min()
    kd = _kernels.build_kdtree(S)
    with thread_count(threads):
        vols, rho, m6, verts, nverts = _run_knn(S, W, R, pbn, pbo, circ, knn, fmax, kmax)
        cmax = 4096
        todo = rho > 0
        while todo.any():
            mask = np.where(todo, rho, 0.0)
            redo, v, r, m, st = _kernels.cells_refine(
                S, W, R, pbn, pbo, circ, knn, mask, verts, nverts, wmin, kd, fmax, kmax, cmax, _KNN
            )
            done = redo & (st == _kernels.OK)
            vols[done], rho[done], m6[done] = v[done], r[done], m[done]
            todo = redo & (st != _kernels.OK)
            log.debug("refined %d cells, %d to retry", int(done.sum()), int(todo.sum()))
            if todo.any():
                fmax, kmax, cmax = 2 * fmax, 2 * kmax, 4 * cmax
                _check_growth(fmax, int(todo.sum()))
    return vols, _sym(m6), rho


def _run_knn(S, W, R, pbn, pbo, circ, knn, fmax, kmax):
    todo = np.arange(len(S))
    vol, rho, mom, status, verts, nverts = _kernels.cells_knn(S, W, R, pbn, pbo, circ, knn, fmax, kmax, todo, _VMAX)
    bad = np.flatnonzero(status != _kernels.OK)
    while len(bad):
        fmax, kmax = 4 * fmax, 2 * kmax
        _check_growth(fmax, len(bad))
        sub = _kernels.cells_knn(S, W, R, pbn, pbo, circ, np.ascontiguousarray(knn[bad]), fmax, kmax, todo[bad], _VMAX)
        vol[bad], rho[bad], mom[bad], status[bad], verts[bad], nverts[bad] = sub
        bad = bad[sub[3] != _kernels.OK]
    return vol, rho, mom, verts, nverts


def _check_growth(fmax, count):
    log.debug("retrying %d cells with %d face slots", count, fmax)
    if fmax > 1 << 16:
        raise RuntimeError("cell construction keeps overflowing its buffers")


def write_cells_obj(path, cells) -> None:
    """Dump cells as an OBJ polygon soup, one object per non-empty cell."""
    with open(path, "w") as fh:
        base = 1
        for i, c in enumerate(cells):
            if c.is_empty:
                continue
            fh.write(f"o cell_{i}\n")
            for v in c.vertices:
                fh.write(f"v {v[0]:.12g} {v[1]:.12g} {v[2]:.12g}\n")
            for ring in c.faces:
                fh.write("f " + " ".join(str(base + k) for k in ring) + "\n")
            base += len(c.vertices)
