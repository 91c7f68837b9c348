import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dvcm.geom import (
    ConvexPolytope,
    HalfSpace,
    clip,
    get_polyball,
    icosphere,
    make_polyball,
    polytope_second_moment,
    polytope_volume_and_moment,
    sym_eigen,
    sym_eigen_batch,
    tetra_second_moment,
)

CUBE = ConvexPolytope.box([-1, -1, -1], [1, 1, 1])
E = np.eye(3)


def unit(v):
    v = np.asarray(v, dtype=float)
    return v / np.linalg.norm(v)


def random_polytope(rng, cuts=6):
    poly = ConvexPolytope.box([-1, -1, -1], [1, 1, 1])
    for _ in range(cuts):
        n = unit(rng.normal(size=3))
        new = clip(poly, HalfSpace(n, rng.uniform(0.0, 0.9)))
        if not new.is_empty:
            poly = new
    return poly


def point_in(poly, X):
    inside = np.ones(len(X), dtype=bool)
    for h in poly.planes:
        inside &= X @ h.normal <= h.offset
    return inside


# ---------------------------------------------------------------------------
# clip


def test_clip_half_cube():
    half = clip(CUBE, HalfSpace(E[0], 0.0))
    assert half.volume() == pytest.approx(4.0, rel=1e-12)
    assert np.allclose(half.vertices.min(axis=0), [-1, -1, -1])
    assert np.allclose(half.vertices.max(axis=0), [0, 1, 1])


def test_clip_identity_and_empty():
    same = clip(CUBE, HalfSpace(E[0], 2.0))
    assert same.volume() == pytest.approx(8.0)
    assert len(same.vertices) == 8 and len(same.faces) == 6
    gone = clip(CUBE, HalfSpace(E[0], -2.0))
    assert gone.is_empty
    assert polytope_second_moment(gone, np.zeros(3)).tolist() == np.zeros((3, 3)).tolist()


def test_clip_vertices_on_plane_and_euler():
    rng = np.random.default_rng(1)
    for _ in range(50):
        n = unit(rng.normal(size=3))
        b = rng.uniform(-0.8, 0.8)
        p = clip(CUBE, HalfSpace(n, b))
        assert p.euler_characteristic() == 2
        d = p.vertices @ n - b
        assert d.max() <= 1e-9 * CUBE.scale
        on = np.abs(d) <= 1e-9 * CUBE.scale
        assert on.sum() >= 3


def test_face_rings_planar_and_outward():
    rng = np.random.default_rng(2)
    p = random_polytope(rng, 8)
    for ring, h in zip(p.faces, p.planes):
        d = p.vertices[ring] @ h.normal - h.offset
        assert np.abs(d).max() <= 1e-9 * p.scale
        v = p.vertices[ring]
        area = sum(np.cross(v[i], v[(i + 1) % len(v)]) for i in range(len(v)))
        assert area @ h.normal > 0


@settings(max_examples=60, deadline=None)
@given(
    st.lists(st.floats(-1, 1), min_size=3, max_size=3).filter(lambda v: np.linalg.norm(v) > 1e-3),
    st.floats(-2, 2),
)
def test_clip_monotone(normal, offset):
    n = unit(normal)
    base = clip(CUBE, HalfSpace(unit([1, 2, 3]), 0.7))
    out = clip(base, HalfSpace(n, offset))
    assert out.volume() <= base.volume() * (1 + 1e-12)


def test_halfspace_requires_unit_normal():
    with pytest.raises(ValueError):
        HalfSpace([2.0, 0, 0], 1.0)
    h = HalfSpace.from_plane([2.0, 0, 0], 2.0)
    assert h.offset == 1.0


# ---------------------------------------------------------------------------
# moments


def test_tetra_canonical_simplex():
    T, v = tetra_second_moment(np.zeros(3), E[0], E[1], E[2], np.zeros(3))
    assert v == pytest.approx(1 / 6, abs=1e-15)
    expect = np.full((3, 3), 1 / 120) + np.eye(3) / 120
    assert np.allclose(T, expect, atol=1e-15)
    T2, v2 = tetra_second_moment(E[0], np.zeros(3), E[1], E[2], np.zeros(3))
    assert v2 == pytest.approx(-1 / 6)
    assert np.allclose(T2, -expect, atol=1e-15)


def test_tetra_degenerate():
    T, v = tetra_second_moment(E[0], E[0], E[1], E[2], np.zeros(3))
    assert v == 0 and np.all(T == 0)


def test_tetra_additive_under_barycentric_subdivision():
    rng = np.random.default_rng(3)
    for _ in range(20):
        a, b, c, d = rng.normal(size=(4, 3))
        base = rng.normal(size=3)
        whole, vol = tetra_second_moment(a, b, c, d, base)
        g = (a + b + c + d) / 4
        parts = [
            tetra_second_moment(g, b, c, d, base),
            tetra_second_moment(a, g, c, d, base),
            tetra_second_moment(a, b, g, d, base),
            tetra_second_moment(a, b, c, g, base),
        ]
        assert sum(p[1] for p in parts) == pytest.approx(vol, rel=1e-12)
        assert np.allclose(sum(p[0] for p in parts), whole, rtol=1e-11, atol=1e-13 * np.abs(whole).max())


def test_cube_moments():
    assert np.allclose(polytope_second_moment(CUBE, np.zeros(3)), np.eye(3) * 8 / 3, atol=1e-14)
    shifted = ConvexPolytope.box([0, 0, 0], [2, 2, 2])
    assert np.allclose(polytope_second_moment(shifted, np.ones(3)), np.eye(3) * 8 / 3, atol=1e-13)


def test_moment_matches_monte_carlo():
    rng = np.random.default_rng(4)
    N = 10**6
    for _ in range(100):
        poly = random_polytope(rng)
        base = rng.uniform(-0.5, 0.5, 3)
        _, M = polytope_volume_and_moment(poly, base)
        lo, hi = poly.vertices.min(axis=0), poly.vertices.max(axis=0)
        X = lo + (hi - lo) * rng.random((N, 3))
        inside = point_in(poly, X)
        Y = X - base
        f = np.einsum("ni,nj->nij", Y, Y) * inside[:, None, None]
        box = np.prod(hi - lo)
        est = box * f.mean(axis=0)
        se = box * f.std(axis=0) / math.sqrt(N)
        assert np.all(np.abs(est - M) <= 3 * se + 1e-12), (est, M, se)


# ---------------------------------------------------------------------------
# eigen


def test_sym_eigen_examples():
    vals, vecs = sym_eigen(np.diag([3.0, 2.0, 1.0]))
    assert np.allclose(vals, [3, 2, 1])
    assert np.allclose(vecs[:, 0], E[0])
    vals, vecs = sym_eigen(np.eye(3))
    assert np.allclose(vals, 1)
    assert np.allclose(vecs.T @ vecs, np.eye(3), atol=1e-12)
    n = E[2]
    vals, vecs = sym_eigen(np.outer(n, n))
    assert np.allclose(vals, [1, 0, 0], atol=1e-15)
    assert np.allclose(vecs[:, 0], E[2])


def test_sym_eigen_sign_convention():
    vals, vecs = sym_eigen(np.outer([0, -1, 0], [0, -1, 0]) * 2 + np.eye(3) * 0.1)
    assert np.allclose(vecs[:, 0], E[1])
    # exact tie between the two leading components goes to the lower axis
    v = unit([-1.0, 1.0, 0.0])
    _, vecs = sym_eigen(np.outer(v, v))
    assert vecs[0, 0] > 0


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(-10, 10), min_size=9, max_size=9))
def test_sym_eigen_spd_properties(entries):
    A = np.array(entries).reshape(3, 3)
    t = A @ A.T + 1e-6 * np.eye(3)
    vals, vecs = sym_eigen(t)
    tr = np.trace(t)
    assert abs(vals.sum() - tr) <= 1e-9 * tr
    assert np.all(np.diff(vals) <= 0)
    assert np.allclose(vecs.T @ vecs, np.eye(3), atol=1e-9)
    recon = (vecs * vals) @ vecs.T
    assert np.linalg.norm(t - recon) <= 1e-9 * (1 + np.linalg.norm(t))


def test_sym_eigen_batch_matches_single():
    rng = np.random.default_rng(5)
    A = rng.normal(size=(20, 3, 3))
    T = A @ np.swapaxes(A, 1, 2)
    vals, vecs = sym_eigen_batch(T)
    for i in range(20):
        v1, w1 = sym_eigen(T[i])
        assert np.array_equal(v1, vals[i]) and np.array_equal(w1, vecs[i])


# ---------------------------------------------------------------------------
# polyballs


def test_dodecahedron_halfspaces():
    hs = make_polyball("dodeca", 1.0, np.zeros(3))
    assert len(hs) == 12
    assert all(h.offset == pytest.approx(1.0) for h in hs)
    moved = make_polyball("dodeca", 2.0, [1.0, 0, 0])
    for h0, h in zip(hs, moved):
        assert h.offset == pytest.approx(2.0 + h0.normal[0])


def test_dodecahedron_is_circumscribed():
    poly = get_polyball("dodeca").polytope(1.0)
    assert len(poly.faces) == 12 and len(poly.vertices) == 20
    r = np.linalg.norm(poly.vertices, axis=1)
    assert np.allclose(r, r[0]) and r[0] > 1.0
    assert r[0] == pytest.approx(get_polyball("dodeca").circumradius, rel=1e-12)
    assert poly.euler_characteristic() == 2


def test_icosphere_counts_and_inscription():
    assert len(make_polyball("ico0", 1.0)) == 20
    for level in range(4):
        verts, faces = icosphere(level)
        assert len(faces) == 20 * 4**level
        assert np.allclose(np.linalg.norm(verts, axis=1), 1.0)
        assert len(verts) - 30 * 4**level + len(faces) == 2


def test_icosphere_trace_converges_to_ball():
    ball = 3 * 4 * math.pi / 15
    ratios = []
    for level in range(5):
        p = get_polyball(f"ico{level}").polytope(1.0)
        ratios.append(np.trace(polytope_second_moment(p, np.zeros(3))) / ball)
    assert all(a < b for a, b in zip(ratios, ratios[1:]))
    assert ratios[-1] < 1.0
    assert 1 - ratios[3] < 0.015
    assert 1 - ratios[4] < 0.005


def test_polyball_errors():
    with pytest.raises(ValueError):
        make_polyball("cube", 1.0)
    with pytest.raises(ValueError):
        make_polyball("ico6", 1.0)
    with pytest.raises(ValueError):
        make_polyball("dodeca", 0.0)
    assert get_polyball(("icosphere", 2)).tag == "ico2"
    assert get_polyball("icosphere3").tag == "ico3"
