"""Low-level 3D geometry: half-spaces, convex cells, second moments, eigenframes.

Everything here works on plain numpy arrays.  A "vector" is a length-3 float
array and a symmetric tensor is a (3, 3) array that is symmetric by
construction.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

# relative tolerance for on-plane / empty decisions, scaled by cell diameter
REL_TOL = 1e-9


@dataclass(frozen=True)
class HalfSpace:
    """The closed half-space ``{x : normal . x <= offset}``."""

    normal: np.ndarray
    offset: float

    def __post_init__(self):
        n = np.asarray(self.normal, dtype=float).reshape(3)
        object.__setattr__(self, "normal", n)
        object.__setattr__(self, "offset", float(self.offset))
        if math.isfinite(self.offset) and abs(np.linalg.norm(n) - 1.0) > 1e-12:
            raise ValueError(f"half-space normal must be unit length, got |n|={np.linalg.norm(n)!r}")

    @classmethod
    def from_plane(cls, normal, offset) -> "HalfSpace":
        """Normalise an arbitrary (non-zero) normal and rescale the offset."""
        normal = np.asarray(normal, dtype=float)
        norm = np.linalg.norm(normal)
        if norm == 0.0:
            raise ValueError("zero plane normal")
        return cls(normal / norm, offset / norm)

    def signed_distance(self, pts) -> np.ndarray:
        return np.asarray(pts, dtype=float) @ self.normal - self.offset


@dataclass
class ConvexPolytope:
    """Bounded convex cell stored as vertices plus outward face rings.

    ``planes[i]`` is the supporting half-space of ``faces[i]``.  ``scale`` is the
    diameter of the cell the polytope was cut from; tolerances are relative to
    it so they stay stable while the cell shrinks.
    """

    vertices: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))
    faces: list = field(default_factory=list)
    planes: list = field(default_factory=list)
    scale: float = 1.0

    @classmethod
    def empty(cls, scale: float = 1.0) -> "ConvexPolytope":
        return cls(np.zeros((0, 3)), [], [], scale)

    @classmethod
    def box(cls, lo, hi) -> "ConvexPolytope":
        lo = np.asarray(lo, dtype=float)
        hi = np.asarray(hi, dtype=float)
        x0, y0, z0 = lo
        x1, y1, z1 = hi
        verts = np.array(
            [
                [x0, y0, z0], [x1, y0, z0], [x1, y1, z0], [x0, y1, z0],
                [x0, y0, z1], [x1, y0, z1], [x1, y1, z1], [x0, y1, z1],
            ]
        )
        # rings are counter-clockwise seen from outside
        faces = [
            [0, 3, 2, 1],  # z = z0
            [4, 5, 6, 7],  # z = z1
            [0, 1, 5, 4],  # y = y0
            [2, 3, 7, 6],  # y = y1
            [0, 4, 7, 3],  # x = x0
            [1, 2, 6, 5],  # x = x1
        ]
        e = np.eye(3)
        planes = [
            HalfSpace(-e[2], -z0), HalfSpace(e[2], z1),
            HalfSpace(-e[1], -y0), HalfSpace(e[1], y1),
            HalfSpace(-e[0], -x0), HalfSpace(e[0], x1),
        ]
        return cls(verts, faces, planes, float(np.linalg.norm(hi - lo)))

    @classmethod
    def from_halfspaces(cls, halfspaces, center=None, bound: float | None = None) -> "ConvexPolytope":
        """Intersect half-spaces, starting from a box of half-size ``bound``.

        The caller must make sure the box contains the bounded intersection.
        """
        halfspaces = list(halfspaces)
        if center is None:
            center = np.zeros(3)
        center = np.asarray(center, dtype=float)
        if bound is None:
            bound = 2.0 * max(abs(h.offset - h.normal @ center) for h in halfspaces) + 1.0
        poly = cls.box(center - bound, center + bound)
        for h in halfspaces:
            poly = clip(poly, h)
            if poly.is_empty:
                break
        return poly

    @property
    def is_empty(self) -> bool:
        return len(self.faces) == 0

    def edges(self) -> set:
        out = set()
        for ring in self.faces:
            for a, b in zip(ring, ring[1:] + ring[:1]):
                out.add((min(a, b), max(a, b)))
        return out

    def euler_characteristic(self) -> int:
        return len(self.vertices) - len(self.edges()) + len(self.faces)

    def centroid_estimate(self) -> np.ndarray:
        return self.vertices.mean(axis=0)

    def diameter(self) -> float:
        if self.is_empty:
            return 0.0
        return float(np.linalg.norm(self.vertices.max(axis=0) - self.vertices.min(axis=0)))

    def volume(self) -> float:
        return polytope_volume_and_moment(self, np.zeros(3))[0]


def clip(poly: ConvexPolytope, h: HalfSpace) -> ConvexPolytope:
    """Return ``poly`` intersected with ``h``.

    Vertices within ``REL_TOL * poly.scale`` of the plane are treated as lying
    on it.  An empty intersection comes back as an empty polytope.
    """
    if poly.is_empty:
        return poly
    if h.offset == math.inf:
        return poly
    if h.offset == -math.inf:
        return ConvexPolytope.empty(poly.scale)

    V = poly.vertices
    d = V @ h.normal - h.offset
    eps = REL_TOL * poly.scale
    d[np.abs(d) <= eps] = 0.0
    if np.all(d <= 0.0):
        return poly
    if not np.any(d < 0.0):
        return ConvexPolytope.empty(poly.scale)

    new_verts: list = []
    on_plane: list = []
    remap = {}
    for i in np.flatnonzero(d <= 0.0):
        remap[int(i)] = len(new_verts)
        new_verts.append(V[i])
        on_plane.append(d[i] == 0.0)

    cut_cache = {}

    def cut(i, j):
        key = (i, j) if i < j else (j, i)
        idx = cut_cache.get(key)
        if idx is None:
            a, b = key
            t = d[a] / (d[a] - d[b])
            idx = len(new_verts)
            new_verts.append(V[a] + t * (V[b] - V[a]))
            on_plane.append(True)
            cut_cache[key] = idx
        return idx

    faces = []
    planes = []
    cap_next = {}
    for ring, plane in zip(poly.faces, poly.planes):
        out = []
        m = len(ring)
        for s in range(m):
            i = ring[s]
            j = ring[(s + 1) % m]
            if d[i] <= 0.0:
                out.append(remap[i])
            if (d[i] < 0.0 < d[j]) or (d[j] < 0.0 < d[i]):
                out.append(cut(i, j))
        if len(out) < 3:
            continue
        flags = [on_plane[v] for v in out]
        if all(flags):
            # face lies in the cutting plane; the cap replaces it
            continue
        m = len(out)
        for s in range(m):
            a, b = out[s], out[(s + 1) % m]
            if flags[s] and flags[(s + 1) % m]:
                cap_next[b] = a
        faces.append(out)
        planes.append(plane)

    cap = _chain(cap_next)
    if cap is None:
        cap = _angular_ring(new_verts, sorted(set(cap_next) | set(cap_next.values())), h.normal)
    if len(cap) >= 3:
        faces.append(cap)
        planes.append(h)

    if not faces:
        return ConvexPolytope.empty(poly.scale)
    used = sorted({v for ring in faces for v in ring})
    compact = {old: new for new, old in enumerate(used)}
    verts = np.array([new_verts[v] for v in used])
    faces = [[compact[v] for v in ring] for ring in faces]
    return ConvexPolytope(verts, faces, planes, poly.scale)


def _chain(nxt: dict):
    if len(nxt) < 3:
        return [] if not nxt else None
    start = min(nxt)
    ring = [start]
    cur = nxt[start]
    while cur != start:
        ring.append(cur)
        if len(ring) > len(nxt) or cur not in nxt:
            return None
        cur = nxt[cur]
    if len(ring) != len(nxt):
        return None
    return ring


def _angular_ring(verts, idx, normal):
    if len(idx) < 3:
        return []
    pts = np.array([verts[i] for i in idx])
    c = pts.mean(axis=0)
    u, w = _plane_basis(normal)
    rel = pts - c
    ang = np.arctan2(rel @ w, rel @ u)
    return [idx[i] for i in np.argsort(ang, kind="stable")]


def _plane_basis(normal):
    n = np.asarray(normal, dtype=float)
    a = np.eye(3)[int(np.argmin(np.abs(n)))]
    u = np.cross(n, a)
    u /= np.linalg.norm(u)
    w = np.cross(n, u)
    return u, w


def tetra_second_moment(a, b, c, d, base=(0.0, 0.0, 0.0)):
    """Signed second moment of tetrahedron ``abcd`` about ``base``.

    Returns ``(T, vol)`` where ``T = sign * int_T (x-base)(x-base)^T dx`` and
    ``vol`` is the signed volume ``det[b-a, c-a, d-a] / 6``.
    """
    base = np.asarray(base, dtype=float)
    v = np.array([a, b, c, d], dtype=float) - base
    vol = np.linalg.det(np.array([v[1] - v[0], v[2] - v[0], v[3] - v[0]])) / 6.0
    s = v.sum(axis=0)
    T = vol / 20.0 * (v.T @ v + np.outer(s, s))
    return T, float(vol)


def _tetra_moments(apex, tri):
    """Vectorised signed moments of tetrahedra (apex, tri[i,0], tri[i,1], tri[i,2])."""
    v1 = tri[:, 0] - apex
    v2 = tri[:, 1] - apex
    v3 = tri[:, 2] - apex
    vol = np.einsum("ij,ij->i", v1, np.cross(v2, v3)) / 6.0
    s = apex[None, :] + tri.sum(axis=1)
    # sum over the four vertices of v v^T, plus s s^T
    outer = (
        np.einsum("i,j->ij", apex, apex)[None]
        + np.einsum("ki,kj->kij", tri[:, 0], tri[:, 0])
        + np.einsum("ki,kj->kij", tri[:, 1], tri[:, 1])
        + np.einsum("ki,kj->kij", tri[:, 2], tri[:, 2])
        + np.einsum("ki,kj->kij", s, s)
    )
    return vol, (vol / 20.0)[:, None, None] * outer


def polytope_volume_and_moment(poly: ConvexPolytope, base) -> tuple[float, np.ndarray]:
    """Volume and second moment of ``poly`` about ``base`` via a signed tetra fan."""
    if poly.is_empty:
        return 0.0, np.zeros((3, 3))
    base = np.asarray(base, dtype=float)
    V = poly.vertices - base
    apex = V.mean(axis=0)
    tris = []
    for ring in poly.faces:
        r0 = ring[0]
        for s in range(1, len(ring) - 1):
            tris.append((r0, ring[s], ring[s + 1]))
    tri = V[np.array(tris)]
    vol, mom = _tetra_moments(apex, tri)
    return float(vol.sum()), mom.sum(axis=0)


def polytope_second_moment(poly: ConvexPolytope, base) -> np.ndarray:
    """``int_poly (x-base)(x-base)^T dx``; zero for an empty polytope."""
    return polytope_volume_and_moment(poly, base)[1]


def sym_eigen(t) -> tuple[np.ndarray, np.ndarray]:
    """Eigen-decomposition of a symmetric 3x3 tensor.

    Returns ``(values, vectors)`` with values sorted in decreasing order and
    ``vectors[:, i]`` the unit eigenvector of ``values[i]``.
    """
    vals, vecs = sym_eigen_batch(np.asarray(t, dtype=float)[None])
    return vals[0], vecs[0]


def sym_eigen_batch(ts: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Batched :func:`sym_eigen` over an ``(n, 3, 3)`` stack."""
    ts = np.asarray(ts, dtype=float)
    sym = 0.5 * (ts + np.swapaxes(ts, -1, -2))
    vals, vecs = np.linalg.eigh(sym)
    vals = vals[:, ::-1]
    vecs = vecs[:, :, ::-1].copy()
    return vals, _fix_signs(vecs)


def _fix_signs(vecs: np.ndarray) -> np.ndarray:
    # largest-magnitude component non-negative; near-ties resolved toward the lower axis
    mag = np.abs(vecs)
    top = mag.max(axis=1, keepdims=True)
    lead = np.argmax(mag >= top - 1e-12, axis=1)
    comp = np.take_along_axis(vecs, lead[:, None, :], axis=1)[:, 0, :]
    sign = np.where(comp < 0.0, -1.0, 1.0)
    return vecs * sign[:, None, :]


# ---------------------------------------------------------------------------
# polyhedral ball models


@dataclass(frozen=True)
class PolyBall:
    """Unit-ball approximation given by outward unit normals and offsets.

    ``dodeca`` is the dodecahedron circumscribed to the unit sphere (every
    face tangent to it).  ``icoN`` is the N-times subdivided icosphere with
    vertices on the unit sphere, so it sits inside the ball.
    """

    model: str
    level: int
    normals: np.ndarray
    offsets: np.ndarray

    @property
    def tag(self) -> str:
        return "dodeca" if self.model == "dodecahedron" else f"ico{self.level}"

    @property
    def circumradius(self) -> float:
        return _unit_circumradius(self.tag)

    def halfspaces(self, radius: float = 1.0, center=(0.0, 0.0, 0.0)) -> list:
        return make_polyball(self.tag, radius, center)

    def polytope(self, radius: float = 1.0, center=(0.0, 0.0, 0.0)) -> ConvexPolytope:
        center = np.asarray(center, dtype=float)
        if self.model == "icosphere":
            # several planes meet at each vertex; build from the mesh instead of clipping
            verts, faces = icosphere(self.level)
            planes = [HalfSpace(n, radius * b + n @ center) for n, b in zip(self.normals, self.offsets)]
            return ConvexPolytope(verts * radius + center, [list(f) for f in faces], planes, 2.0 * radius)
        return ConvexPolytope.from_halfspaces(
            self.halfspaces(radius, center), center, bound=1.01 * radius * self.circumradius
        )


def _icosahedron():
    t = (1.0 + math.sqrt(5.0)) / 2.0
    verts = np.array(
        [
            [-1, t, 0], [1, t, 0], [-1, -t, 0], [1, -t, 0],
            [0, -1, t], [0, 1, t], [0, -1, -t], [0, 1, -t],
            [t, 0, -1], [t, 0, 1], [-t, 0, -1], [-t, 0, 1],
        ],
        dtype=float,
    )
    verts /= np.linalg.norm(verts, axis=1, keepdims=True)
    faces = [
        (0, 11, 5), (0, 5, 1), (0, 1, 7), (0, 7, 10), (0, 10, 11),
        (1, 5, 9), (5, 11, 4), (11, 10, 2), (10, 7, 6), (7, 1, 8),
        (3, 9, 4), (3, 4, 2), (3, 2, 6), (3, 6, 8), (3, 8, 9),
        (4, 9, 5), (2, 4, 11), (6, 2, 10), (8, 6, 7), (9, 8, 1),
    ]
    return verts, faces


def icosphere(level: int) -> tuple[np.ndarray, list]:
    """Vertices (on the unit sphere) and outward triangles of a subdivided icosahedron."""
    verts, faces = _icosahedron()
    verts = [v for v in verts]
    for _ in range(level):
        mid = {}

        def midpoint(a, b):
            key = (min(a, b), max(a, b))
            if key not in mid:
                m = verts[a] + verts[b]
                verts.append(m / np.linalg.norm(m))
                mid[key] = len(verts) - 1
            return mid[key]

        nxt = []
        for a, b, c in faces:
            ab, bc, ca = midpoint(a, b), midpoint(b, c), midpoint(c, a)
            nxt += [(a, ab, ca), (b, bc, ab), (c, ca, bc), (ab, bc, ca)]
        faces = nxt
    return np.array(verts), faces


@lru_cache(maxsize=None)
def _unit_polyball(tag: str) -> PolyBall:
    if tag == "dodeca":
        normals, _ = _icosahedron()
        return PolyBall("dodecahedron", 0, normals, np.ones(len(normals)))
    if tag.startswith("ico") and tag[3:].isdigit():
        level = int(tag[3:])
        if not 0 <= level <= 5:
            raise ValueError(f"icosphere level must be in [0, 5], got {level}")
        verts, faces = icosphere(level)
        f = np.array(faces)
        a, b, c = verts[f[:, 0]], verts[f[:, 1]], verts[f[:, 2]]
        n = np.cross(b - a, c - a)
        n /= np.linalg.norm(n, axis=1, keepdims=True)
        off = np.einsum("ij,ij->i", n, a)
        return PolyBall("icosphere", level, n, off)
    raise ValueError(f"unknown polyball model {tag!r} (expected 'dodeca' or 'ico0'..'ico5')")


@lru_cache(maxsize=None)
def _unit_circumradius(tag: str) -> float:
    pb = _unit_polyball(tag)
    if pb.model == "icosphere":
        return 1.0
    # dodecahedron vertices: the 20 face centres of the icosahedron, pushed out to the face planes
    verts, faces = _icosahedron()
    c = np.array([verts[list(f)].mean(axis=0) for f in faces])
    # vertex of the dual lies where three tangent planes meet; its norm is 1 / cos(angle to those normals)
    cos = np.array([verts[f[0]] @ (ci / np.linalg.norm(ci)) for f, ci in zip(faces, c)])
    return float(1.0 / cos.min())


def get_polyball(model) -> PolyBall:
    """Resolve ``'dodeca'``, ``'icoN'``, ``('icosphere', N)`` or a PolyBall."""
    if isinstance(model, PolyBall):
        return model
    if isinstance(model, tuple):
        name, level = model
        if name in ("icosphere", "ico"):
            return _unit_polyball(f"ico{int(level)}")
        model = name
    if model in ("dodeca", "dodecahedron"):
        return _unit_polyball("dodeca")
    if isinstance(model, str) and model.startswith("icosphere"):
        model = "ico" + model[len("icosphere"):]
    return _unit_polyball(model)


def make_polyball(model, radius: float, center=(0.0, 0.0, 0.0)) -> list:
    """Half-spaces of the unit polyball scaled by ``radius`` and moved to ``center``."""
    if not radius > 0:
        raise ValueError(f"radius must be positive, got {radius!r}")
    pb = get_polyball(model)
    center = np.asarray(center, dtype=float)
    offs = radius * pb.offsets + pb.normals @ center
    return [HalfSpace(n, b) for n, b in zip(pb.normals, offs)]
