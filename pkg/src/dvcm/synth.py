"""Synthetic shapes, noise models, angle errors and parameter sweeps."""

from __future__ import annotations

import csv
import itertools
import logging
import math
import os
import time
from dataclasses import dataclass, field

import numpy as np

from .estimators import EstimatorParams, Estimates, estimate_all, resolve_length

log = logging.getLogger(__name__)

SWEEP_HEADER = [
    "shape", "n", "seed", "noise_eps", "outlier_spec", "distance", "k", "R", "r",
    "mean_angle_deg", "max_angle_deg", "invalid_count", "runtime_ms",
]


def _unit_vectors(rng, n):
    v = rng.normal(size=(n, 3))
    norm = np.linalg.norm(v, axis=1)
    while np.any(norm == 0):  # pragma: no cover - measure zero
        z = norm == 0
        v[z] = rng.normal(size=(int(z.sum()), 3))
        norm = np.linalg.norm(v, axis=1)
    return v / norm[:, None]


# ---------------------------------------------------------------------------
# shapes


class Shape:
    name = "shape"

    def sample(self, n: int, rng) -> tuple[np.ndarray, np.ndarray]:
        raise NotImplementedError

    def bbox(self) -> tuple[np.ndarray, np.ndarray]:
        raise NotImplementedError

    @property
    def bbox_diagonal(self) -> float:
        lo, hi = self.bbox()
        return float(np.linalg.norm(hi - lo))

    @property
    def diameter(self) -> float:
        """Largest distance between two points of the shape."""
        return self.bbox_diagonal

    def describe(self) -> str:
        return self.name


@dataclass(frozen=True)
class Sphere(Shape):
    radius: float = 1.0
    name = "sphere"

    def __post_init__(self):
        if not self.radius > 0:
            raise ValueError("sphere radius must be positive")

    def sample(self, n, rng):
        u = _unit_vectors(rng, n)
        return self.radius * u, u

    def bbox(self):
        return -self.radius * np.ones(3), self.radius * np.ones(3)

    @property
    def diameter(self):
        return 2.0 * self.radius

    def describe(self):
        return f"sphere:{self.radius:g}"


@dataclass(frozen=True)
class Ellipsoid(Shape):
    a: float = 1.0
    b: float = 1.0
    c: float = 1.0
    name = "ellipsoid"

    def __post_init__(self):
        if min(self.a, self.b, self.c) <= 0:
            raise ValueError("ellipsoid semi-axes must be positive")

    @classmethod
    def with_diameter(cls, a, b, c, D):
        """Semi-axes proportional to (a, b, c), scaled so the diameter is ``D``."""
        s = D / (2.0 * max(a, b, c))
        return cls(a * s, b * s, c * s)

    @property
    def diameter(self):
        return 2.0 * max(self.a, self.b, self.c)

    def sample(self, n, rng):
        # map the unit sphere and keep each image point with probability
        # proportional to the local area stretch, which is area-uniform
        ax = np.array([self.a, self.b, self.c])
        stretch = np.array([self.b * self.c, self.a * self.c, self.a * self.b])
        gmax = stretch.max()
        out = np.empty((0, 3))
        while len(out) < n:
            m = max(64, int(1.3 * (n - len(out))))
            u = _unit_vectors(rng, m)
            g = np.linalg.norm(u * stretch, axis=1)
            out = np.concatenate([out, u[rng.random(m) * gmax < g]])
        u = out[:n]
        X = u * ax
        N = u / ax
        N /= np.linalg.norm(N, axis=1)[:, None]
        return X, N

    def bbox(self):
        ax = np.array([self.a, self.b, self.c])
        return -ax, ax

    def describe(self):
        return f"ellipsoid:{self.a:g},{self.b:g},{self.c:g}"


@dataclass(frozen=True)
class PlanePatch(Shape):
    """Square ``[-s/2, s/2]^2`` in the plane z = 0."""

    size: float = 1.0
    name = "plane"

    def __post_init__(self):
        if not self.size > 0:
            raise ValueError("plane patch size must be positive")

    def sample(self, n, rng):
        xy = (rng.random((n, 2)) - 0.5) * self.size
        X = np.column_stack([xy, np.zeros(n)])
        N = np.tile([0.0, 0.0, 1.0], (n, 1))
        return X, N

    def bbox(self):
        h = self.size / 2
        return np.array([-h, -h, 0.0]), np.array([h, h, 0.0])

    @property
    def diameter(self):
        return self.size * math.sqrt(2.0)

    def describe(self):
        return f"plane:{self.size:g}"


@dataclass(frozen=True)
class Wedge(Shape):
    """Two square faces of a cube meeting at a convex edge on the y axis.

    Top face ``z = 0, -L <= x <= 0`` with normal +z and side face
    ``x = 0, -L <= z <= 0`` with normal +x; ``|y| <= L/2`` on both.
    """

    size: float = 1.0
    name = "wedge"

    def __post_init__(self):
        if not self.size > 0:
            raise ValueError("wedge size must be positive")

    def sample(self, n, rng):
        L = self.size
        side = rng.random(n) < 0.5
        s = -L * rng.random(n)
        y = (rng.random(n) - 0.5) * L
        X = np.where(side[:, None], np.column_stack([np.zeros(n), y, s]), np.column_stack([s, y, np.zeros(n)]))
        N = np.where(side[:, None], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0])
        return X, N

    def bbox(self):
        L = self.size
        return np.array([-L, -L / 2, -L]), np.array([0.0, L / 2, 0.0])

    def edge_distance(self, X) -> np.ndarray:
        """Distance from points on the surface to the shared edge."""
        X = np.asarray(X, dtype=float)
        return np.hypot(np.minimum(X[:, 0], 0.0), np.minimum(X[:, 2], 0.0))

    def rim_distance(self, X) -> np.ndarray:
        """Distance from surface points to the free boundary of the faces."""
        X = np.asarray(X, dtype=float)
        L = self.size
        along = np.minimum(X[:, 0], X[:, 2])  # the in-face coordinate, in [-L, 0]
        return np.minimum(L / 2 - np.abs(X[:, 1]), along + L)

    def describe(self):
        return f"wedge:{self.size:g}"


def parse_shape(text: str) -> Shape:
    """``sphere[:rho]``, ``ellipsoid[:a,b,c]``, ``plane[:size]`` or ``wedge[:size]``."""
    name, _, args = text.partition(":")
    vals = [float(v) for v in args.split(",")] if args else []
    try:
        if name == "sphere":
            return Sphere(*vals)
        if name == "ellipsoid":
            return Ellipsoid(*vals) if vals else Ellipsoid.with_diameter(2.0, 1.5, 1.0, 2.0)
        if name in ("plane", "plane-patch"):
            return PlanePatch(*vals)
        if name in ("wedge", "edge"):
            return Wedge(*vals)
    except TypeError as exc:
        raise ValueError(f"bad parameters for shape {name!r}: {args!r}") from exc
    raise ValueError(f"unknown shape {text!r}")


SAMPLERS = ("random", "stratified")


def fibonacci_sphere(n: int, rng) -> np.ndarray:
    """Equal-area spiral points on the unit sphere under a random rotation."""
    i = np.arange(n) + 0.5
    z = 1.0 - 2.0 * i / n
    phi = math.pi * (1.0 + math.sqrt(5.0)) * i
    s = np.sqrt(np.maximum(0.0, 1.0 - z * z))
    U = np.column_stack([s * np.cos(phi), s * np.sin(phi), z])
    Q, Rm = np.linalg.qr(rng.normal(size=(3, 3)))
    Q = Q * np.sign(np.diag(Rm))
    if np.linalg.det(Q) < 0:
        Q[:, 0] *= -1
    return U @ Q.T


def sample_shape(shape: Shape, n: int, seed=0, sampler: str = "random") -> tuple[np.ndarray, np.ndarray]:
    """``n`` area-uniform samples and their unit normals.

    ``sampler="random"`` draws i.i.d. points.  ``"stratified"`` returns an
    equal-area low-discrepancy set (a randomly rotated Fibonacci spiral) and
    is offered for spheres only.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    if sampler not in SAMPLERS:
        raise ValueError(f"sampler must be one of {SAMPLERS}")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    if sampler == "stratified":
        if not isinstance(shape, Sphere):
            raise ValueError("the stratified sampler is only available for spheres")
        U = fibonacci_sphere(int(n), rng)
        return shape.radius * U, U
    return shape.sample(int(n), rng)


# ---------------------------------------------------------------------------
# noise


@dataclass(frozen=True)
class OutlierTier:
    """A fraction of the points displaced by ``[dmin, dmax] * D``, or
    resampled in the bounding box when ``box`` is set."""

    fraction: float
    dmin: float = 0.0
    dmax: float = 0.0
    box: bool = False

    def __post_init__(self):
        if not 0.0 <= self.fraction <= 1.0:
            raise ValueError("tier fraction must lie in [0, 1]")
        if not self.box and not 0.0 <= self.dmin <= self.dmax:
            raise ValueError("tier needs 0 <= dmin <= dmax")

    def describe(self) -> str:
        if self.box:
            return f"{self.fraction:g}:box"
        return f"{self.fraction:g}:{self.dmin:g}-{self.dmax:g}"


@dataclass(frozen=True)
class NoiseModel:
    """Hausdorff noise ``eps`` plus outlier tiers; lengths are multiples of D.

    Tier membership comes from a seeded shuffle: the first tier takes the
    first ``floor(f1 * n)`` shuffled points and so on.  Points in no tier
    move by at most ``eps * D``.  Directions are uniform on the sphere and
    radii uniform in the tier's interval.
    """

    eps: float = 0.0
    tiers: tuple = ()
    seed: int = 0

    def __post_init__(self):
        if self.eps < 0:
            raise ValueError("eps must be non-negative")
        object.__setattr__(self, "tiers", tuple(self.tiers))
        if sum(t.fraction for t in self.tiers) > 1.0 + 1e-12:
            raise ValueError("outlier fractions sum to more than 1")

    def describe_outliers(self) -> str:
        return "+".join(t.describe() for t in self.tiers) or "none"

    @property
    def is_identity(self) -> bool:
        return self.eps == 0 and all(t.fraction == 0 for t in self.tiers)


def parse_outliers(text: str | None) -> tuple:
    """``"0.1:box+0.02:0-0.1"`` style tier lists; ``none`` or empty for no tiers."""
    if not text or text == "none":
        return ()
    tiers = []
    for part in text.split("+"):
        frac, _, rng = part.partition(":")
        if rng == "box":
            tiers.append(OutlierTier(float(frac), box=True))
            continue
        lo, sep, hi = rng.partition("-")
        if not sep:
            lo, hi = "0", lo
        tiers.append(OutlierTier(float(frac), float(lo), float(hi)))
    return tuple(tiers)


def apply_noise(points, model: NoiseModel, D: float | None = None, bbox=None) -> np.ndarray:
    """Displace points according to ``model``; ``D`` and ``bbox`` default to
    the diagonal and bounding box of ``points``."""
    P = np.asarray(points, dtype=float)
    if model.is_identity or len(P) == 0:
        return P.copy()
    lo, hi = (P.min(axis=0), P.max(axis=0)) if bbox is None else (np.asarray(b, dtype=float) for b in bbox)
    if D is None:
        D = float(np.linalg.norm(hi - lo))
    n = len(P)
    rng = np.random.default_rng(model.seed)
    order = rng.permutation(n)
    dirs = _unit_vectors(rng, n)
    u = rng.random(n)
    box = lo + (hi - lo) * rng.random((n, 3))
    rad = model.eps * D * u
    resample = np.zeros(n, dtype=bool)
    at = 0
    for t in model.tiers:
        m = int(math.floor(t.fraction * n + 1e-9))
        idx = order[at : at + m]
        at += m
        if t.box:
            resample[idx] = True
        else:
            rad[idx] = (t.dmin + (t.dmax - t.dmin) * u[idx]) * D
    out = P + dirs * rad[:, None]
    out[resample] = box[resample]
    return out


# ---------------------------------------------------------------------------
# scoring


@dataclass
class AngleStats:
    mean: float
    max: float
    histogram: np.ndarray
    bin_edges: np.ndarray
    invalid: int
    angles: np.ndarray = field(repr=False)


def angle_error(estimates, truth, valid=None, bins: int = 18) -> AngleStats:
    """Unsigned angles (degrees) between estimated and true normals."""
    if isinstance(estimates, Estimates):
        valid = estimates.valid if valid is None else valid
        estimates = estimates.normals
    E = np.asarray(estimates, dtype=float).reshape(-1, 3)
    T = np.asarray(truth, dtype=float).reshape(-1, 3)
    if len(E) != len(T):
        raise ValueError(f"length mismatch: {len(E)} estimates, {len(T)} truths")
    valid = np.ones(len(E), dtype=bool) if valid is None else np.asarray(valid, dtype=bool)
    valid = valid & np.all(np.isfinite(E), axis=1)
    if not valid.any():
        raise ValueError("no valid estimates to score")
    En = E[valid] / np.linalg.norm(E[valid], axis=1)[:, None]
    Tn = T[valid] / np.linalg.norm(T[valid], axis=1)[:, None]
    dots = np.minimum(1.0, np.abs(np.einsum("ij,ij->i", En, Tn)))
    ang = np.degrees(np.arccos(dots))
    hist, edges = np.histogram(ang, bins=bins, range=(0.0, 90.0))
    return AngleStats(float(ang.mean()), float(ang.max()), hist, edges, int((~valid).sum()), ang)


# ---------------------------------------------------------------------------
# sweeps


@dataclass(frozen=True)
class SweepRow:
    noise: NoiseModel
    params: EstimatorParams
    seed: int


def _row_key(values) -> tuple:
    return tuple(str(v) for v in values[:9])


def noisy_sample(shape: Shape, n: int, seed: int, noise: NoiseModel, stream: int = 0, sampler: str = "random"):
    """Clean samples, their normals and the noisy cloud for one data stream."""
    ss = np.random.SeedSequence([int(seed), int(stream)])
    s_shape, s_noise = ss.spawn(2)
    X, N = sample_shape(shape, n, np.random.default_rng(s_shape), sampler)
    model = NoiseModel(noise.eps, noise.tiers, int(s_noise.generate_state(1)[0]))
    lo, hi = shape.bbox()
    return X, N, apply_noise(X, model, shape.diameter, (lo, hi))


def sweep(
    shape: Shape,
    noises,
    params,
    n: int,
    seeds=(0,),
    output=None,
    resume: bool = True,
    threads: int | None = None,
    record_runtime: bool = True,
):
    """Run the estimator over a grid and return the CSV rows.

    Rows iterate over noise models, then parameter sets, then seeds.  The
    sampled data depend only on (seed, noise index) so parameter rows of
    the same seed see the same cloud.  With ``output`` set, rows are appended
    as they finish and rows already present are skipped.
    """
    noises, params, seeds = list(noises), list(params), list(seeds)
    if not noises or not params or not seeds:
        raise ValueError("sweep grids must be non-empty")
    done = {}
    if output is not None and resume and os.path.exists(output):
        with open(output, newline="") as fh:
            rd = csv.reader(fh)
            header = next(rd, None)
            if header is not None and header != SWEEP_HEADER:
                raise ValueError(f"{output}: existing file has a different header")
            for row in rd:
                done[_row_key(row)] = row
    fh = None
    if output is not None:
        fresh = not (resume and os.path.exists(output))
        fh = open(output, "w" if fresh else "a", newline="")
        wr = csv.writer(fh, lineterminator="\n")
        if fresh:
            wr.writerow(SWEEP_HEADER)
    D = shape.diameter
    rows = []
    try:
        for ni, noise in enumerate(noises):
            for seed in seeds:
                data = None
                for p in params:
                    R, r = p.absolute(D)
                    key = [shape.describe(), n, seed, f"{noise.eps:g}", noise.describe_outliers(), p.distance, p.k, f"{R:.6g}", f"{r:.6g}"]
                    if _row_key(key) in done:
                        rows.append(done[_row_key(key)])
                        continue
                    if data is None:
                        data = noisy_sample(shape, n, seed, noise, stream=ni)
                    _, N, Y = data
                    t0 = time.perf_counter()
                    est = estimate_all(Y, EstimatorParams(R, r, p.k, p.distance, p.threshold, p.polyball), threads=threads)
                    ms = (time.perf_counter() - t0) * 1e3 if record_runtime else 0.0
                    st = angle_error(est, N)
                    row = key + [f"{st.mean:.6f}", f"{st.max:.6f}", st.invalid, f"{ms:.0f}"]
                    row = [str(v) for v in row]
                    rows.append(row)
                    if fh is not None:
                        wr.writerow(row)
                        fh.flush()
                    log.info("sweep row %s", ",".join(row))
    finally:
        if fh is not None:
            fh.close()
    return rows


def param_grid(distances, ks, Rs, rs, polyball="dodeca"):
    """Cartesian product of parameter lists; ``k`` is forced to 1 for ``plain``."""
    out = []
    seen = set()
    for dist, k, R, r in itertools.product(distances, ks, Rs, rs):
        k = 1 if dist == "plain" else int(k)
        key = (dist, k, str(R), str(r))
        if key in seen:
            continue
        seen.add(key)
        out.append(EstimatorParams(R, r, k, dist, None, polyball))
    return out
