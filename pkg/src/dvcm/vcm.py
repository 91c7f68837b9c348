"""Voronoi covariance measure of a power distance.

For a weighted cloud the measure of a probe ``chi`` reduces to a finite sum
``sum_p chi(p) M_p`` where ``M_p`` is the covariance (about ``p``) of the
power cell of ``p`` cut down to the ball of radius ``sqrt(R^2 - w_p)``.
:func:`compute_field` gets every ``M_p``; :func:`convolve` and
:func:`convolve_many` apply probes; :func:`mc_oracle_vcm` integrates the
defining volume integral directly for cross-checking.
"""

from __future__ import annotations

import logging
import struct
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from . import _kernels
from .distlike import WeightedPointCloud, _power_brute
from .geom import get_polyball
from .powerdiagram import cell_moments, thread_count

log = logging.getLogger(__name__)

EMPTY_WARN_FRACTION = 0.10
PROBE_KINDS = ("ball", "hat")
_TRIU = (np.array([0, 0, 0, 1, 1, 2]), np.array([0, 1, 2, 1, 2, 2]))
_BIN_MAGIC = b"DVCMFLD1"


@dataclass(frozen=True)
class ProbeKernel:
    """Non-negative probe centred at ``center`` with support radius ``r``.

    ``kind="ball"`` is the closed-ball indicator; ``kind="hat"`` is the
    1/r-Lipschitz tent ``max(0, 1 - |x - q| / r)``.
    """

    center: np.ndarray
    r: float
    kind: str = "ball"

    def __post_init__(self):
        c = np.asarray(self.center, dtype=float).reshape(3)
        object.__setattr__(self, "center", c)
        if self.kind not in PROBE_KINDS:
            raise ValueError(f"probe kind must be one of {PROBE_KINDS}, got {self.kind!r}")
        if not self.r > 0:
            raise ValueError(f"probe radius must be positive, got {self.r!r}")

    @classmethod
    def ball(cls, center, r: float) -> "ProbeKernel":
        return cls(center, float(r), "ball")

    @classmethod
    def hat(cls, center, r: float) -> "ProbeKernel":
        return cls(center, float(r), "hat")

    def __call__(self, x) -> np.ndarray:
        d = np.linalg.norm(np.atleast_2d(x) - self.center, axis=-1)
        if self.kind == "ball":
            return (d <= self.r).astype(float)
        return np.maximum(0.0, 1.0 - d / self.r)


@dataclass
class VcmField:
    """Per-site covariance tensors of a weighted cloud at offset radius ``R``."""

    cloud: WeightedPointCloud
    R: float
    moments: np.ndarray  # (n, 3, 3)
    volumes: np.ndarray
    polyball: str = "dodeca"
    _kd: tuple | None = field(default=None, repr=False, compare=False)

    def __len__(self):
        return len(self.moments)

    @property
    def empty_fraction(self) -> float:
        return float(np.mean(self.volumes <= 0)) if len(self.volumes) else 0.0

    def total(self) -> np.ndarray:
        """Sum of all tensors (the probe identically one)."""
        return _unpack(_pairwise(_pack(self.moments)))

    def kdtree(self):
        if self._kd is None:
            self._kd = _kernels.build_kdtree(np.ascontiguousarray(self.cloud.sites, dtype=float))
        return self._kd


def _pack(m: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(m[..., _TRIU[0], _TRIU[1]])


def _unpack(m6: np.ndarray) -> np.ndarray:
    m6 = np.asarray(m6)
    out = np.empty(m6.shape[:-1] + (3, 3))
    out[..., _TRIU[0], _TRIU[1]] = m6
    out[..., _TRIU[1], _TRIU[0]] = m6
    return out


def _pairwise(rows: np.ndarray) -> np.ndarray:
    buf = np.array(rows, dtype=float).reshape(len(rows), -1)
    if len(buf) == 0:
        return np.zeros(buf.shape[1])
    _kernels._pairwise_rows(buf, len(buf))
    return buf[0].copy()


def compute_field(cloud: WeightedPointCloud, R: float, ball="dodeca", threads: int | None = None) -> VcmField:
    """Covariance tensor ``M_p`` of every bounded power cell."""
    pb = get_polyball(ball)
    vols, moms, _ = cell_moments(cloud, R, pb, threads=threads)
    f = VcmField(cloud, float(R), moms, vols, pb.tag)
    frac = f.empty_fraction
    if frac > EMPTY_WARN_FRACTION:
        warnings.warn(
            f"{frac:.1%} of power cells are empty at R={R:g}; weights exceed R^2 for those sites",
            RuntimeWarning,
            stacklevel=2,
        )
    return f


def convolve(field: VcmField, chi: ProbeKernel) -> np.ndarray:
    """``sum_p chi(p) M_p`` for a single probe."""
    return convolve_many(field, chi.center[None], chi.r, chi.kind)[0]


def convolve_many(field: VcmField, centers, r: float, kind: str = "ball", threads: int | None = None, return_counts=False):
    """Apply the same probe shape at many centres; returns ``(m, 3, 3)``.

    Support enumeration goes through a kd-tree over the sites; within each
    probe the tensors are added in ascending site order by pairwise
    reduction, so the result does not depend on the thread count.
    """
    ProbeKernel(np.zeros(3), r, kind)  # validates r and kind
    C = np.ascontiguousarray(np.asarray(centers, dtype=float).reshape(-1, 3))
    n = len(field)
    if n == 0 or len(C) == 0:
        out = np.zeros((len(C), 3, 3))
        return (out, np.zeros(len(C), dtype=int)) if return_counts else out
    S = np.ascontiguousarray(field.cloud.sites, dtype=float)
    m6 = _pack(field.moments)
    cmax = 256
    res = np.zeros((len(C), 6))
    cnt = np.zeros(len(C), dtype=np.int64)
    todo = np.arange(len(C))
    with thread_count(threads):
        while len(todo):
            cmax = min(max(cmax, 1), n)
            o, c, st = _kernels.convolve_balls(S, m6, field.kdtree(), C[todo], float(r), kind == "hat", cmax)
            good = st == _kernels.OK
            res[todo[good]], cnt[todo[good]] = o[good], c[good]
            todo = todo[~good]
            cmax *= 8
    out = _unpack(res)
    return (out, cnt) if return_counts else out


# ---------------------------------------------------------------------------
# Monte-Carlo oracle


@dataclass
class OracleResult:
    tensor: np.ndarray
    stderr: np.ndarray  # per-entry standard error
    n_samples: int
    accepted: int
    box_volume: float

    @property
    def trace_stderr(self) -> float:
        return float(np.sqrt(np.sum(np.diag(self.stderr) ** 2)))


def offset_bbox(cloud: WeightedPointCloud, R: float):
    """Bounding box of ``{delta <= R}``, or ``None`` when it is empty."""
    rad2 = R * R - cloud.weights
    live = rad2 > 0
    if not live.any():
        return None
    rad = np.sqrt(rad2[live])[:, None]
    S = cloud.sites[live]
    return (S - rad).min(axis=0), (S + rad).max(axis=0)


def mc_oracle_vcm(cloud: WeightedPointCloud, R: float, chi: ProbeKernel | None, n_samples: int = 10**6, seed=0, batch: int = 1 << 16) -> OracleResult:
    """Rejection-sampling estimate of the covariance measure of ``chi``.

    Samples the box around ``{delta <= R}``; an accepted point x in the cell
    of p contributes ``chi(p) (x - p)(x - p)^T``.  ``chi=None`` is the
    constant one.
    """
    if n_samples < 10**4:
        raise ValueError("the oracle needs at least 1e4 samples")
    box = offset_bbox(cloud, R)
    if box is None:
        raise ValueError("zero acceptance: every site has weight above R^2")
    lo, hi = box
    vol = float(np.prod(hi - lo))
    rng = np.random.default_rng(seed)
    S, W = cloud.sites, cloud.weights
    chi_site = np.ones(len(S)) if chi is None else chi(S)
    s1 = np.zeros(6)
    s2 = np.zeros(6)
    accepted = 0
    left = int(n_samples)
    while left > 0:
        b = min(batch, left)
        left -= b
        X = lo + (hi - lo) * rng.random((b, 3))
        d2, idx = _power_brute(S, W, X)
        ok = d2 <= R * R
        accepted += int(ok.sum())
        Y = X[ok] - S[idx[ok]]
        f = Y[:, _TRIU[0]] * Y[:, _TRIU[1]] * chi_site[idx[ok], None]
        s1 += f.sum(axis=0)
        s2 += (f * f).sum(axis=0)
    if accepted == 0:
        raise ValueError("zero acceptance: the sampling box misses {delta <= R}")
    N = float(n_samples)
    mean = s1 / N
    var = np.maximum(s2 / N - mean * mean, 0.0)
    return OracleResult(_unpack(vol * mean), _unpack(vol * np.sqrt(var / N)), int(n_samples), accepted, vol)


# ---------------------------------------------------------------------------
# serialisation

_CSV_HEADER = "site_index,x,y,z,m11,m12,m13,m22,m23,m33"


def _field_table(f: VcmField) -> np.ndarray:
    n = len(f)
    return np.column_stack([np.arange(n, dtype=float), f.cloud.sites, _pack(f.moments)])


def write_field(path, f: VcmField, binary: bool = False) -> None:
    """Write ``site_index, x, y, z`` and the six upper-triangle moments per site.

    The binary form is an 8-byte magic, the row count as little-endian
    uint64, then ten little-endian doubles per row.
    """
    table = _field_table(f)
    if binary:
        with open(path, "wb") as fh:
            fh.write(_BIN_MAGIC)
            fh.write(struct.pack("<Q", len(table)))
            fh.write(table.astype("<f8").tobytes())
        return
    with open(path, "w") as fh:
        fh.write(_CSV_HEADER + "\n")
        for row in table:
            fh.write(f"{int(row[0])}," + ",".join(repr(float(v)) for v in row[1:]) + "\n")


def read_field_table(path):
    """Read a field file back as ``(sites (n, 3), moments (n, 3, 3))``."""
    with open(path, "rb") as fh:
        head = fh.read(len(_BIN_MAGIC))
        if head == _BIN_MAGIC:
            (n,) = struct.unpack("<Q", fh.read(8))
            table = np.frombuffer(fh.read(), dtype="<f8").reshape(n, 10)
        else:
            fh.seek(0)
            text = fh.read().decode()
            lines = text.splitlines()
            if not lines or lines[0].strip() != _CSV_HEADER:
                raise ValueError(f"{path}: not a field file")
            table = np.array([[float(t) for t in ln.split(",")] for ln in lines[1:] if ln.strip()]).reshape(-1, 10)
    order = np.argsort(table[:, 0], kind="stable")
    table = table[order]
    return table[:, 1:4].copy(), _unpack(table[:, 4:])
