"""Normals, principal directions, curvature and sharp features from the VCM.

At each data point q the field is convolved with the ball indicator of
radius r centred at q.  The eigenvector of the largest eigenvalue is the
normal; the other two eigenvalues carry the principal curvature magnitudes
(up to a constant) and their ratio to the trace flags sharp features.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .distlike import DistanceLikeSpec, _as_points, bbox_diameter
from .geom import get_polyball, sym_eigen_batch
from .vcm import VcmField, compute_field, convolve_many

log = logging.getLogger(__name__)

ESTIMATOR_KINDS = ("plain", "witnessed", "median")


def resolve_length(value, D: float) -> float:
    """Absolute length from a float or a diameter fraction such as ``"0.2D"``."""
    if isinstance(value, str):
        s = value.strip()
        if s.endswith(("D", "d")):
            return float(s[:-1]) * D
        return float(s)
    return float(value)


@dataclass(frozen=True)
class EstimatorParams:
    """R and r may be absolute or diameter fractions (``"0.04D"``)."""

    R: float | str
    r: float | str
    k: int = 1
    distance: str = "plain"
    threshold: float | None = None
    polyball: str = "dodeca"

    def __post_init__(self):
        if self.distance not in ESTIMATOR_KINDS:
            raise ValueError(f"distance must be one of {ESTIMATOR_KINDS}, got {self.distance!r}")
        if int(self.k) != self.k or self.k < 1:
            raise ValueError(f"k must be a positive integer, got {self.k!r}")
        for name in ("R", "r"):
            if not resolve_length(getattr(self, name), 1.0) > 0:
                raise ValueError(f"{name} must be positive")
        if self.threshold is not None and not 0.0 <= self.threshold <= 1.0:
            raise ValueError(f"threshold must lie in [0, 1], got {self.threshold!r}")
        get_polyball(self.polyball)

    def absolute(self, D: float) -> tuple[float, float]:
        return resolve_length(self.R, D), resolve_length(self.r, D)


@dataclass(frozen=True)
class SiteEstimate:
    point: np.ndarray
    eigenvalues: np.ndarray
    normal: np.ndarray
    dir_min: np.ndarray
    dir_max: np.ndarray
    mean_abs_curvature: float
    feature_score: float
    is_feature: bool
    valid: bool


@dataclass
class Estimates:
    """Per-point estimates stored column-wise.

    ``vectors[i]`` holds the eigenvectors as columns, in the order of the
    decreasing ``eigenvalues[i]``.  Points whose probe holds no mass are
    marked invalid; their eigenvalues are zero and their frame is the
    identity.
    """

    points: np.ndarray
    eigenvalues: np.ndarray
    vectors: np.ndarray
    valid: np.ndarray
    threshold: float | None = None

    def __len__(self):
        return len(self.points)

    @property
    def normals(self) -> np.ndarray:
        return self.vectors[:, :, 0]

    @property
    def dir_min(self) -> np.ndarray:
        return self.vectors[:, :, 1]

    @property
    def dir_max(self) -> np.ndarray:
        return self.vectors[:, :, 2]

    @property
    def mean_abs_curvature(self) -> np.ndarray:
        return self.eigenvalues[:, 1] + self.eigenvalues[:, 2]

    @property
    def feature_score(self) -> np.ndarray:
        tr = self.eigenvalues.sum(axis=1)
        with np.errstate(invalid="ignore", divide="ignore"):
            s = np.where(self.valid, self.eigenvalues[:, 1] / np.where(self.valid, tr, 1.0), 0.0)
        return np.clip(s, 0.0, 1.0)

    @property
    def is_feature(self) -> np.ndarray:
        if self.threshold is None:
            return np.zeros(len(self), dtype=bool)
        return detect_features(self, self.threshold)

    def __getitem__(self, i: int) -> SiteEstimate:
        return SiteEstimate(
            self.points[i],
            self.eigenvalues[i],
            self.normals[i],
            self.dir_min[i],
            self.dir_max[i],
            float(self.mean_abs_curvature[i]),
            float(self.feature_score[i]),
            bool(self.is_feature[i]),
            bool(self.valid[i]),
        )

    def __iter__(self):
        return (self[i] for i in range(len(self)))


def estimates_from_tensors(points, tensors, threshold=None) -> Estimates:
    vals, vecs = sym_eigen_batch(tensors)
    valid = np.any(tensors != 0, axis=(1, 2))
    vals = np.where(valid[:, None], vals, 0.0)
    vecs = np.where(valid[:, None, None], vecs, np.eye(3))
    return Estimates(np.asarray(points, dtype=float), vals, vecs, valid, threshold)


def build_field(P, params: EstimatorParams, threads: int | None = None) -> VcmField:
    P = _as_points(P)
    R, _ = params.absolute(bbox_diameter(P))
    cloud = DistanceLikeSpec(params.distance, int(params.k)).sites(P)
    return compute_field(cloud, R, params.polyball, threads=threads)


def estimate_all(P, params: EstimatorParams, threads: int | None = None, field: VcmField | None = None) -> Estimates:
    """Estimate the VCM frame at every point of ``P``."""
    P = _as_points(P)
    if len(P) < params.k:
        raise ValueError(f"need at least k={params.k} points, got {len(P)}")
    _, r = params.absolute(bbox_diameter(P))
    if field is None:
        field = build_field(P, params, threads)
    if not np.any(field.moments):
        raise ValueError("degenerate VCM field: every covariance tensor is zero")
    T = convolve_many(field, P, r, "ball", threads=threads)
    est = estimates_from_tensors(P, T, params.threshold)
    bad = int((~est.valid).sum())
    if bad:
        log.info("%d of %d points have an empty probe and are flagged invalid", bad, len(P))
    return est


def orient_normals(est: Estimates, reference="centroid") -> Estimates:
    """Flip normals towards a reference.

    ``"centroid"`` points them away from the centroid of the valid points,
    a length-3 array is a viewpoint they should face, ``"none"`` leaves them
    as they are.  Only the normal column is flipped.
    """
    if reference is None or (isinstance(reference, str) and reference == "none"):
        return est
    if isinstance(reference, str):
        if reference not in ("centroid", "outward"):
            raise ValueError(f"unknown orientation reference {reference!r}")
        pts = est.points[est.valid] if est.valid.any() else est.points
        side = est.points - pts.mean(axis=0)
    else:
        side = np.asarray(reference, dtype=float).reshape(3) - est.points
    flip = np.einsum("ij,ij->i", est.normals, side) < 0
    vecs = est.vectors.copy()
    vecs[flip, :, 0] *= -1
    return Estimates(est.points, est.eigenvalues, vecs, est.valid, est.threshold)


def detect_features(est: Estimates, T: float) -> np.ndarray:
    """Points whose feature score reaches ``T``; invalid points never qualify."""
    if not 0.0 <= T <= 1.0:
        raise ValueError(f"threshold must lie in [0, 1], got {T!r}")
    return (est.feature_score >= T) & est.valid
