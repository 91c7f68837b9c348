"""Voronoi covariance measure of distance-like functions for point clouds."""

__version__ = "0.1.0"

from .distlike import (  # noqa: E402
    DistanceLikeSpec,
    WeightedPointCloud,
    full_k_sites,
    geometric_median,
    k_distance,
    median_sites,
    power_distance,
    witnessed_sites,
)
from .estimators import EstimatorParams, Estimates, detect_features, estimate_all, orient_normals  # noqa: E402
from .vcm import ProbeKernel, VcmField, compute_field, convolve, convolve_many, mc_oracle_vcm  # noqa: E402

__all__ = [
    "DistanceLikeSpec",
    "WeightedPointCloud",
    "full_k_sites",
    "geometric_median",
    "k_distance",
    "median_sites",
    "power_distance",
    "witnessed_sites",
    "EstimatorParams",
    "Estimates",
    "detect_features",
    "estimate_all",
    "orient_normals",
    "ProbeKernel",
    "VcmField",
    "compute_field",
    "convolve",
    "convolve_many",
    "mc_oracle_vcm",
]
