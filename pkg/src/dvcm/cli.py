"""Command-line entry point: ``dvcm <subcommand> [flags]``.

Exit status is 0 on success, 2 on usage errors and 1 on runtime errors.
Flags given on the command line override values read with ``--config``.
"""

from __future__ import annotations

import argparse
import logging
import sys
import time
import warnings

import numpy as np

from . import __version__
from .distlike import DistanceLikeSpec, bbox_diameter, grid_eval, write_grid_csv
from .estimators import EstimatorParams, detect_features, estimate_all, orient_normals, resolve_length
from .geom import get_polyball
from .io import read_cloud, read_config, write_cloud, write_estimates
from .synth import NoiseModel, noisy_sample, param_grid, parse_outliers, parse_shape, sweep

log = logging.getLogger("dvcm")

POLYBALLS = ["dodeca"] + [f"ico{i}" for i in range(6)]
DISTANCES = ["plain", "witnessed", "median"]


class UsageError(Exception):
    pass


def _common(p, estimator=True):
    p.add_argument("--config", help="key = value file; flags override it")
    p.add_argument("--input", help="XYZ, ascii PLY or OBJ point cloud")
    p.add_argument("--output", help="output path")
    p.add_argument("--threads", type=int, help="worker threads for the cell and probe kernels")
    p.add_argument("--seed", type=int)
    if estimator:
        p.add_argument("--distance", choices=DISTANCES)
        p.add_argument("--k", type=int)
        p.add_argument("--R", help="offset radius, absolute or with a D suffix (0.04D)")
        p.add_argument("--r", help="probe radius, absolute or with a D suffix")
        p.add_argument("--polyball", choices=POLYBALLS)


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="dvcm", description="Voronoi covariance measure of distance-like functions")
    ap.add_argument("--version", action="version", version=f"dvcm {__version__}")
    ap.add_argument("-v", "--verbose", action="count", default=0)
    sub = ap.add_subparsers(dest="command", metavar="command")

    for name, hlp in [
        ("normals", "estimate normals, write PLY with nx ny nz"),
        ("curvature", "estimate mean absolute curvature (PLY quality)"),
        ("features", "score sharp features (PLY quality) and threshold them"),
    ]:
        p = sub.add_parser(name, help=hlp)
        _common(p)
        p.add_argument("--threshold", type=float, help="feature threshold T in [0, 1]")
        p.add_argument("--orient", choices=["centroid", "none"], help="normal orientation (default none)")

    p = sub.add_parser("levelset", help="evaluate a distance-like function on a grid (CSV)")
    _common(p, estimator=False)
    p.add_argument("--distance", choices=DISTANCES + ["k"])
    p.add_argument("--k", type=int)
    p.add_argument("--resolution", type=int, help="nodes per axis (default 32)")
    p.add_argument("--padding", type=float, default=0.1, help="bbox padding as a fraction of D")

    p = sub.add_parser("synth", help="sample a synthetic shape with noise")
    _common(p, estimator=False)
    p.add_argument("--shape", help="sphere[:rho] | ellipsoid[:a,b,c] | plane[:size] | wedge[:size]")
    p.add_argument("--n", type=int)
    p.add_argument("--eps", type=float, help="Hausdorff noise as a fraction of D")
    p.add_argument("--outliers", help="tiers such as '0.1:box+0.1:0.02-0.1' (fractions of D)")
    p.add_argument("--sampler", choices=["random", "stratified"])

    p = sub.add_parser("sweep", help="run a parameter sweep and write CSV rows")
    _common(p, estimator=False)
    p.add_argument("--shape")
    p.add_argument("--n", type=int)
    p.add_argument("--seeds", help="comma list of seeds (default: --seed or 0)")
    p.add_argument("--eps", help="comma list of Hausdorff noise levels (fractions of D)")
    p.add_argument("--outliers")
    p.add_argument("--distance", help="comma list from plain,witnessed,median")
    p.add_argument("--k", help="comma list of k")
    p.add_argument("--R", help="comma list of offset radii")
    p.add_argument("--r", help="comma list of probe radii")
    p.add_argument("--polyball", choices=POLYBALLS)
    p.add_argument("--no-runtime", action="store_true", help="write runtime_ms as 0 for reproducible files")

    p = sub.add_parser("oracle", help="compare closed-form and Monte-Carlo VCM on random clouds")
    _common(p, estimator=False)
    p.add_argument("--n", type=int, help="sites per cloud (default 20)")
    p.add_argument("--samples", type=int, help="Monte-Carlo samples (default 200000)")
    p.add_argument("--R", help="offset radius (default 0.3)")
    p.add_argument("--polyball", choices=POLYBALLS)
    return ap


def _settings(args, keys, defaults):
    cfg = read_config(args.config) if getattr(args, "config", None) else {}
    out = {}
    for key in keys:
        val = getattr(args, key, None)
        if val is None:
            val = cfg.get(key, defaults.get(key))
        out[key] = val
    return out


def _need(s, *keys):
    for k in keys:
        if s.get(k) is None:
            raise UsageError(f"missing required option --{k}")


def _estimate(args):
    keys = ["input", "output", "distance", "k", "R", "r", "threshold", "polyball", "threads", "seed", "orient"]
    s = _settings(args, keys, {"distance": "plain", "k": 1, "polyball": "dodeca", "orient": "none"})
    _need(s, "input", "output", "R", "r")
    if args.command == "features":
        _need(s, "threshold")
    k = 1 if s["distance"] == "plain" else s["k"]
    try:
        params = EstimatorParams(str(s["R"]), str(s["r"]), int(k), s["distance"], s["threshold"], s["polyball"])
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    cloud = read_cloud(s["input"])
    t0 = time.perf_counter()
    est = estimate_all(cloud.points, params, threads=s["threads"])
    est = orient_normals(est, s["orient"])
    quality = "feature" if args.command == "features" else "curvature"
    write_estimates(s["output"], est, quality)
    msg = f"{len(est)} points, {int((~est.valid).sum())} invalid, {time.perf_counter() - t0:.2f} s"
    if args.command == "features":
        msg += f", {int(detect_features(est, s['threshold']).sum())} feature points at T={s['threshold']:g}"
    print(msg)
    return 0


def _levelset(args):
    s = _settings(args, ["input", "output", "distance", "k", "resolution", "threads", "seed"], {"distance": "plain", "k": 1, "resolution": 32})
    _need(s, "input", "output")
    P = read_cloud(s["input"]).points
    k = 1 if s["distance"] == "plain" else s["k"]
    D = bbox_diameter(P)
    pad = args.padding * D
    bbox = (P.min(axis=0) - pad, P.max(axis=0) + pad)
    nodes, vals = grid_eval(DistanceLikeSpec(s["distance"], int(k)), P, bbox, s["resolution"])
    write_grid_csv(s["output"], nodes, vals)
    print(f"{len(nodes)} grid nodes, value range [{vals.min():.6g}, {vals.max():.6g}]")
    return 0


def _synth(args):
    s = _settings(args, ["output", "shape", "n", "eps", "outliers", "seed", "sampler", "threads", "input"], {"shape": "sphere", "n": 10000, "eps": 0.0, "seed": 0, "sampler": "random"})
    _need(s, "output")
    shape = parse_shape(s["shape"])
    noise = NoiseModel(s["eps"], parse_outliers(s["outliers"]))
    X, N, Y = noisy_sample(shape, s["n"], s["seed"], noise, sampler=s["sampler"])
    write_cloud(s["output"], Y, N)
    print(f"{len(Y)} points from {shape.describe()}, D={shape.diameter:.6g}")
    return 0


def _split(v, conv=str):
    if v is None:
        return None
    return [conv(t) for t in str(v).split(",") if t.strip()]


def _sweep(args):
    keys = ["output", "shape", "n", "seeds", "seed", "eps", "outliers", "distance", "k", "R", "r", "polyball", "threads", "input"]
    s = _settings(args, keys, {"shape": "ellipsoid", "n": 10000, "eps": "0", "distance": "plain,witnessed", "k": "30", "R": "0.2D", "r": "0.2D", "polyball": "dodeca"})
    _need(s, "output")
    shape = parse_shape(s["shape"])
    seeds = _split(s["seeds"], int) or [s["seed"] if s["seed"] is not None else 0]
    tiers = parse_outliers(s["outliers"])
    noises = [NoiseModel(e, tiers) for e in _split(s["eps"], float)]
    dists = _split(s["distance"])
    bad = [d for d in dists if d not in DISTANCES]
    if bad:
        raise UsageError(f"unknown distance kinds: {', '.join(bad)}")
    params = param_grid(dists, _split(s["k"], int), _split(s["R"]), _split(s["r"]), s["polyball"])
    rows = sweep(shape, noises, params, s["n"], seeds, output=s["output"], threads=s["threads"], record_runtime=not args.no_runtime)
    print(f"{len(rows)} rows in {s['output']}")
    return 0


def _oracle(args):
    from .distlike import WeightedPointCloud
    from .vcm import ProbeKernel, compute_field, convolve, mc_oracle_vcm

    s = _settings(args, ["n", "seed", "samples", "R", "polyball", "threads", "input", "output"], {"n": 20, "seed": 0, "samples": 200000, "R": "0.3", "polyball": "ico3"})
    rng = np.random.default_rng(s["seed"])
    R = resolve_length(s["R"], 1.0)
    n = int(s["n"])
    if n < 1:
        raise UsageError("--n must be >= 1")
    S = rng.random((n, 3))
    w = rng.uniform(0.0, 1.2 * R * R, n)
    cloud = WeightedPointCloud.create(S, w)
    chi = ProbeKernel.ball(rng.random(3), float(rng.uniform(0.3, 0.8)))
    with warnings.catch_warnings():
        # weights above R^2 are drawn on purpose, so some cells are empty
        warnings.simplefilter("ignore", RuntimeWarning)
        f = compute_field(cloud, R, get_polyball(s["polyball"]), threads=s["threads"])
    fast = convolve(f, chi)
    mc = mc_oracle_vcm(cloud, R, chi, int(s["samples"]), seed=s["seed"])
    tf, tm = np.trace(fast), np.trace(mc.tensor)
    rel = abs(tf - tm) / max(abs(tm), 1e-300)
    print(f"sites {n}  R {R:g}  polyball {f.polyball}")
    print(f"trace fast {tf:.9g}")
    print(f"trace mc   {tm:.9g} +- {mc.trace_stderr:.3g}")
    print(f"relative error {rel:.4%}")
    print(f"frobenius diff {np.linalg.norm(fast - mc.tensor):.4g}  3 sigma {3 * np.linalg.norm(mc.stderr):.4g}")
    return 0


COMMANDS = {
    "normals": _estimate,
    "curvature": _estimate,
    "features": _estimate,
    "levelset": _levelset,
    "synth": _synth,
    "sweep": _sweep,
    "oracle": _oracle,
}


def main(argv=None) -> int:
    ap = build_parser()
    try:
        args = ap.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    # numba reports an old system TBB once and then uses another threading layer
    warnings.filterwarnings("ignore", message="The TBB threading layer requires")
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2), format="%(levelname)s %(name)s: %(message)s")
    if not args.command:
        ap.print_usage(sys.stderr)
        return 2
    try:
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"dvcm {args.command}: error: {exc}", file=sys.stderr)
        sub_usage(ap, args.command)
        return 2
    except (OSError, ValueError, RuntimeError) as exc:
        print(f"dvcm {args.command}: {exc}", file=sys.stderr)
        return 1


def sub_usage(ap, command):
    for action in ap._subparsers._group_actions:
        if command in action.choices:
            action.choices[command].print_usage(sys.stderr)


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
