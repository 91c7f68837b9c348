"""Point-cloud files (XYZ, ascii PLY, OBJ vertices) and key-value run configs."""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

XYZ_EXTS = (".xyz", ".txt", ".pts", ".asc")


class CloudFormatError(ValueError):
    """Unreadable or malformed point-cloud file."""

    def __init__(self, path, msg, line=None):
        where = f"{path}:{line}" if line is not None else f"{path}"
        super().__init__(f"{where}: {msg}")
        self.path = path
        self.line = line


@dataclass
class CloudData:
    points: np.ndarray
    normals: np.ndarray | None = None
    quality: np.ndarray | None = None

    def __len__(self):
        return len(self.points)


def _floats(tokens, path, lineno):
    try:
        return [float(t) for t in tokens]
    except ValueError:
        bad = next(t for t in tokens if not _is_float(t))
        raise CloudFormatError(path, f"non-numeric token {bad!r}", lineno) from None


def _is_float(t):
    try:
        float(t)
        return True
    except ValueError:
        return False


def _sniff(path) -> str:
    ext = os.path.splitext(str(path))[1].lower()
    if ext == ".ply":
        return "ply"
    if ext == ".obj":
        return "obj"
    if ext in XYZ_EXTS:
        return "xyz"
    with open(path, "rb") as fh:
        head = fh.read(4)
    if head[:3] == b"ply":
        return "ply"
    return "xyz"


def read_cloud(path) -> CloudData:
    """Read points (and normals/quality when present) from XYZ, PLY or OBJ."""
    kind = _sniff(path)
    if kind == "ply":
        return _read_ply(path)
    if kind == "obj":
        return _read_obj(path)
    return _read_xyz(path)


def _read_xyz(path) -> CloudData:
    rows = []
    width = None
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            s = line.split("#", 1)[0].replace(",", " ").split()
            if not s:
                continue
            vals = _floats(s, path, lineno)
            if len(vals) not in (3, 6):
                raise CloudFormatError(path, f"expected 3 or 6 values, found {len(vals)}", lineno)
            if width is None:
                width = len(vals)
            elif len(vals) != width:
                raise CloudFormatError(path, f"expected {width} values, found {len(vals)}", lineno)
            rows.append(vals)
    A = np.array(rows, dtype=float).reshape(-1, width or 3)
    return CloudData(A[:, :3].copy(), A[:, 3:6].copy() if width == 6 else None)


def _read_obj(path) -> CloudData:
    pts, nrm = [], []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            s = line.split("#", 1)[0].split()
            if not s:
                continue
            if s[0] == "v":
                vals = _floats(s[1:], path, lineno)
                if len(vals) < 3:
                    raise CloudFormatError(path, "vertex needs 3 coordinates", lineno)
                pts.append(vals[:3])
            elif s[0] == "vn":
                nrm.append(_floats(s[1:4], path, lineno))
    P = np.array(pts, dtype=float).reshape(-1, 3)
    N = np.array(nrm, dtype=float).reshape(-1, 3) if len(nrm) == len(pts) and nrm else None
    return CloudData(P, N)


def _read_ply(path) -> CloudData:
    with open(path, "rb") as fh:
        raw = fh.read()
    lines = raw.split(b"\n")
    if not lines or lines[0].strip() != b"ply":
        raise CloudFormatError(path, "missing 'ply' magic", 1)
    elements = []  # (name, count, [property names])
    fmt = None
    body = None
    for lineno, bline in enumerate(lines[1:], 2):
        try:
            s = bline.decode("ascii").split()
        except UnicodeDecodeError:
            raise CloudFormatError(path, "non-ascii bytes in header", lineno) from None
        if not s or s[0] in ("comment", "obj_info"):
            continue
        if s[0] == "format":
            if len(s) < 2:
                raise CloudFormatError(path, "malformed format line", lineno)
            if s[1].startswith("binary"):
                raise CloudFormatError(path, "binary PLY is not supported; convert to 'format ascii 1.0'", lineno)
            if s[1] != "ascii":
                raise CloudFormatError(path, f"unknown PLY format {s[1]!r}", lineno)
            fmt = s[1]
        elif s[0] == "element":
            if len(s) != 3 or not s[2].isdigit():
                raise CloudFormatError(path, "malformed element line", lineno)
            elements.append((s[1], int(s[2]), []))
        elif s[0] == "property":
            if not elements:
                raise CloudFormatError(path, "property before any element", lineno)
            if s[1] == "list":
                if len(s) != 5:
                    raise CloudFormatError(path, "malformed list property", lineno)
                elements[-1][2].append(("list", s[4]))
            else:
                if len(s) != 3:
                    raise CloudFormatError(path, "malformed property line", lineno)
                elements[-1][2].append(("scalar", s[2]))
        elif s[0] == "end_header":
            body = lineno
            break
        else:
            raise CloudFormatError(path, f"unexpected header keyword {s[0]!r}", lineno)
    if fmt is None:
        raise CloudFormatError(path, "missing format line")
    if body is None:
        raise CloudFormatError(path, "missing end_header")
    vert = [e for e in elements if e[0] == "vertex"]
    if not vert:
        raise CloudFormatError(path, "no vertex element")
    props = [name for kind, name in vert[0][2]]
    if any(kind == "list" for kind, _ in vert[0][2]):
        raise CloudFormatError(path, "list properties on vertices are not supported")
    for c in ("x", "y", "z"):
        if c not in props:
            raise CloudFormatError(path, f"vertex element lacks property {c!r}")
    # vertex rows start after the rows of any element declared before it
    pos = body  # 0-based index into lines of the first data row
    rows = []
    for name, count, plist in elements:
        if name != "vertex":
            pos = _skip_rows(lines, pos, count, path)
            continue
        while len(rows) < count:
            if pos >= len(lines):
                raise CloudFormatError(path, f"expected {count} vertices, found {len(rows)}")
            s = lines[pos].decode("ascii", "replace").split()
            pos += 1
            if not s:
                continue
            if len(s) != len(props):
                raise CloudFormatError(path, f"expected {len(props)} values, found {len(s)}", pos)
            rows.append(_floats(s, path, pos))
        break
    A = np.array(rows, dtype=float).reshape(-1, len(props))
    col = {p: i for i, p in enumerate(props)}
    P = A[:, [col["x"], col["y"], col["z"]]].copy()
    N = A[:, [col["nx"], col["ny"], col["nz"]]].copy() if all(c in col for c in ("nx", "ny", "nz")) else None
    Q = A[:, col["quality"]].copy() if "quality" in col else None
    return CloudData(P, N, Q)


def _skip_rows(lines, pos, count, path):
    seen = 0
    while seen < count:
        if pos >= len(lines):
            raise CloudFormatError(path, "file ends inside an element block")
        if lines[pos].strip():
            seen += 1
        pos += 1
    return pos


def _fmt(v) -> str:
    return repr(float(v))


def write_cloud(path, points, normals=None, quality=None) -> None:
    """Write XYZ (``x y z [nx ny nz]``) or ascii PLY depending on the extension."""
    P = np.asarray(points, dtype=float).reshape(-1, 3)
    N = None if normals is None else np.asarray(normals, dtype=float).reshape(-1, 3)
    Q = None if quality is None else np.asarray(quality, dtype=float).reshape(-1)
    if os.path.splitext(str(path))[1].lower() == ".ply":
        _write_ply(path, P, N, Q)
        return
    with open(path, "w") as fh:
        for i, p in enumerate(P):
            vals = list(p) + (list(N[i]) if N is not None else [])
            fh.write(" ".join(_fmt(v) for v in vals) + "\n")


def _write_ply(path, P, N=None, Q=None):
    with open(path, "w") as fh:
        fh.write("ply\nformat ascii 1.0\n")
        fh.write(f"element vertex {len(P)}\n")
        names = ["x", "y", "z"] + (["nx", "ny", "nz"] if N is not None else []) + (["quality"] if Q is not None else [])
        for nm in names:
            fh.write(f"property double {nm}\n")
        fh.write("end_header\n")
        for i in range(len(P)):
            vals = list(P[i]) + (list(N[i]) if N is not None else []) + ([Q[i]] if Q is not None else [])
            fh.write(" ".join(_fmt(v) for v in vals) + "\n")


def write_estimates(path, est, quality: str = "curvature") -> None:
    """PLY with x, y, z, nx, ny, nz and a ``quality`` scalar.

    ``quality`` is the mean absolute curvature (``"curvature"``) or the
    feature score (``"feature"``); invalid points get -1.
    """
    if quality == "curvature":
        q = est.mean_abs_curvature
    elif quality == "feature":
        q = est.feature_score
    else:
        raise ValueError(f"quality must be 'curvature' or 'feature', got {quality!r}")
    q = np.where(est.valid, q, -1.0)
    try:
        _write_ply(path, est.points, est.normals, q)
    except OSError as exc:
        raise OSError(f"cannot write {path}: {exc.strerror or exc}") from exc


# ---------------------------------------------------------------------------
# run configuration


CONFIG_KEYS = {
    "input": str,
    "output": str,
    "distance": str,
    "k": int,
    "R": str,
    "r": str,
    "threshold": float,
    "polyball": str,
    "seed": int,
    "threads": int,
    "eps": float,
    "outliers": str,
    "shape": str,
    "n": int,
    "orient": str,
    "resolution": int,
    "samples": int,
    "seeds": str,
    "sampler": str,
}


def read_config(path) -> dict:
    """Parse ``key = value`` lines; ``#`` starts a comment; unknown keys are errors."""
    out = {}
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            s = line.split("#", 1)[0].strip()
            if not s:
                continue
            key, sep, val = s.partition("=")
            if not sep:
                key, _, val = s.partition(" ")
            key, val = key.strip(), val.strip()
            if key not in CONFIG_KEYS:
                raise ValueError(f"{path}:{lineno}: unknown config key {key!r}")
            if not val:
                raise ValueError(f"{path}:{lineno}: missing value for {key!r}")
            try:
                out[key] = CONFIG_KEYS[key](val)
            except ValueError:
                raise ValueError(f"{path}:{lineno}: bad value {val!r} for {key!r}") from None
    return out
