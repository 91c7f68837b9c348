import re
import shlex
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest

from dvcm.cli import main
from dvcm.estimators import EstimatorParams, estimate_all, estimates_from_tensors
from dvcm.io import CloudFormatError, read_cloud, read_config, write_cloud, write_estimates
from dvcm.synth import Sphere, sample_shape

README = Path(__file__).resolve().parents[1] / "README.md"

PLY3 = """ply
format ascii 1.0
comment three points
element vertex 3
property float x
property float y
property float z
property float quality
element face 0
property list uchar int vertex_indices
end_header
0 0 0 1
1 0 0 2
0 1 0 3
"""


def test_read_xyz(tmp_path):
    p = tmp_path / "a.xyz"
    p.write_text("0 0 0\n1 0 0\n")
    c = read_cloud(p)
    assert c.points.shape == (2, 3) and c.normals is None
    assert np.array_equal(c.points[1], [1, 0, 0])


def test_read_xyz_with_normals_and_comments(tmp_path):
    p = tmp_path / "a.txt"
    p.write_text("# header\n0 0 0 0 0 1\n\n1,2,3,1,0,0\n")
    c = read_cloud(p)
    assert np.array_equal(c.normals, [[0, 0, 1], [1, 0, 0]])


def test_read_ply(tmp_path):
    p = tmp_path / "a.ply"
    p.write_text(PLY3)
    c = read_cloud(p)
    assert len(c) == 3
    assert np.array_equal(c.quality, [1, 2, 3])


def test_read_ply_sniffed_without_extension(tmp_path):
    p = tmp_path / "cloud"
    p.write_text(PLY3)
    assert len(read_cloud(p)) == 3


def test_read_obj(tmp_path):
    p = tmp_path / "a.obj"
    p.write_text("v 0 0 0\nv 1 0 0\nvn 0 0 1\nvn 0 0 1\nf 1 2 1\n")
    c = read_cloud(p)
    assert len(c) == 2 and c.normals.shape == (2, 3)


def test_bad_token_reports_line(tmp_path):
    p = tmp_path / "bad.xyz"
    p.write_text("a b c\n")
    with pytest.raises(CloudFormatError) as ei:
        read_cloud(p)
    assert ei.value.line == 1 and ":1:" in str(ei.value)
    p.write_text("0 0 0\n1 x 0\n")
    with pytest.raises(CloudFormatError, match=":2:"):
        read_cloud(p)


def test_binary_ply_rejected(tmp_path):
    p = tmp_path / "b.ply"
    p.write_bytes(b"ply\nformat binary_little_endian 1.0\nelement vertex 1\nproperty float x\nend_header\n\x00\x00\x00\x00")
    with pytest.raises(CloudFormatError, match="binary PLY is not supported"):
        read_cloud(p)


@pytest.mark.parametrize(
    "header",
    [
        "ply\nelement vertex 1\nproperty float x\nend_header\n0\n",
        "ply\nformat ascii 1.0\nelement vertex 1\nproperty float x\nproperty float y\nend_header\n0 0\n",
        "ply\nformat ascii 1.0\nelement vertex x\nend_header\n",
        "ply\nformat ascii 1.0\nelement vertex 2\nproperty float x\nproperty float y\nproperty float z\nend_header\n0 0 0\n",
    ],
)
def test_malformed_ply(tmp_path, header):
    p = tmp_path / "m.ply"
    p.write_text(header)
    with pytest.raises(CloudFormatError):
        read_cloud(p)


@pytest.mark.parametrize("ext", [".xyz", ".ply"])
def test_cloud_roundtrip(tmp_path, ext):
    rng = np.random.default_rng(0)
    P = rng.normal(size=(50, 3)) * 1e3
    N = rng.normal(size=(50, 3))
    path = tmp_path / ("c" + ext)
    write_cloud(path, P, N)
    c = read_cloud(path)
    assert np.allclose(c.points, P, rtol=1e-9, atol=0)
    assert np.allclose(c.normals, N, rtol=1e-9, atol=0)


def test_write_estimates(tmp_path):
    T = np.zeros((2, 3, 3))
    T[0] = np.diag([3.0, 2.0, 1.0])
    est = estimates_from_tensors(np.eye(3)[:2], T)
    path = tmp_path / "e.ply"
    write_estimates(path, est, "feature")
    c = read_cloud(path)
    assert len(c) == 2
    assert c.quality[0] == pytest.approx(2.0 / 6.0) and c.quality[1] == -1
    assert "element vertex 2" in path.read_text()

    X, _ = sample_shape(Sphere(1.0), 800, seed=1)
    est = estimate_all(X, EstimatorParams(0.3, 0.3))
    write_estimates(path, est, "feature")
    c = read_cloud(path)
    assert np.allclose(c.normals, est.normals, atol=1e-6)
    assert np.all((c.quality >= 0) & (c.quality <= 1))
    write_estimates(path, est)
    assert np.allclose(read_cloud(path).quality, est.mean_abs_curvature, rtol=1e-12)
    with pytest.raises(ValueError):
        write_estimates(path, est, "other")
    with pytest.raises(OSError):
        write_estimates(tmp_path / "missing" / "e.ply", est)


def test_read_config(tmp_path):
    p = tmp_path / "run.cfg"
    p.write_text("# run\ninput = a.xyz\nk = 30\nR = 0.04D\nthreshold=0.3  # trailing\n")
    assert read_config(p) == {"input": "a.xyz", "k": 30, "R": "0.04D", "threshold": 0.3}
    p.write_text("colour = red\n")
    with pytest.raises(ValueError, match="unknown config key"):
        read_config(p)
    p.write_text("k = many\n")
    with pytest.raises(ValueError, match=":1:"):
        read_config(p)


# ---------------------------------------------------------------------------
# command line


def test_cli_usage_errors(capsys):
    assert main(["normals"]) == 2
    assert "usage" in capsys.readouterr().err
    assert main([]) == 2
    assert main(["normals", "--bogus"]) == 2
    assert main(["features", "--input", "x.xyz", "--output", "y.ply", "--R", "1", "--r", "1"]) == 2
    assert main(["normals", "--input", "x", "--output", "y", "--R", "1", "--r", "-1"]) == 2
    assert main(["--version"]) == 0


def test_cli_runtime_errors(tmp_path, capsys):
    assert main(["normals", "--input", str(tmp_path / "none.xyz"), "--output", "o.ply", "--R", "1", "--r", "1"]) == 1
    bad = tmp_path / "bad.xyz"
    bad.write_text("a b c\n")
    assert main(["normals", "--input", str(bad), "--output", "o.ply", "--R", "1", "--r", "1"]) == 1
    assert "bad.xyz:1" in capsys.readouterr().err
    cfg = tmp_path / "c.cfg"
    cfg.write_text("colour = red\n")
    assert main(["normals", "--config", str(cfg)]) == 1


def test_cli_config_and_override(tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    assert main(["synth", "--shape", "sphere", "--n", "1500", "--seed", "3", "--output", "p.xyz"]) == 0
    Path("run.cfg").write_text("input = p.xyz\nR = 0.15D\nr = 0.15D\noutput = a.ply\n")
    assert main(["normals", "--config", "run.cfg"]) == 0
    assert main(["normals", "--config", "run.cfg", "--R", "0.3D", "--output", "b.ply"]) == 0
    a, b = read_cloud("a.ply"), read_cloud("b.ply")
    assert not np.array_equal(a.quality, b.quality)
    assert main(["normals", "--input", "p.xyz", "--R", "0.3D", "--r", "0.15D", "--output", "c.ply"]) == 0
    assert Path("b.ply").read_bytes() == Path("c.ply").read_bytes()


def test_cli_threads_do_not_change_output(tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    main(["synth", "--shape", "wedge", "--n", "3000", "--eps", "0.01", "--seed", "4", "--output", "w.xyz"])
    for t in (1, 2):
        argv = ["features", "--input", "w.xyz", "--distance", "witnessed", "--k", "10", "--R", "0.06D", "--r", "0.04D"]
        assert main(argv + ["--threshold", "0.2", "--threads", str(t), "--output", f"f{t}.ply"]) == 0
    assert Path("f1.ply").read_bytes() == Path("f2.ply").read_bytes()


def readme_examples():
    text = README.read_text()
    blocks = re.findall(r"```sh\n(.*?)```", text, flags=re.S)
    return [ln.strip() for b in blocks for ln in b.splitlines() if ln.strip().startswith("dvcm ")]


def test_readme_examples_run(tmp_path, monkeypatch, capsys):
    lines = readme_examples()
    assert len(lines) >= 8
    monkeypatch.chdir(tmp_path)
    for line in lines:
        assert main(shlex.split(line)[1:]) == 0, line
    out = capsys.readouterr().out
    assert "trace fast" in out and "trace mc" in out and "relative error" in out
    n = read_cloud("n.ply")
    assert n.normals is not None and len(n) == 20000
    P = read_cloud("p.xyz").points
    assert np.all(np.einsum("ij,ij->i", n.normals, P - P.mean(axis=0)) > 0)
    assert np.all(read_cloud("f.ply").quality <= 1)
    assert len(Path("sweep.csv").read_text().splitlines()) == 3
    assert len(Path("grid.csv").read_text().splitlines()) == 16**3 + 1


def test_readme_config_example(tmp_path, monkeypatch):
    text = README.read_text()
    cfg = re.search(r"```\n# normals.cfg\n(.*?)```", text, flags=re.S).group(1)
    monkeypatch.chdir(tmp_path)
    Path("normals.cfg").write_text(cfg)
    main(["synth", "--shape", "sphere:1", "--n", "20000", "--eps", "0.01", "--seed", "1", "--output", "p.xyz"])
    assert main(["normals", "--config", "normals.cfg", "--output", "n.ply"]) == 0
    assert main(shlex.split("normals --input p.xyz --distance witnessed --k 30 --R 0.04D --r 0.04D --output m.ply")) == 0
    assert Path("n.ply").read_bytes() == Path("m.ply").read_bytes()


def test_console_script_entry_point(tmp_path):
    res = subprocess.run([sys.executable, "-m", "dvcm.cli", "normals"], capture_output=True, text=True, cwd=tmp_path)
    assert res.returncode == 2
    assert "usage" in res.stderr
