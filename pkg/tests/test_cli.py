import math
import re
import subprocess
import sys

import numpy as np
import pytest

from persfit import cli
from persfit.camera import CameraParams
from persfit.field import render_field
from persfit.fieldio import read_camera, read_gravity, write_camera, write_field
from persfit.gravity import GravityDir
from persfit.synth import sample_scenario, write_scenario

RESULT_KEYS = [
    "roll", "pitch", "gravity", "f", "vfov_deg", "k1", "k2",
    "sigma_gravity_deg", "sigma_vfov_deg", "sigma_k1", "iters", "status",
]


def parse_line(line):
    return dict(item.split("=", 1) for item in line.split() if "=" in item)


@pytest.fixture
def scenario_dir(tmp_path):
    for i, seed in enumerate((3, 4, 5)):
        write_scenario(sample_scenario(seed, 96, 80, "radial1"), tmp_path, i)
    return tmp_path


def test_calibrate_noiseless(scenario_dir, capsys, tmp_path):
    out = tmp_path / "est.cam"
    code = cli.run(["calibrate", str(scenario_dir / "0000.pfld"), "--model", "radial1", "--out", str(out)])
    assert code == 0
    line = capsys.readouterr().out.strip()
    values = parse_line(line)
    assert list(values) == RESULT_KEYS
    gt = read_camera(scenario_dir / "0000.cam")
    assert abs(float(values["vfov_deg"]) - math.degrees(gt.vfov)) < 0.01
    g = read_gravity(scenario_dir / "0000.grav")
    est_g = np.array([float(v) for v in values["gravity"].strip("()").split(",")])
    assert math.degrees(math.acos(min(1.0, float(est_g @ g.vec)))) < 0.01
    assert values["status"] == "StepTolReached"
    assert read_camera(out).f == pytest.approx(float(values["f"]), rel=1e-15)


def test_golden_pinhole_line(tmp_path, capsys):
    cam = CameraParams(64, 48, 50.0)
    write_field(render_field(cam, GravityDir.from_roll_pitch(math.radians(5.0), math.radians(-3.0))), tmp_path / "a.pfld")
    assert cli.run(["calibrate", str(tmp_path / "a.pfld")]) == 0
    line = capsys.readouterr().out
    assert re.fullmatch(
        r"roll=\S+ pitch=\S+ gravity=\(\S+,\S+,\S+\) f=\S+ vfov_deg=\S+ k1=0 k2=0 "
        r"sigma_gravity_deg=\S+ sigma_vfov_deg=\S+ sigma_k1=\S+ iters=\d+ status=\w+\n",
        line,
    )
    v = parse_line(line)
    assert float(v["roll"]) == pytest.approx(5.0, abs=1e-3)
    assert float(v["pitch"]) == pytest.approx(-3.0, abs=1e-3)


def test_missing_file(capsys):
    assert cli.run(["calibrate", "missing.pfld"]) == 2
    assert "missing.pfld" in capsys.readouterr().err


def test_bad_file(tmp_path, capsys):
    (tmp_path / "bad.pfld").write_bytes(b"PFLD0000" + b"\0" * 12)
    assert cli.run(["calibrate", str(tmp_path / "bad.pfld")]) == 2


@pytest.mark.parametrize(
    "argv",
    [
        [],
        ["frobnicate"],
        ["calibrate", "x.pfld", "--bogus"],
        ["calibrate", "x.pfld", "--fix-gravity", "0,1,0", "--fix-focal", "100"],
        ["calibrate", "x.pfld", "--prior-focal", "100"],
        ["calibrate", "x.pfld", "--fix-focal", "100", "--prior-focal", "100", "--prior-focal-std", "5"],
        ["calibrate", "x.pfld", "--fix-gravity", "0,1"],
        ["calibrate", "x.pfld", "--stride", "0"],
        ["calibrate", "x.pfld", "--model", "fisheye"],
        ["synth", "--out", "d", "--width", "16"],
        ["synth", "--out", "d", "--outliers", "2"],
    ],
)
def test_usage_errors(argv, capsys):
    assert cli.run(argv) == 1
    assert capsys.readouterr().err


def test_check_jacobians(capsys):
    assert cli.run(["check-jacobians", "--seed", "7", "--trials", "100"]) == 0
    out = capsys.readouterr().out.splitlines()
    errs = [float(re.search(r"max_rel_err=(\S+)", l).group(1)) for l in out if l.startswith("block=")]
    assert len(errs) == 6 and max(errs) < 1e-5
    assert out[-1] == "status=ok"


def test_fixed_focal_and_prior(scenario_dir, capsys):
    gt = read_camera(scenario_dir / "0001.cam")
    path = str(scenario_dir / "0001.pfld")
    assert cli.run(["calibrate", path, "--model", "radial1", "--fix-focal", repr(gt.f)]) == 0
    v = parse_line(capsys.readouterr().out)
    assert float(v["f"]) == gt.f
    assert cli.run(
        ["calibrate", path, "--model", "radial1", "--prior-focal", repr(gt.f), "--prior-focal-std", "1"]
    ) == 0
    assert float(parse_line(capsys.readouterr().out)["f"]) == pytest.approx(gt.f, rel=1e-4)
    g = read_gravity(scenario_dir / "0001.grav")
    fix = ",".join(repr(float(x)) for x in g.vec)
    assert cli.run(["calibrate", path, "--model", "radial1", f"--fix-gravity={fix}", "--init", "heuristic"]) == 0
    assert float(parse_line(capsys.readouterr().out)["vfov_deg"]) == pytest.approx(math.degrees(gt.vfov), abs=0.01)


def test_synth_and_bench_deterministic(tmp_path, capsys, monkeypatch):
    d = tmp_path / "s"
    argv = ["synth", "--seed", "1", "--count", "4", "--width", "48", "--height", "40",
            "--model", "radial1", "--noise-up", "1", "--noise-lat", "1", "--out", str(d)]
    assert cli.run(argv) == 0
    capsys.readouterr()
    assert sorted(p.name for p in d.iterdir()) == sorted(
        f"{i:04d}.{ext}" for i in range(4) for ext in ("pfld", "cam", "grav")
    )
    first = {p.name: p.read_bytes() for p in d.iterdir()}
    monkeypatch.setenv("PERSFIT_THREADS", "1")
    d2 = tmp_path / "s2"
    assert cli.run(argv[:-1] + [str(d2)]) == 0
    assert {p.name: p.read_bytes() for p in d2.iterdir()} == first
    capsys.readouterr()

    tables = []
    for threads in ("1", "3"):
        monkeypatch.setenv("PERSFIT_THREADS", threads)
        assert cli.run(["bench", "--dir", str(d), "--model", "radial1"]) == 0
        tables.append(capsys.readouterr().out)
    assert tables[0] == tables[1]
    header, row = tables[0].splitlines()
    assert header.startswith("method\tmedian_roll\tmedian_pitch\tmedian_vfov\tauc_roll@1")
    assert row.startswith("radial1/trivial\t")


def test_bench_empty_dir(tmp_path):
    assert cli.run(["bench", "--dir", str(tmp_path)]) == 2


def test_multi_calibrate(tmp_path, capsys):
    cam = CameraParams(64, 64, 60.0, k1=-0.05, model="radial1")
    paths = []
    for i, (r, p) in enumerate([(0.1, 0.2), (-0.3, 0.05), (0.2, -0.4)]):
        path = tmp_path / f"{i}.pfld"
        write_field(render_field(cam, GravityDir.from_roll_pitch(r, p)), path)
        paths.append(str(path))
    assert cli.run(["multi-calibrate", *paths, "--share", "intrinsics", "--model", "radial1"]) == 0
    lines = capsys.readouterr().out.splitlines()
    assert len(lines) == 4 and lines[0].startswith("shared ")
    assert float(parse_line(lines[0])["f"]) == pytest.approx(60.0, rel=1e-6)
    for i, line in enumerate(lines[1:]):
        v = parse_line(line)
        assert v["image"] == str(i)
    assert cli.run(["multi-calibrate", *paths, "--share", "independent", "--model", "radial1"]) == 0
    lines = capsys.readouterr().out.splitlines()
    assert len(lines) == 3
    assert all(list(parse_line(l))[2:] == RESULT_KEYS for l in lines)


def test_undistort_grid(tmp_path, capsys):
    cam = CameraParams(64, 48, 50.0, k1=0.1, model="radial1")
    write_camera(cam, tmp_path / "c.cam")
    assert cli.run(["undistort-grid", "--camera", str(tmp_path / "c.cam"), "--stride", "16"]) == 0
    lines = capsys.readouterr().out.splitlines()
    assert lines[0] == "px\tpy\tdx\tdy"
    rows = np.array([[float(v) for v in l.split("\t")] for l in lines[1:]])
    assert rows.shape == (4 * 3, 4)
    # barrel-free positive k1 pushes pixels outward, so undistortion pulls them inward
    r_before = np.hypot(rows[:, 0] - cam.cx, rows[:, 1] - cam.cy)
    r_after = np.hypot(rows[:, 0] + rows[:, 2] - cam.cx, rows[:, 1] + rows[:, 3] - cam.cy)
    assert np.all(r_after < r_before)


def test_thread_count(monkeypatch):
    monkeypatch.setenv("PERSFIT_THREADS", "2")
    assert cli.thread_count() == 2
    monkeypatch.delenv("PERSFIT_THREADS")
    assert cli.thread_count() >= 1


def test_console_entry_point():
    proc = subprocess.run([sys.executable, "-m", "persfit", "calibrate", "missing.pfld"], capture_output=True, text=True)
    assert proc.returncode == 2 and "missing.pfld" in proc.stderr
