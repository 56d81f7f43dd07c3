"""Command-line interface.

Every subcommand prints one machine-readable result block on stdout and
diagnostics on stderr. Exit codes:

    0  success
    1  usage error
    2  I/O or file-format error
    3  optimization failure (stalled damping, no RANSAC hypothesis, nothing to fit)
    4  ``check-jacobians`` found a block above tolerance

``PERSFIT_THREADS`` caps the worker threads used by ``synth`` and ``bench``.
"""

from __future__ import annotations

import argparse
import logging
import math
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import fieldio
from .calibrator import (
    CalibrationProblem,
    CalibrationResult,
    InitStrategy,
    Prior,
    Sharing,
    calibrate,
)
from .camera import CameraModel, normalize, undistort_points
from .errors import EmptyProblem, FieldFormatError, NoHypothesis
from .gravity import GravityDir, roll_pitch
from .jacobians import check_jacobians
from .lm import LMConfig, Status
from .metrics import ErrorSample, angular_errors, format_table, pixel_distortion_error, summarize
from .synth import ConfMode, NoiseSpec, sample_scenario, write_scenario

logger = logging.getLogger("persfit")

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_IO = 2
EXIT_OPTIM = 3
EXIT_CHECK = 4
JACOBIAN_TOL = 1e-5


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    """argparse that reports usage errors by exception instead of exit code 2."""

    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _fmt(x: float) -> str:
    return f"{float(x):.17g}"


def _gravity_arg(text: str) -> GravityDir:
    try:
        parts = [float(v) for v in text.split(",")]
        if len(parts) != 3:
            raise ValueError
        return GravityDir(parts)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected gx,gy,gz, got {text!r}") from None


def _positive_int(text: str) -> int:
    try:
        v = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected an integer, got {text!r}") from None
    if v < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {v}")
    return v


def _positive_float(text: str) -> float:
    try:
        v = float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected a number, got {text!r}") from None
    if not v > 0:
        raise argparse.ArgumentTypeError(f"expected a positive number, got {v}")
    return v


def thread_count() -> int:
    value = os.environ.get("PERSFIT_THREADS")
    if value:
        try:
            return max(1, int(value))
        except ValueError:
            logger.warning("ignoring invalid PERSFIT_THREADS=%r", value)
    return os.cpu_count() or 1


def _ordered_map(fn, items):
    """Map in parallel; results come back in input order."""
    items = list(items)
    workers = min(thread_count(), max(len(items), 1))
    if workers == 1:
        return [fn(it) for it in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------


def _add_solver_flags(p: argparse.ArgumentParser, fixes: bool = True) -> None:
    p.add_argument("--model", choices=[m.value for m in CameraModel], default="pinhole")
    p.add_argument("--init", choices=[i.value for i in InitStrategy], default="trivial")
    if fixes:
        fix = p.add_mutually_exclusive_group()
        fix.add_argument("--fix-gravity", type=_gravity_arg, metavar="GX,GY,GZ")
        fix.add_argument("--fix-focal", type=_positive_float, metavar="F")
    p.add_argument("--prior-focal", type=_positive_float, metavar="F")
    p.add_argument("--prior-focal-std", type=_positive_float, metavar="S")
    p.add_argument("--stride", type=_positive_int, default=1)
    p.add_argument("--max-iters", type=_positive_int, default=LMConfig.max_iters)
    p.add_argument("--lambda0", type=_positive_float, default=LMConfig.lambda0)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="persfit", description="Camera calibration from Perspective Fields.")
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging on stderr")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("calibrate", help="calibrate one field")
    p.add_argument("field", type=Path)
    _add_solver_flags(p)
    p.add_argument("--out", type=Path, help="write the estimated camera here")

    p = sub.add_parser("multi-calibrate", help="calibrate several fields jointly")
    p.add_argument("fields", type=Path, nargs="+")
    p.add_argument("--share", choices=["intrinsics", "independent"], default="intrinsics")
    _add_solver_flags(p, fixes=False)

    p = sub.add_parser("synth", help="write synthetic scenarios")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--count", type=_positive_int, default=1)
    p.add_argument("--width", type=_positive_int, default=320)
    p.add_argument("--height", type=_positive_int, default=320)
    p.add_argument("--model", choices=[m.value for m in CameraModel], default="pinhole")
    p.add_argument("--noise-up", type=float, default=0.0, metavar="DEG")
    p.add_argument("--noise-lat", type=float, default=0.0, metavar="DEG")
    p.add_argument("--outliers", type=float, default=0.0, metavar="FRAC")
    p.add_argument("--conf", choices=[c.value for c in ConfMode], default="unit")
    p.add_argument("--out", type=Path, required=True)

    p = sub.add_parser("bench", help="calibrate a scenario directory and report metrics")
    p.add_argument("--dir", type=Path, required=True)
    _add_solver_flags(p)

    p = sub.add_parser("check-jacobians", help="compare analytic and numeric Jacobians")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--trials", type=_positive_int, default=100)

    p = sub.add_parser("undistort-grid", help="print the undistortion displacement field")
    p.add_argument("--camera", type=Path, required=True)
    p.add_argument("--stride", type=_positive_int, default=16)
    return parser


def _problem_kwargs(args) -> dict:
    if (args.prior_focal is None) != (args.prior_focal_std is None):
        raise UsageError("--prior-focal and --prior-focal-std must be given together")
    fixed, priors = {}, {}
    if getattr(args, "fix_gravity", None) is not None:
        fixed["gravity"] = args.fix_gravity
    if getattr(args, "fix_focal", None) is not None:
        if args.prior_focal is not None:
            raise UsageError("--fix-focal and --prior-focal are mutually exclusive")
        fixed["focal"] = args.fix_focal
    if args.prior_focal is not None:
        priors["focal"] = Prior(args.prior_focal, args.prior_focal_std)
    return dict(
        model=args.model,
        init=args.init,
        fixed=fixed,
        priors=priors,
        stride=args.stride,
        lm=LMConfig(lambda0=args.lambda0, max_iters=args.max_iters),
    )


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def _gravity_text(g: GravityDir) -> str:
    return "(" + ",".join(_fmt(v) for v in g.vec) + ")"


def format_result(result: CalibrationResult, image: int = 0) -> str:
    """The single-line ``key=value`` calibration record."""
    g = result.gravities[image]
    cam = result.cameras[image]
    roll, pitch = roll_pitch(g)
    fields = [
        ("roll", _fmt(math.degrees(roll))),
        ("pitch", _fmt(math.degrees(pitch))),
        ("gravity", _gravity_text(g)),
        ("f", _fmt(cam.f)),
        ("vfov_deg", _fmt(math.degrees(cam.vfov))),
        ("k1", _fmt(cam.k1)),
        ("k2", _fmt(cam.k2)),
        ("sigma_gravity_deg", _fmt(math.degrees(result.gravity_std[image]))),
        ("sigma_vfov_deg", _fmt(math.degrees(result.vfov_std[image]))),
        ("sigma_k1", _fmt(result.k_std[image][0])),
        ("iters", str(result.iterations)),
        ("status", result.status.value),
    ]
    return " ".join(f"{k}={v}" for k, v in fields)


def _status_code(result: CalibrationResult) -> int:
    if result.status is Status.STALLED:
        logger.error("optimization stalled (damping exceeded its maximum)")
        return EXIT_OPTIM
    return EXIT_OK


def cmd_calibrate(args) -> int:
    kwargs = _problem_kwargs(args)
    field = fieldio.read_field(args.field)
    result = calibrate(CalibrationProblem([field], **kwargs))
    print(format_result(result))
    if args.out is not None:
        fieldio.write_camera(result.camera, args.out)
    return _status_code(result)


def cmd_multi_calibrate(args) -> int:
    kwargs = _problem_kwargs(args)
    fields = [fieldio.read_field(p) for p in args.fields]
    sharing = Sharing.SHARED_INTRINSICS if args.share == "intrinsics" else Sharing.INDEPENDENT
    try:
        problem = CalibrationProblem(fields, sharing=sharing, **kwargs)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    result = calibrate(problem)
    if sharing is Sharing.SHARED_INTRINSICS:
        cam = result.camera
        print(
            f"shared f={_fmt(cam.f)} vfov_deg={_fmt(math.degrees(cam.vfov))} k1={_fmt(cam.k1)} k2={_fmt(cam.k2)} "
            f"sigma_vfov_deg={_fmt(math.degrees(result.vfov_std[0]))} sigma_k1={_fmt(result.k_std[0][0])} "
            f"iters={result.iterations} status={result.status.value}"
        )
        for i, path in enumerate(args.fields):
            roll, pitch = roll_pitch(result.gravities[i])
            print(
                f"image={i} path={path} roll={_fmt(math.degrees(roll))} pitch={_fmt(math.degrees(pitch))} "
                f"gravity={_gravity_text(result.gravities[i])} "
                f"sigma_gravity_deg={_fmt(math.degrees(result.gravity_std[i]))}"
            )
    else:
        for i, path in enumerate(args.fields):
            print(f"image={i} path={path} {format_result(result, i)}")
    return _status_code(result)


def cmd_synth(args) -> int:
    if args.width < 32 or args.height < 32:
        raise UsageError("--width and --height must be at least 32")
    try:
        noise = NoiseSpec(args.noise_up, args.noise_lat, args.outliers, args.conf)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    seeds = scenario_seeds(args.seed, args.count)

    def one(i):
        scenario = sample_scenario(seeds[i], args.width, args.height, args.model, noise)
        write_scenario(scenario, args.out, i)

    _ordered_map(one, range(args.count))
    print(f"written={args.count} dir={args.out}")
    return EXIT_OK


def scenario_seeds(seed: int, count: int) -> list[int]:
    """Independent 64-bit scenario seeds derived from one master seed."""
    state = np.random.SeedSequence(seed).generate_state(count, dtype=np.uint64)
    return [int(s) for s in state]


def bench_directory(directory: Path, kwargs: dict) -> list[ErrorSample]:
    stems = sorted(p.with_suffix("") for p in Path(directory).glob("*.pfld"))
    if not stems:
        raise FileNotFoundError(f"no .pfld files in {directory}")

    def one(stem):
        field = fieldio.read_field(stem.with_suffix(".pfld"))
        cam = fieldio.read_camera(stem.with_suffix(".cam"))
        g = fieldio.read_gravity(stem.with_suffix(".grav"))
        try:
            result = calibrate(CalibrationProblem([field], **kwargs))
        except (EmptyProblem, NoHypothesis) as exc:
            logger.warning("%s: calibration failed (%s)", stem.name, exc)
            return ErrorSample.failure()
        if result.status is Status.STALLED:
            return ErrorSample.failure()
        e = angular_errors((cam, g), (result.camera, result.gravity))
        pix = pixel_distortion_error(cam, result.camera.k)
        return ErrorSample(e.roll_err, e.pitch_err, e.gravity_err, e.vfov_err, pix)

    return _ordered_map(one, stems)


def cmd_bench(args) -> int:
    kwargs = _problem_kwargs(args)
    samples = bench_directory(args.dir, kwargs)
    name = f"{args.model}/{args.init}"
    sys.stdout.write(format_table({name: summarize(samples)}))
    return EXIT_OK


def cmd_check_jacobians(args) -> int:
    errors = check_jacobians(args.seed, args.trials)
    ok = True
    for name, err in errors.items():
        passed = err < JACOBIAN_TOL
        ok &= passed
        print(f"block={name} max_rel_err={err:.3e} {'ok' if passed else 'FAIL'}")
    print(f"status={'ok' if ok else 'fail'}")
    return EXIT_OK if ok else EXIT_CHECK


def cmd_undistort_grid(args) -> int:
    cam = fieldio.read_camera(args.camera)
    xs = np.arange(0, cam.width, args.stride) + 0.5
    ys = np.arange(0, cam.height, args.stride) + 0.5
    px, py = np.meshgrid(xs, ys)
    pixels = np.stack([px.ravel(), py.ravel()], axis=1)
    q, valid = undistort_points(cam.k1, cam.k2, normalize(cam, pixels))
    if not valid.all():
        logger.warning("%d pixel(s) lie beyond the lens fold and are skipped", int((~valid).sum()))
    moved = q * cam.f + cam.c
    lines = ["px\tpy\tdx\tdy"]
    for (x, y), (ux, uy) in zip(pixels[valid], moved[valid]):
        lines.append(f"{x:.17g}\t{y:.17g}\t{ux - x:.17g}\t{uy - y:.17g}")
    sys.stdout.write("\n".join(lines) + "\n")
    return EXIT_OK


COMMANDS = {
    "calibrate": cmd_calibrate,
    "multi-calibrate": cmd_multi_calibrate,
    "synth": cmd_synth,
    "bench": cmd_bench,
    "check-jacobians": cmd_check_jacobians,
    "undistort-grid": cmd_undistort_grid,
}


def run(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(str(exc), file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    try:
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"persfit {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (OSError, FieldFormatError) as exc:
        print(f"persfit {args.command}: {exc}", file=sys.stderr)
        return EXIT_IO
    except (EmptyProblem, NoHypothesis) as exc:
        print(f"persfit {args.command}: optimization failed: {exc}", file=sys.stderr)
        return EXIT_OPTIM


def main() -> None:
    sys.exit(run())
