"""Calibration error metrics and benchmark summaries.

Angular errors are in degrees. A failed estimate is recorded as ``inf`` and
counts as never recalled. AUC values are percentages of the area under the
recall curve up to a threshold, with each error first raised to at least
``AUC_MIN_ERROR_DEG``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .camera import CameraParams, denormalize, radial_factor, vfov
from .errors import DimensionMismatch, EmptyInput
from .field import pixel_centers
from .gravity import GravityDir, angle_between, roll_pitch

AUC_MIN_ERROR_DEG = 1.0
AUC_THRESHOLDS = (1.0, 5.0, 10.0)
PIXEL_RECALL_THRESHOLDS = (0.5, 1.0, 3.0, 5.0)
PIXEL_GRID_STRIDE = 4
TABLE_COLUMNS = (
    "median_roll",
    "median_pitch",
    "median_vfov",
    *(f"auc_{q}@{int(t)}" for q in ("roll", "pitch", "vfov") for t in AUC_THRESHOLDS),
)


@dataclass(frozen=True)
class ErrorSample:
    roll_err: float
    pitch_err: float
    gravity_err: float
    vfov_err: float
    pixel_dist_err: float = 0.0

    @classmethod
    def failure(cls) -> "ErrorSample":
        inf = math.inf
        return cls(inf, inf, inf, inf, inf)


def _wrap(angle: float) -> float:
    return abs(math.remainder(angle, 2.0 * math.pi))


def angular_errors(gt: tuple[CameraParams, GravityDir], est: tuple[CameraParams, GravityDir]) -> ErrorSample:
    """Roll, pitch, gravity-angle and vertical-FoV errors in degrees."""
    cam_gt, g_gt = gt
    cam_est, g_est = est
    if cam_gt.size != cam_est.size:
        raise DimensionMismatch(f"image sizes differ: {cam_gt.size} vs {cam_est.size}")
    r_gt, p_gt = roll_pitch(g_gt)
    r_est, p_est = roll_pitch(g_est)
    return ErrorSample(
        roll_err=math.degrees(_wrap(r_gt - r_est)),
        pitch_err=math.degrees(abs(p_gt - p_est)),
        gravity_err=math.degrees(angle_between(g_gt.vec, g_est.vec)),
        vfov_err=math.degrees(abs(vfov(cam_gt) - vfov(cam_est))),
    )


def median(values: Iterable[float]) -> float:
    """Median; an even count averages the two middle values."""
    arr = np.asarray(list(values), dtype=float)
    if arr.size == 0:
        raise EmptyInput("median of no values")
    return float(np.median(arr))


def auc(errors: Sequence[float], threshold: float) -> float:
    """Area under the recall curve on ``[0, threshold]``, in percent.

    With errors clamped to ``e' = max(e, 1)``, the recall at ``x`` is the
    fraction of ``e' <= x``. Its integral is exact: each sample contributes
    ``max(0, t - e') / t``.
    """
    if not threshold > 0:
        raise ValueError(f"AUC threshold must be positive, got {threshold}")
    e = np.asarray(list(errors), dtype=float)
    if e.size == 0:
        raise EmptyInput("AUC of no errors")
    if np.any(np.isnan(e)) or np.any(e < 0):
        raise ValueError("errors must be non-negative (inf marks a failure)")
    clamped = np.maximum(e, AUC_MIN_ERROR_DEG)
    area = np.maximum(threshold - clamped, 0.0) / threshold
    return float(np.mean(area) * 100.0)


def pixel_distortion_error(gt: CameraParams, est_k: Sequence[float], stride: int = PIXEL_GRID_STRIDE) -> float:
    """Mean pixel distance between the ground-truth and estimated distortions.

    The in-frame pixel-center grid (every ``stride``-th pixel) is normalized
    with the ground-truth intrinsics and taken as undistorted coordinates;
    both distortion models are applied and mapped back with the ground-truth
    focal length and principal point.
    """
    k = list(est_k) + [0.0] * (2 - len(est_k))
    if len(k) != 2:
        raise DimensionMismatch(f"expected at most 2 distortion coefficients, got {len(est_k)}")
    pts = pixel_centers(gt.width, gt.height, stride).reshape(-1, 2)
    q = (pts - gt.c) / gt.f
    s = np.sum(q * q, axis=1, keepdims=True)
    p_gt = denormalize(gt, radial_factor(s, gt.k1, gt.k2) * q)
    p_est = denormalize(gt, radial_factor(s, k[0], k[1]) * q)
    return float(np.mean(np.linalg.norm(p_gt - p_est, axis=1)))


def recall(errors: Sequence[float], threshold: float) -> float:
    e = np.asarray(list(errors), dtype=float)
    if e.size == 0:
        raise EmptyInput("recall of no errors")
    return float(np.mean(e <= threshold) * 100.0)


def pixel_recalls(errors: Sequence[float], thresholds=PIXEL_RECALL_THRESHOLDS) -> dict[float, float]:
    return {t: recall(errors, t) for t in thresholds}


def summarize(samples: Sequence[ErrorSample]) -> dict[str, float]:
    """Benchmark row: medians and AUCs of roll, pitch and vfov errors."""
    if not samples:
        raise EmptyInput("no error samples")
    row = {}
    series = {
        "roll": [s.roll_err for s in samples],
        "pitch": [s.pitch_err for s in samples],
        "vfov": [s.vfov_err for s in samples],
    }
    for name, errs in series.items():
        row[f"median_{name}"] = median(errs)
    for name, errs in series.items():
        for t in AUC_THRESHOLDS:
            row[f"auc_{name}@{int(t)}"] = auc(errs, t)
    return row


def format_table(rows: dict[str, dict[str, float]]) -> str:
    """Tab-separated table, one row per method, two decimals."""
    lines = ["\t".join(("method",) + TABLE_COLUMNS)]
    for method, row in rows.items():
        lines.append("\t".join([method] + [f"{row[c]:.2f}" for c in TABLE_COLUMNS]))
    return "\n".join(lines) + "\n"
