"""Camera intrinsics and the polynomial radial lens model.

Pixels map to normalized coordinates with ``q = (p - c) / f``. A radial camera
distorts normalized coordinates as ``q_d = d(r^2) * q`` with
``d(s) = 1 + k1 * s + k2 * s^2``. Pixel coordinates always live in the
distorted image; the undistorted ray of a pixel is ``(undistort(q_d), 1)``.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, replace

import numpy as np

from .errors import DomainError, NonInvertible

NEWTON_MAX_ITERS = 50
NEWTON_TOL = 1e-12


class CameraModel(str, enum.Enum):
    PINHOLE = "pinhole"
    RADIAL1 = "radial1"
    RADIAL2 = "radial2"

    @property
    def num_k(self) -> int:
        return {"pinhole": 0, "radial1": 1, "radial2": 2}[self.value]


@dataclass(frozen=True)
class CameraParams:
    """Square-pixel, zero-skew camera with optional radial distortion.

    ``cx``/``cy`` default to the image center. Unused distortion entries must
    be exactly zero for the given model.
    """

    width: int
    height: int
    f: float
    cx: float | None = None
    cy: float | None = None
    k1: float = 0.0
    k2: float = 0.0
    model: CameraModel = CameraModel.PINHOLE

    def __post_init__(self):
        object.__setattr__(self, "model", CameraModel(self.model))
        if self.cx is None:
            object.__setattr__(self, "cx", self.width / 2.0)
        if self.cy is None:
            object.__setattr__(self, "cy", self.height / 2.0)
        if not (self.f > 0 and math.isfinite(self.f)):
            raise ValueError(f"focal length must be positive and finite, got {self.f}")
        if int(self.width) != self.width or int(self.height) != self.height:
            raise ValueError("image size must be integral")
        if self.width < 1 or self.height < 1:
            raise ValueError(f"invalid image size {self.width}x{self.height}")
        if self.model.num_k < 1 and self.k1 != 0.0:
            raise ValueError(f"k1 must be 0 for model {self.model.value}")
        if self.model.num_k < 2 and self.k2 != 0.0:
            raise ValueError(f"k2 must be 0 for model {self.model.value}")

    @property
    def size(self) -> tuple[int, int]:
        return (int(self.width), int(self.height))

    @property
    def c(self) -> np.ndarray:
        return np.array([self.cx, self.cy], dtype=float)

    @property
    def k(self) -> tuple[float, float]:
        return (self.k1, self.k2)

    @property
    def vfov(self) -> float:
        return vfov(self)

    def with_focal(self, f: float) -> "CameraParams":
        return replace(self, f=float(f))

    def with_k(self, k1: float = 0.0, k2: float = 0.0) -> "CameraParams":
        return replace(self, k1=float(k1), k2=float(k2))


def normalize(params: CameraParams, p) -> np.ndarray:
    """Pixel coordinates ``(..., 2)`` to normalized (distorted) coordinates."""
    p = np.asarray(p, dtype=float)
    return (p - params.c) / params.f


def denormalize(params: CameraParams, q) -> np.ndarray:
    q = np.asarray(q, dtype=float)
    return q * params.f + params.c


def radial_factor(s, k1: float, k2: float):
    """``d(s) = 1 + k1 s + k2 s^2`` with ``s = r^2``."""
    return 1.0 + k1 * s + k2 * s * s


def distort(params: CameraParams, q) -> np.ndarray:
    q = np.asarray(q, dtype=float)
    if params.model is CameraModel.PINHOLE:
        return q.copy()
    s = np.sum(q * q, axis=-1, keepdims=True)
    return radial_factor(s, params.k1, params.k2) * q


def fold_radius(k1: float, k2: float) -> float:
    """Smallest undistorted radius where ``r * d(r^2)`` stops increasing.

    This is the first positive root of ``1 + 3 k1 s + 5 k2 s^2`` (``s = r^2``);
    ``inf`` when the radial profile is monotone on ``[0, inf)``.
    """
    if k2 == 0.0:
        return math.sqrt(-1.0 / (3.0 * k1)) if k1 < 0 else math.inf
    a, b = 5.0 * k2, 3.0 * k1
    disc = b * b - 4.0 * a
    if disc < 0:
        return math.inf
    # cancellation-free quadratic roots q / a and 1 / q; stays finite for tiny a
    q = -0.5 * (b + math.copysign(math.sqrt(disc), b))
    roots = [1.0 / q] if q != 0.0 else []
    roots.append(q / a)
    pos = [s for s in roots if s > 0 and math.isfinite(s)]
    return math.sqrt(min(pos)) if pos else math.inf


def max_distorted_radius(k1: float, k2: float) -> float:
    r = fold_radius(k1, k2)
    if math.isinf(r):
        return math.inf
    return r * radial_factor(r * r, k1, k2)


def undistort_radius(rd, k1: float, k2: float):
    """Invert ``r * d(r^2) = rd`` on the monotone branch starting at 0.

    Safeguarded Newton iteration: iterates stay inside the bracket
    ``[lo, hi]`` around the root and fall back to bisection when a Newton
    step leaves it.

    Returns:
        ``(r, valid)`` arrays; ``r`` is NaN where ``valid`` is False.
    """
    rd = np.asarray(rd, dtype=float)
    r_fold = fold_radius(k1, k2)
    rd_max = max_distorted_radius(k1, k2)
    valid = np.isfinite(rd) & (rd >= 0) & (rd < rd_max)
    if k1 == 0.0 and k2 == 0.0:
        return np.where(valid, rd, np.nan), valid

    target = np.where(valid, rd, 0.0)
    lo = np.zeros_like(target)
    if math.isfinite(r_fold):
        hi = np.full_like(target, r_fold)
    else:
        # r d(r^2) >= r * min(1, d) ... expand until the bracket holds the root
        hi = np.maximum(target, 1.0)
        for _ in range(200):
            short = hi * radial_factor(hi * hi, k1, k2) < target
            if not short.any():
                break
            hi = np.where(short, 2.0 * hi, hi)
    r = np.clip(target, lo, hi)
    converged = target == 0.0
    for _ in range(NEWTON_MAX_ITERS):
        s = r * r
        g = r * radial_factor(s, k1, k2) - target
        lo = np.where(g < 0, r, lo)
        hi = np.where(g > 0, r, hi)
        dg = 1.0 + 3.0 * k1 * s + 5.0 * k2 * s * s
        with np.errstate(divide="ignore", invalid="ignore"):
            step = g / dg
        r_new = r - step
        # a converged Newton step may land a rounding error outside the bracket
        done = (dg > 0) & (np.abs(step) <= NEWTON_TOL)
        bad = ~done & (~np.isfinite(r_new) | (r_new <= lo) | (r_new >= hi) | (dg <= 0))
        r_new = np.where(bad, 0.5 * (lo + hi), r_new)
        done |= np.abs(r_new - r) <= NEWTON_TOL
        r = np.where(converged, r, r_new)
        converged |= done
        if converged[valid].all():
            break
    valid = valid & converged
    return np.where(valid, r, np.nan), valid


def undistort_points(k1: float, k2: float, qd, extend: bool = False) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized undistortion of normalized points ``(..., 2)``.

    Returns ``(q, valid)``; invalid points (outside the invertible radius) are
    NaN rather than raising. With ``extend`` they are instead placed on the
    fold radius along their own direction, which keeps the map continuous.
    """
    qd = np.asarray(qd, dtype=float)
    if k1 == 0.0 and k2 == 0.0:
        return qd.copy(), np.ones(qd.shape[:-1], dtype=bool)
    rd = np.sqrt(np.sum(qd * qd, axis=-1))
    r, valid = undistort_radius(rd, k1, k2)
    d = radial_factor(r * r, k1, k2)
    with np.errstate(divide="ignore", invalid="ignore"):
        q = qd / d[..., None]
    if extend and not valid.all():
        with np.errstate(divide="ignore", invalid="ignore"):
            folded = qd * (fold_radius(k1, k2) / rd)[..., None]
        q = np.where(valid[..., None], q, folded)
    else:
        q = np.where(valid[..., None], q, np.nan)
    return q, valid


def undistort(params: CameraParams, qd) -> np.ndarray:
    """Inverse of :func:`distort`; raises :class:`NonInvertible` on failure."""
    qd = np.asarray(qd, dtype=float)
    if params.model is CameraModel.PINHOLE:
        return qd.copy()
    q, valid = undistort_points(params.k1, params.k2, qd)
    if not np.all(valid):
        bad = np.argwhere(~np.atleast_1d(valid))
        raise NonInvertible(
            f"{len(bad)} point(s) outside the invertible radius "
            f"{max_distorted_radius(params.k1, params.k2):.6g} (k1={params.k1}, k2={params.k2})"
        )
    return q


def vfov(params: CameraParams) -> float:
    """Vertical field of view in radians, ``2 atan(H / 2f)``."""
    return 2.0 * math.atan2(params.height / 2.0, params.f)


def focal_from_vfov(fov: float, height: float) -> float:
    if not (0.0 < fov < math.pi):
        raise DomainError(f"vertical field of view must lie in (0, pi), got {fov}")
    if height < 1:
        raise DomainError(f"image height must be >= 1, got {height}")
    return height / 2.0 / math.tan(fov / 2.0)
