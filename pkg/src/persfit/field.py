"""Perspective Field forward model.

For a pixel with undistorted normalized coordinates ``q = (u, v)`` and
gravity ``g``, the up-vector is the image direction in which a 3D point moves
when pushed against gravity::

    up ~ (I + (2 (k1 + 2 k2 r^2) / d) q q^T) (u gz - gx, v gz - gy)

and the latitude is ``asin(n . g / |n|)`` with the ray ``n = (u, v, 1)``.
Pixel ``(ix, iy)`` is sampled at its center ``(ix + 0.5, iy + 0.5)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .camera import CameraParams, normalize, undistort_points
from .errors import DegeneratePixel, DimensionMismatch, NonInvertible
from .gravity import GravityDir

# |up| below this (in normalized units) is treated as the vanishing point of g
DEGENERATE_UP_NORM = 1e-12


@dataclass
class PerspectiveField:
    """Per-pixel up-vectors ``(H, W, 2)``, latitudes and confidences ``(H, W)``."""

    up: np.ndarray
    latitude: np.ndarray
    conf_up: np.ndarray
    conf_lat: np.ndarray

    def __post_init__(self):
        self.up = np.asarray(self.up, dtype=float)
        self.latitude = np.asarray(self.latitude, dtype=float)
        self.conf_up = np.asarray(self.conf_up, dtype=float)
        self.conf_lat = np.asarray(self.conf_lat, dtype=float)
        h, w = self.latitude.shape
        if self.up.shape != (h, w, 2):
            raise DimensionMismatch(f"up grid {self.up.shape} does not match latitude {(h, w)}")
        for name in ("conf_up", "conf_lat"):
            if getattr(self, name).shape != (h, w):
                raise DimensionMismatch(f"{name} grid does not match latitude {(h, w)}")

    @property
    def width(self) -> int:
        return self.latitude.shape[1]

    @property
    def height(self) -> int:
        return self.latitude.shape[0]

    @property
    def size(self) -> tuple[int, int]:
        return (self.width, self.height)

    def copy(self) -> "PerspectiveField":
        return PerspectiveField(
            self.up.copy(), self.latitude.copy(), self.conf_up.copy(), self.conf_lat.copy()
        )

    def check_invariants(self, atol: float = 1e-6) -> None:
        norms = np.linalg.norm(self.up, axis=-1)
        if not np.all(np.abs(norms - 1.0) <= atol):
            raise ValueError("up-vectors are not unit length")
        if not np.all(np.abs(self.latitude) <= math.pi / 2 + atol):
            raise ValueError("latitude outside [-pi/2, pi/2]")
        for c in (self.conf_up, self.conf_lat):
            if not np.all((c >= 0) & (c <= 1)):
                raise ValueError("confidence outside [0, 1]")


def pixel_centers(width: int, height: int, stride: int = 1) -> np.ndarray:
    """Pixel-center coordinates of a stride grid, shape ``(Hs, Ws, 2)``."""
    xs = np.arange(0, width, stride) + 0.5
    ys = np.arange(0, height, stride) + 0.5
    gx, gy = np.meshgrid(xs, ys)
    return np.stack([gx, gy], axis=-1)


@dataclass
class PixelGeometry:
    """Intermediate quantities of the forward model at a set of pixels.

    All arrays are flat over the evaluated pixels. ``d``, ``ds`` and ``rho``
    are the radial factor, its derivative in ``s = r^2`` and the radial
    derivative ``d(r d)/dr``.
    """

    q: np.ndarray
    s: np.ndarray
    d: np.ndarray
    ds: np.ndarray
    rho: np.ndarray
    a: np.ndarray
    w: np.ndarray
    qw: np.ndarray
    ubar: np.ndarray
    up_norm: np.ndarray
    n_norm: np.ndarray
    sin_lat: np.ndarray
    valid: np.ndarray

    @property
    def up(self) -> np.ndarray:
        with np.errstate(divide="ignore", invalid="ignore"):
            return self.ubar / self.up_norm[:, None]

    @property
    def degenerate(self) -> np.ndarray:
        return self.valid & ~(self.up_norm > DEGENERATE_UP_NORM)


def pixel_geometry(params: CameraParams, g: GravityDir, pixels, extend: bool = False) -> PixelGeometry:
    """Evaluate the forward model at pixel coordinates ``(M, 2)``.

    Pixels beyond the invertible lens radius are marked invalid. By default
    they are evaluated at the principal point; with ``extend`` they are
    clamped to the fold radius instead (see :func:`undistort_points`).
    """
    pixels = np.asarray(pixels, dtype=float).reshape(-1, 2)
    k1, k2 = params.k1, params.k2
    q, valid = undistort_points(k1, k2, normalize(params, pixels), extend=extend)
    if not extend:
        q = np.where(valid[:, None], q, 0.0)
    s = np.sum(q * q, axis=1)
    d = 1.0 + k1 * s + k2 * s * s
    ds = k1 + 2.0 * k2 * s
    rho = d + 2.0 * ds * s
    a = 2.0 * ds / d
    gv = g.vec
    w = gv[2] * q - gv[:2]
    qw = np.sum(q * w, axis=1)
    ubar = w + (a * qw)[:, None] * q
    up_norm = np.sqrt(np.sum(ubar * ubar, axis=1))
    n_norm = np.sqrt(s + 1.0)
    sin_lat = (q[:, 0] * gv[0] + q[:, 1] * gv[1] + gv[2]) / n_norm
    return PixelGeometry(q, s, d, ds, rho, a, w, qw, ubar, up_norm, n_norm, sin_lat, valid)


def up_vector_at(params: CameraParams, g: GravityDir, p) -> np.ndarray:
    geo = pixel_geometry(params, g, np.reshape(p, (1, 2)))
    if not geo.valid[0]:
        raise NonInvertible(f"pixel {tuple(np.ravel(p))} lies outside the invertible lens radius")
    if geo.degenerate[0]:
        raise DegeneratePixel(f"pixel {tuple(np.ravel(p))} is the vanishing point of gravity")
    return geo.up[0]


def latitude_at(params: CameraParams, g: GravityDir, p) -> float:
    geo = pixel_geometry(params, g, np.reshape(p, (1, 2)))
    if not geo.valid[0]:
        raise NonInvertible(f"pixel {tuple(np.ravel(p))} lies outside the invertible lens radius")
    return float(np.arcsin(np.clip(geo.sin_lat[0], -1.0, 1.0)))


def render_field(params: CameraParams, g: GravityDir) -> PerspectiveField:
    """Noise-free Perspective Field with unit confidences.

    Pixels at the gravity vanishing point get ``up = (0, -1)`` and
    ``conf_up = 0``. Pixels beyond the invertible lens radius have no ray;
    they get ``up = (0, -1)``, latitude 0 and both confidences 0.
    """
    width, height = params.size
    centers = pixel_centers(width, height).reshape(-1, 2)
    geo = pixel_geometry(params, g, centers)
    up = geo.up
    bad_up = ~geo.valid | geo.degenerate
    up[bad_up] = (0.0, -1.0)
    lat = np.arcsin(np.clip(geo.sin_lat, -1.0, 1.0))
    lat[~geo.valid] = 0.0
    conf_up = np.where(bad_up, 0.0, 1.0)
    conf_lat = np.where(geo.valid, 1.0, 0.0)
    return PerspectiveField(
        up.reshape(height, width, 2),
        lat.reshape(height, width),
        conf_up.reshape(height, width),
        conf_lat.reshape(height, width),
    )
