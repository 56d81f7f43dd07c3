"""Residuals of the confidence-weighted field-alignment cost and their Jacobians.

Per pixel three rows are stacked: the two components of ``up(theta) - up_obs``
(weight ``conf_up``) and ``sin(lat(theta)) - sin(lat_obs)`` (weight
``conf_lat``). Columns follow the local parametrization
``[dg_a, dg_b, dlog_f, dk1, dk2]``: gravity moves on the sphere through
:func:`persfit.gravity.retract`, the focal length multiplicatively and the
distortion coefficients additively.

Focal length and distortion only enter through the undistorted coordinates
``q``, which move radially: ``dq = c * q`` with

    c_logf = -d / rho,  c_k1 = -s / rho,  c_k2 = -s^2 / rho

(``s = |q|^2``, ``rho = d + 2 s dd/ds``), from implicit differentiation of
``d(s) q = (p - c) / f``. The distortion coefficients additionally appear
directly in the up-vector factor ``a = 2 (dd/ds) / d``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .camera import CameraModel, CameraParams
from .errors import DimensionMismatch, NonInvertible
from .field import PerspectiveField, PixelGeometry, pixel_geometry
from .gravity import GravityDir, retract, tangent_basis
from .synth import sample_geometry

PARAM_NAMES = ("gravity", "focal", "k1", "k2")
PARAM_WIDTH = {"gravity": 2, "focal": 1, "k1": 1, "k2": 1}
FD_STEP = 1e-6


@dataclass
class ResidualBlock:
    r: np.ndarray
    w: np.ndarray
    J: np.ndarray | None = None

    @property
    def cost(self) -> float:
        return float(np.sum(self.w * self.r * self.r))


@dataclass
class Observations:
    """Observed field values at the active pixels, flattened."""

    pixels: np.ndarray
    up: np.ndarray
    sin_lat: np.ndarray
    conf_up: np.ndarray
    conf_lat: np.ndarray

    def __len__(self):
        return len(self.pixels)

    @property
    def weights(self) -> np.ndarray:
        return np.stack([self.conf_up, self.conf_up, self.conf_lat], axis=1).reshape(-1)

    def subset(self, keep) -> "Observations":
        return Observations(
            self.pixels[keep], self.up[keep], self.sin_lat[keep], self.conf_up[keep], self.conf_lat[keep]
        )


def gather(field: PerspectiveField, active=None) -> Observations:
    """Collect observations at ``active`` pixels.

    ``active`` is ``None`` (every pixel), a boolean ``(H, W)`` mask, or an
    integer array of ``(ix, iy)`` pixel indices.
    """
    h, w = field.height, field.width
    if active is None:
        iy, ix = np.mgrid[0:h, 0:w]
        ix, iy = ix.ravel(), iy.ravel()
    else:
        active = np.asarray(active)
        if active.dtype == bool:
            if active.shape != (h, w):
                raise DimensionMismatch(f"mask shape {active.shape} does not match field {(h, w)}")
            iy, ix = np.nonzero(active)
        else:
            active = active.reshape(-1, 2)
            ix, iy = active[:, 0], active[:, 1]
            if np.any((ix < 0) | (ix >= w) | (iy < 0) | (iy >= h)):
                raise DimensionMismatch("active pixel outside the field")
    pixels = np.stack([ix + 0.5, iy + 0.5], axis=1).astype(float)
    return Observations(
        pixels,
        field.up[iy, ix],
        np.sin(field.latitude[iy, ix]),
        field.conf_up[iy, ix],
        field.conf_lat[iy, ix],
    )


def _check_size(params: CameraParams, field: PerspectiveField):
    if params.size != field.size:
        raise DimensionMismatch(f"camera size {params.size} does not match field size {field.size}")


def free_columns(model: CameraModel, free=None) -> list[str]:
    """Ordered free parameter names for one image, restricted to the model."""
    names = [n for n in PARAM_NAMES if n in ("gravity", "focal") or int(n[1]) <= model.num_k]
    if free is None:
        return names
    return [n for n in names if n in free]


def _stack_residuals(geo: PixelGeometry, obs: Observations) -> tuple[np.ndarray, np.ndarray]:
    r_up = geo.up - obs.up
    # through the latitude, like the observation, so a rendered field gives exactly zero
    r_lat = np.sin(np.arcsin(np.clip(geo.sin_lat, -1.0, 1.0))) - obs.sin_lat
    r = np.concatenate([r_up, r_lat[:, None]], axis=1)
    w = np.stack([obs.conf_up, obs.conf_up, obs.conf_lat], axis=1)
    # no up-vector exists at the gravity vanishing point
    degenerate = geo.degenerate
    if degenerate.any():
        r[degenerate, :2] = 0.0
        w[degenerate, :2] = 0.0
    return r.reshape(-1), w.reshape(-1)


def evaluate(params: CameraParams, g: GravityDir, obs: Observations, extend: bool = False) -> ResidualBlock:
    """Residuals at the observed pixels.

    Raises :class:`NonInvertible` if a pixel lies beyond the lens fold,
    unless ``extend`` is set, in which case such pixels are clamped to the
    fold radius.
    """
    geo = pixel_geometry(params, g, obs.pixels, extend=extend)
    if not extend and not geo.valid.all():
        raise NonInvertible(f"{int((~geo.valid).sum())} active pixel(s) outside the invertible lens radius")
    r, w = _stack_residuals(geo, obs)
    return ResidualBlock(r, w)


def residuals(params: CameraParams, g: GravityDir, field: PerspectiveField, active=None) -> ResidualBlock:
    """Residual vector and weights (no Jacobian) at the active pixels."""
    _check_size(params, field)
    return evaluate(params, g, gather(field, active))


def analytic_jacobian(params: CameraParams, g: GravityDir, geo: PixelGeometry) -> np.ndarray:
    """Full per-pixel Jacobian, shape ``(M, 3, 3 + D)``.

    Columns are ``[dg_a, dg_b, dlog_f, dk1..dkD]`` with ``D`` the number of
    distortion coefficients of ``params.model``.
    """
    num_k = params.model.num_k
    m = len(geo.s)
    J = np.zeros((m, 3, 3 + num_k))
    gv = g.vec
    B = tangent_basis(g)
    q, s, d, ds, rho, a = geo.q, geo.s, geo.d, geo.ds, geo.rho, geo.a
    qw = geo.qw

    with np.errstate(divide="ignore", invalid="ignore"):
        up = geo.ubar / geo.up_norm[:, None]
        inv_norm = 1.0 / geo.up_norm
    # clamped pixels (beyond the fold) still respond to gravity, not to intrinsics
    ok = ~geo.degenerate & np.isfinite(geo.s)
    up = np.where(ok[:, None], up, 0.0)
    inv_norm = np.where(ok, inv_norm, 0.0)
    # projector onto the normal of the unit up-vector, scaled by 1/|ubar|
    P = (np.eye(2)[None] - up[:, :, None] * up[:, None, :]) * inv_norm[:, None, None]

    # d ubar / d g = (I + a q q^T) [-I | q]
    Mq = np.eye(2)[None] + a[:, None, None] * q[:, :, None] * q[:, None, :]
    dubar_dg = np.concatenate([-Mq, (1.0 + a * s)[:, None, None] * q[:, :, None]], axis=2)
    J[:, :2, :2] = P @ dubar_dg @ B

    nhat = np.concatenate([q, np.ones((m, 1))], axis=1) / geo.n_norm[:, None]
    J[:, 2, :2] = nhat @ B

    # radial coefficient c of dq = c q for each intrinsic column; clamped
    # pixels sit where rho = 0 and get no intrinsic columns (zeroed below)
    rho = np.where(geo.valid, rho, 1.0)
    coeffs = [-d / rho]
    da_direct = [np.zeros(m)]
    if num_k >= 1:
        coeffs.append(-s / rho)
        da_direct.append(2.0 * (d - ds * s) / (d * d))
    if num_k >= 2:
        coeffs.append(-s * s / rho)
        da_direct.append(2.0 * s * (2.0 * d - ds * s) / (d * d))
    da_ds = (4.0 * params.k2 * d - 2.0 * ds * ds) / (d * d)
    q_dot_g = q[:, 0] * gv[0] + q[:, 1] * gv[1]
    for j, (c, dad) in enumerate(zip(coeffs, da_direct)):
        da = da_ds * 2.0 * c * s + dad
        scale = gv[2] * c + da * qw + a * c * (2.0 * qw + gv[2] * s)
        dubar = scale[:, None] * q
        J[:, :2, 2 + j] = np.einsum("mij,mj->mi", P, dubar)
        J[:, 2, 2 + j] = c * (q_dot_g - geo.sin_lat * s / geo.n_norm) / geo.n_norm
    J[~ok, :2, :] = 0.0
    J[~geo.valid, :, 2:] = 0.0
    return J


def numeric_jacobian(
    params: CameraParams, g: GravityDir, obs: Observations, h: float = FD_STEP, extend: bool = False
) -> np.ndarray:
    """Five-point central differences in the local parametrization, shape ``(M, 3, 3 + D)``."""
    num_k = params.model.num_k

    def rows(p, gg):
        geo = pixel_geometry(p, gg, obs.pixels, extend=extend)
        return np.concatenate([geo.up, geo.sin_lat[:, None]], axis=1)

    def moved(j, t):
        if j < 2:
            e = np.zeros(2)
            e[j] = t
            return rows(params, retract(g, e))
        if j == 2:
            return rows(params.with_focal(params.f * np.exp(t)), g)
        k = [params.k1, params.k2]
        k[j - 3] += t
        return rows(params.with_k(*k), g)

    J = np.zeros((len(obs), 3, 3 + num_k))
    for j in range(3 + num_k):
        J[:, :, j] = (8.0 * (moved(j, h) - moved(j, -h)) - (moved(j, 2 * h) - moved(j, -2 * h))) / (12.0 * h)
    return J


def _column_slices(model: CameraModel) -> dict[str, slice]:
    out = {"gravity": slice(0, 2), "focal": slice(2, 3)}
    for j in range(model.num_k):
        out[f"k{j + 1}"] = slice(3 + j, 4 + j)
    return out


def select_columns(J_full: np.ndarray, model: CameraModel, free) -> np.ndarray:
    """Keep the columns of the named free parameters, in canonical order."""
    slices = _column_slices(model)
    idx = np.concatenate([np.arange(3 + model.num_k)[slices[n]] for n in free_columns(model, free)])
    return J_full[..., idx.astype(int)]


def linearize(
    params: CameraParams,
    g: GravityDir,
    obs: Observations,
    free=None,
    method: str = "analytic",
    extend: bool = False,
) -> ResidualBlock:
    geo = pixel_geometry(params, g, obs.pixels, extend=extend)
    if not extend and not geo.valid.all():
        raise NonInvertible(f"{int((~geo.valid).sum())} active pixel(s) outside the invertible lens radius")
    r, w = _stack_residuals(geo, obs)
    if method == "analytic":
        J_full = analytic_jacobian(params, g, geo)
    elif method == "numeric":
        J_full = numeric_jacobian(params, g, obs, extend=extend)
        J_full[geo.degenerate, :2, :] = 0.0
        J_full[~geo.valid, :, 2:] = 0.0
    else:
        raise ValueError(f"unknown Jacobian method {method!r}")
    J = select_columns(J_full, params.model, free)
    return ResidualBlock(r, w, J.reshape(3 * len(obs), -1))


def jacobian(
    params: CameraParams,
    g: GravityDir,
    field: PerspectiveField,
    active=None,
    free=None,
    method: str = "analytic",
) -> ResidualBlock:
    """Residuals, weights and Jacobian at the active pixels.

    Args:
        free: parameter names to keep as columns (default: all of
            ``gravity``, ``focal`` and the model's ``k`` coefficients).
        method: ``"analytic"`` or ``"numeric"`` (central differences).
    """
    _check_size(params, field)
    return linearize(params, g, gather(field, active), free=free, method=method)


BLOCKS = {
    "du_dg": (slice(0, 2), slice(0, 2)),
    "du_df": (slice(0, 2), slice(2, 3)),
    "du_dk": (slice(0, 2), slice(3, None)),
    "dsinlat_dg": (slice(2, 3), slice(0, 2)),
    "dsinlat_df": (slice(2, 3), slice(2, 3)),
    "dsinlat_dk": (slice(2, 3), slice(3, None)),
}
CHECK_SCALE_FLOOR = 1e-3


def block_errors(J_analytic: np.ndarray, J_numeric: np.ndarray) -> dict[str, float]:
    """Worst per-pixel relative error of each Jacobian block.

    The error of a block at one pixel is ``|A - N|_F / max(|N|_F, floor)``,
    so entries that vanish analytically are compared in absolute terms.
    """
    out = {}
    for name, (rows, cols) in BLOCKS.items():
        A = J_analytic[:, rows, cols]
        if A.shape[2] == 0:
            continue
        N = J_numeric[:, rows, cols]
        err = np.linalg.norm((A - N).reshape(len(A), -1), axis=1)
        scale = np.maximum(np.linalg.norm(N.reshape(len(N), -1), axis=1), CHECK_SCALE_FLOOR)
        out[name] = float(np.max(err / scale)) if len(A) else 0.0
    return out


def check_jacobians(seed: int, trials: int, pixels_per_trial: int = 32) -> dict[str, float]:
    """Compare analytic and central-difference Jacobians on random configurations.

    Cameras and gravity follow :func:`persfit.synth.sample_geometry`, cycling
    through the camera models; pixels are drawn uniformly in the frame and
    those beyond the lens fold or at the gravity vanishing point are skipped.
    Returns the worst relative error per block.
    """
    rng = np.random.default_rng(seed)
    models = list(CameraModel)
    worst: dict[str, float] = {}
    for t in range(trials):
        width, height = (int(v) for v in rng.integers(32, 641, size=2))
        cam, g = sample_geometry(rng, width, height, models[t % len(models)])
        if cam.model is CameraModel.RADIAL2:
            cam = cam.with_k(cam.k1, float(rng.uniform(-0.05, 0.05)))
        pixels = rng.uniform((0.0, 0.0), (width, height), size=(pixels_per_trial, 2))
        geo = pixel_geometry(cam, g, pixels)
        keep = geo.valid & (geo.up_norm > 1e-6)
        if not keep.any():
            continue
        obs = Observations(pixels[keep], np.zeros((keep.sum(), 2)), np.zeros(keep.sum()), np.ones(keep.sum()), np.ones(keep.sum()))
        geo = pixel_geometry(cam, g, obs.pixels)
        errs = block_errors(analytic_jacobian(cam, g, geo), numeric_jacobian(cam, g, obs))
        for name, e in errs.items():
            worst[name] = max(worst.get(name, 0.0), e)
    return worst
