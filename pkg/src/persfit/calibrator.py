"""Camera calibration from Perspective Fields.

Assembles the weighted least-squares problem over one or several fields,
initializes it, runs :func:`persfit.lm.optimize` and maps the covariance to
per-parameter uncertainties.

Parameter layout (columns of the stacked Jacobian)::

    [g_0 (2), g_1 (2), ..., log_f, k1, k2]            shared intrinsics
    [g_0 (2), ..., log_f_0, k1_0, ..., log_f_1, ...]   independent images

Fixed parameters have no columns. Priors add whitened rows
``(theta - theta_prior) / std`` with unit weight after the data rows.
"""

from __future__ import annotations

import dataclasses
import enum
import logging
import math
from dataclasses import dataclass, field
from typing import Any, Sequence

import numpy as np
import scipy.optimize

from . import jacobians as jac
from .camera import CameraModel, CameraParams, focal_from_vfov
from .errors import (
    DegenerateHeuristic,
    DomainError,
    EmptyProblem,
    InsufficientSamples,
    NoHypothesis,
)
from .field import PerspectiveField, pixel_geometry
from .gravity import GravityDir, retract, roll_pitch_jacobian, tangent_basis
from .lm import LMConfig, LMResult, LMTrace, Status, covariance, optimize, unobservable

logger = logging.getLogger(__name__)

TRIVIAL_FOCAL_RATIO = 0.7
# LM iterations spent on gravity and focal length before distortion is freed
WARM_START_ITERS = 8


class InitStrategy(str, enum.Enum):
    TRIVIAL = "trivial"
    HEURISTIC = "heuristic"
    SOLVER = "solver"


class Sharing(str, enum.Enum):
    INDEPENDENT = "independent"
    SHARED_INTRINSICS = "intrinsics"
    # multi-camera rig with one gravity; accepted but not implemented
    SHARED_GRAVITY = "gravity"


@dataclass(frozen=True)
class Prior:
    """Gaussian prior; ``value`` is a :class:`GravityDir` (std in radians),
    a focal length in pixels, or a distortion coefficient."""

    value: Any
    std: float

    def __post_init__(self):
        if not self.std > 0:
            raise ValueError(f"prior std must be positive, got {self.std}")


@dataclass(frozen=True)
class RansacConfig:
    iterations: int = 100
    up_threshold_deg: float = 2.0
    lat_threshold_deg: float = 2.0
    seed: int = 0
    max_points: int = 4096
    focal_grid: int = 64


@dataclass
class CalibrationProblem:
    fields: Sequence[PerspectiveField]
    model: CameraModel = CameraModel.PINHOLE
    sharing: Sharing = Sharing.INDEPENDENT
    fixed: dict[str, Any] = field(default_factory=dict)
    priors: dict[str, Prior] = field(default_factory=dict)
    init: InitStrategy = InitStrategy.TRIVIAL
    stride: int = 1
    principal_point: tuple[float, float] | None = None
    masks: Sequence[np.ndarray] | None = None
    initial: dict[str, Any] = field(default_factory=dict)
    warm_start: bool = True
    lm: LMConfig = field(default_factory=LMConfig)
    ransac: RansacConfig = field(default_factory=RansacConfig)
    jacobian_method: str = "analytic"

    def __post_init__(self):
        if isinstance(self.fields, PerspectiveField):
            self.fields = [self.fields]
        self.fields = list(self.fields)
        self.model = CameraModel(self.model)
        self.sharing = Sharing(self.sharing)
        self.init = InitStrategy(self.init)
        allowed = {n for n in jac.PARAM_NAMES if n in ("gravity", "focal") or int(n[1]) <= self.model.num_k}
        for name in list(self.fixed) + list(self.priors) + list(self.initial):
            if name not in allowed:
                raise ValueError(f"unknown parameter {name!r} for model {self.model.value}")
        both = set(self.fixed) & set(self.priors)
        if both:
            raise ValueError(f"parameters both fixed and prior-regularized: {sorted(both)}")
        if self.stride < 1:
            raise ValueError("stride must be >= 1")
        if self.sharing is Sharing.SHARED_INTRINSICS and self.fields:
            sizes = {f.size for f in self.fields}
            if len(sizes) > 1:
                raise ValueError(f"shared intrinsics need equal image sizes, got {sorted(sizes)}")
        if self.masks is not None and len(self.masks) != len(self.fields):
            raise ValueError("one mask per field is required")

    @property
    def num_images(self) -> int:
        return len(self.fields)

    @property
    def num_blocks(self) -> int:
        return 1 if self.sharing is Sharing.SHARED_INTRINSICS else self.num_images

    def block_of(self, image: int) -> int:
        return 0 if self.sharing is Sharing.SHARED_INTRINSICS else image

    def free_names(self) -> list[str]:
        return [n for n in jac.free_columns(self.model) if n not in self.fixed]

    def per_image(self, value, name: str) -> list:
        if isinstance(value, (list, tuple)) and not isinstance(value, GravityDir):
            if len(value) != self.num_images:
                raise ValueError(f"{name} needs one value per image")
            return list(value)
        return [value] * self.num_images


class Covariance:
    """Covariance over the free-parameter layout with named access."""

    def __init__(self, matrix: np.ndarray, names: list[str], unobservable: np.ndarray | None = None):
        self.matrix = matrix
        self.names = names
        self.unobservable = np.zeros(len(names), dtype=bool) if unobservable is None else unobservable
        self._index = {n: i for i, n in enumerate(names)}

    def __contains__(self, name):
        return name in self._index

    def block(self, names: Sequence[str]) -> np.ndarray:
        idx = [self._index[n] for n in names]
        return self.matrix[np.ix_(idx, idx)]

    def std(self, name: str) -> float:
        """Marginal std; 0 for parameters without a column, inf if unconstrained."""
        if name not in self._index:
            return 0.0
        i = self._index[name]
        if self.unobservable[i]:
            return math.inf
        return math.sqrt(max(self.matrix[i, i], 0.0))

    def stds(self) -> dict[str, float]:
        return {n: self.std(n) for n in self.names}


@dataclass
class CalibrationResult:
    gravities: list[GravityDir]
    cameras: list[CameraParams]
    gravity_std: np.ndarray
    roll_std: np.ndarray
    pitch_std: np.ndarray
    focal_std: np.ndarray
    vfov_std: np.ndarray
    k_std: np.ndarray
    covariance: Covariance
    trace: LMTrace

    @property
    def status(self) -> Status:
        return self.trace.status

    @property
    def iterations(self) -> int:
        return self.trace.iterations

    @property
    def gravity(self) -> GravityDir:
        return self.gravities[0]

    @property
    def camera(self) -> CameraParams:
        return self.cameras[0]

    @property
    def vfov(self) -> float:
        return self.cameras[0].vfov


# ---------------------------------------------------------------------------
# Initialization
# ---------------------------------------------------------------------------


def init_trivial(width: int, height: int) -> tuple[GravityDir, float]:
    """Upright gravity and ``f = 0.7 max(W, H)``."""
    if width < 1 or height < 1:
        raise ValueError(f"invalid image size {width}x{height}")
    return GravityDir.upright(), TRIVIAL_FOCAL_RATIO * max(width, height)


def _bilinear(grid: np.ndarray, x: float, y: float):
    """Sample a ``(H, W, ...)`` grid at pixel coordinates (centers at +0.5)."""
    h, w = grid.shape[:2]
    fx = min(max(x - 0.5, 0.0), w - 1.0)
    fy = min(max(y - 0.5, 0.0), h - 1.0)
    x0, y0 = int(math.floor(fx)), int(math.floor(fy))
    x1, y1 = min(x0 + 1, w - 1), min(y0 + 1, h - 1)
    tx, ty = fx - x0, fy - y0
    top = (1 - tx) * grid[y0, x0] + tx * grid[y0, x1]
    bottom = (1 - tx) * grid[y1, x0] + tx * grid[y1, x1]
    return (1 - ty) * top + ty * bottom


def init_heuristic(
    field: PerspectiveField, principal_point: tuple[float, float] | None = None
) -> tuple[GravityDir, float]:
    """Gravity from the field at the principal point, focal from the latitude span.

    At the principal point the up-vector is ``-(gx, gy)`` up to scale and
    the latitude is ``asin(gz)``. The latitude difference between the bottom
    and top pixel rows of the principal column is the angle they subtend,
    which gives the focal length (exact for zero roll).
    """
    width, height = field.size
    cx, cy = principal_point if principal_point is not None else (width / 2.0, height / 2.0)
    up_c = np.asarray(_bilinear(field.up, cx, cy), dtype=float)
    up_norm = np.linalg.norm(up_c)
    if not up_norm > 0:
        raise DegenerateHeuristic("zero up-vector at the principal point")
    sin_c = math.sin(float(_bilinear(field.latitude, cx, cy)))
    if abs(sin_c) >= 1.0:
        raise DegenerateHeuristic("latitude at the principal point is a pole")
    alpha = math.sqrt(1.0 - sin_c * sin_c)
    g = GravityDir(np.concatenate([-alpha * up_c / up_norm, [sin_c]]))

    top = float(_bilinear(field.latitude, cx, 0.5))
    bottom = float(_bilinear(field.latitude, cx, height - 0.5))
    span = bottom - top
    if not (0.0 < span < math.pi):
        raise DegenerateHeuristic(f"latitude span {math.degrees(span):.3f} deg is not a valid FoV")
    # the sampled rows are pixel centers, (height - 1) pixels apart
    extent = max(height - 1, 1)
    return g, focal_from_vfov(span, extent)


@dataclass
class RansacResult:
    gravity: GravityDir
    focal: float
    score: float
    inliers_up: np.ndarray
    inliers_lat: np.ndarray


def _pinhole_predictions(g: np.ndarray, f: float, c: np.ndarray, pixels: np.ndarray):
    q = (pixels - c) / f
    ubar = g[2] * q - g[:2]
    sin_lat = (q[:, 0] * g[0] + q[:, 1] * g[1] + g[2]) / np.sqrt(1.0 + np.sum(q * q, axis=1))
    return ubar, np.arcsin(np.clip(sin_lat, -1.0, 1.0))


def _inliers(g, f, c, pixels, up_obs, lat_obs, up_thr, lat_thr):
    ubar, lat = _pinhole_predictions(g, f, c, pixels)
    cross = ubar[:, 0] * up_obs[:, 1] - ubar[:, 1] * up_obs[:, 0]
    dot = np.sum(ubar * up_obs, axis=1)
    up_err = np.abs(np.arctan2(cross, dot))
    return up_err < up_thr, np.abs(lat - lat_obs) < lat_thr


def _gravity_from_ups(f, c, p1, u1, p2, u2):
    """Gravity (vectorized over focal candidates) satisfying two up-vectors."""
    f = np.atleast_1d(f)[:, None]
    q1 = (p1 - c) / f
    q2 = (p2 - c) / f
    # u x (u_n gz - gx, v_n gz - gy) = 0 is linear in g
    a1 = np.stack([np.full(len(f), u1[1]), np.full(len(f), -u1[0]), u1[0] * q1[:, 1] - u1[1] * q1[:, 0]], axis=1)
    a2 = np.stack([np.full(len(f), u2[1]), np.full(len(f), -u2[0]), u2[0] * q2[:, 1] - u2[1] * q2[:, 0]], axis=1)
    g = np.cross(a1, a2)
    norm = np.linalg.norm(g, axis=1)
    with np.errstate(invalid="ignore", divide="ignore"):
        g = g / norm[:, None]
    g[norm < 1e-12] = np.nan
    # orient so the predicted up-vectors point along the observed ones
    s1 = np.sum((g[:, 2:3] * q1 - g[:, :2]) * u1, axis=1)
    s2 = np.sum((g[:, 2:3] * q2 - g[:, :2]) * u2, axis=1)
    g = np.where((s1 < 0)[:, None], -g, g)
    consistent = np.sign(s1) == np.sign(s2)
    g[~consistent] = np.nan
    return g


def solve_minimal(
    p1, u1, p2, u2, p3, lat3: float, c, height: int, grid: int = 64
) -> list[tuple[np.ndarray, float]]:
    """Gravity and focal hypotheses from two up-vectors and one latitude.

    For each focal length the two up-vectors fix the gravity; the focal is
    then found by a 1-D root search (log-spaced scan plus Brent refinement)
    on the latitude constraint ``sin(lat3) = n3 . g / |n3|``.
    """
    p1, u1, p2, u2, p3 = (np.asarray(v, dtype=float) for v in (p1, u1, p2, u2, p3))
    c = np.asarray(c, dtype=float)
    target = math.sin(lat3)
    f_lo = height / 2.0 / math.tan(math.radians(175.0) / 2)
    f_hi = height / 2.0 / math.tan(math.radians(5.0) / 2)

    def residual(f):
        g = _gravity_from_ups(f, c, p1, u1, p2, u2)
        q3 = (p3 - c) / np.atleast_1d(f)[:, None]
        return (q3[:, 0] * g[:, 0] + q3[:, 1] * g[:, 1] + g[:, 2]) / np.sqrt(1.0 + np.sum(q3 * q3, axis=1)) - target

    fs = np.geomspace(f_lo, f_hi, grid)
    hs = residual(fs)
    out = []
    for i in range(grid - 1):
        h0, h1 = hs[i], hs[i + 1]
        if not (np.isfinite(h0) and np.isfinite(h1)) or h0 * h1 > 0:
            continue
        try:
            root = scipy.optimize.brentq(lambda f: float(residual(f)[0]), fs[i], fs[i + 1], xtol=1e-10)
        except ValueError:
            continue
        if abs(float(residual(root)[0])) > 1e-8:
            continue  # sign change across an orientation flip, not a root
        g = _gravity_from_ups(root, c, p1, u1, p2, u2)[0]
        if np.all(np.isfinite(g)):
            out.append((g, float(root)))
    return out


def ransac_gravity_focal(
    field: PerspectiveField,
    config: RansacConfig | None = None,
    principal_point: tuple[float, float] | None = None,
) -> RansacResult:
    """RANSAC over minimal samples scored by confidence-weighted inlier count."""
    cfg = config or RansacConfig()
    width, height = field.size
    c = np.array(principal_point if principal_point is not None else (width / 2.0, height / 2.0))
    up_ok = np.argwhere(field.conf_up > 0)[:, ::-1]
    lat_ok = np.argwhere(field.conf_lat > 0)[:, ::-1]
    if len(up_ok) < 2 or len(lat_ok) < 1:
        raise InsufficientSamples(
            f"need >= 2 up-vectors and >= 1 latitude with positive confidence, "
            f"got {len(up_ok)} and {len(lat_ok)}"
        )
    rng = np.random.default_rng(cfg.seed)
    up_thr = math.radians(cfg.up_threshold_deg)
    lat_thr = math.radians(cfg.lat_threshold_deg)

    step = max(1, int(math.ceil(math.sqrt(width * height / cfg.max_points))))
    iy, ix = np.mgrid[0:height:step, 0:width:step]
    ix, iy = ix.ravel(), iy.ravel()
    pix = np.stack([ix + 0.5, iy + 0.5], axis=1)
    up_obs, lat_obs = field.up[iy, ix], field.latitude[iy, ix]
    cu, cl = field.conf_up[iy, ix], field.conf_lat[iy, ix]

    best = None
    for _ in range(cfg.iterations):
        i1, i2 = rng.choice(len(up_ok), size=2, replace=False)
        j = rng.integers(len(lat_ok))
        (x1, y1), (x2, y2), (x3, y3) = up_ok[i1], up_ok[i2], lat_ok[j]
        hyps = solve_minimal(
            (x1 + 0.5, y1 + 0.5),
            field.up[y1, x1],
            (x2 + 0.5, y2 + 0.5),
            field.up[y2, x2],
            (x3 + 0.5, y3 + 0.5),
            float(field.latitude[y3, x3]),
            c,
            height,
            grid=cfg.focal_grid,
        )
        for g, f in hyps:
            inl_up, inl_lat = _inliers(g, f, c, pix, up_obs, lat_obs, up_thr, lat_thr)
            score = float(np.sum(cu * inl_up) + np.sum(cl * inl_lat))
            if best is None or score > best[0]:
                best = (score, g, f)
    if best is None:
        raise NoHypothesis("no minimal sample produced a valid hypothesis")
    score, g, f = best
    iy, ix = np.mgrid[0:height, 0:width]
    full = np.stack([ix.ravel() + 0.5, iy.ravel() + 0.5], axis=1)
    inl_up, inl_lat = _inliers(
        g, f, c, full, field.up.reshape(-1, 2), field.latitude.ravel(), up_thr, lat_thr
    )
    return RansacResult(
        GravityDir(g),
        f,
        score,
        inl_up.reshape(height, width) & (field.conf_up > 0),
        inl_lat.reshape(height, width) & (field.conf_lat > 0),
    )


def init_solver(
    field: PerspectiveField,
    config: RansacConfig | None = None,
    principal_point: tuple[float, float] | None = None,
) -> tuple[GravityDir, float]:
    res = ransac_gravity_focal(field, config, principal_point)
    return res.gravity, res.focal


# ---------------------------------------------------------------------------
# Least-squares problem
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class _State:
    gravities: tuple[GravityDir, ...]
    log_f: np.ndarray
    k: np.ndarray


class _Layout:
    """Column bookkeeping for the stacked parameter vector."""

    def __init__(self, problem: CalibrationProblem):
        free = problem.free_names()
        self.gravity = []
        col = 0
        names = []
        for i in range(problem.num_images):
            if "gravity" in free:
                self.gravity.append(slice(col, col + 2))
                names += [f"g{i}_a", f"g{i}_b"]
                col += 2
            else:
                self.gravity.append(None)
        self.intrinsics = []
        for b in range(problem.num_blocks):
            cols = {}
            suffix = "" if problem.num_blocks == 1 else f"_{b}"
            for name in ("focal", "k1", "k2"):
                if name in free:
                    cols[name] = col
                    names.append(("log_f" if name == "focal" else name) + suffix)
                    col += 1
            self.intrinsics.append(cols)
        self.size = col
        self.names = names
        self.free = free


class _AlignmentProblem:
    def __init__(self, problem: CalibrationProblem, observations: list[jac.Observations], base: list[CameraParams]):
        self.problem = problem
        self.obs = observations
        self.base = base
        self.layout = _Layout(problem)
        self.n_data = 3 * sum(len(o) for o in observations)
        self.gravity_prior = None
        if "gravity" in problem.priors:
            prior = problem.priors["gravity"]
            self.gravity_prior = (problem.per_image(prior.value, "gravity prior"), prior.std)
        self.n_prior = self._count_prior_rows()

    def _count_prior_rows(self) -> int:
        n = 0
        for name in self.problem.priors:
            n += 3 * self.problem.num_images if name == "gravity" else self.problem.num_blocks
        return n

    def camera(self, x: _State, image: int) -> CameraParams:
        return _camera(self.problem, self.base, x, image)

    def _prior_rows(self, x: _State, with_jac: bool):
        priors = self.problem.priors
        rows, jrows = [], []
        lay = self.layout
        for name in ("gravity", "focal", "k1", "k2"):
            if name not in priors:
                continue
            prior = priors[name]
            if name == "gravity":
                values, std = self.gravity_prior
                for i, g in enumerate(x.gravities):
                    rows.append((g.vec - values[i].vec) / std)
                    if with_jac:
                        Jp = np.zeros((3, lay.size))
                        Jp[:, lay.gravity[i]] = tangent_basis(g) / std
                        jrows.append(Jp)
                continue
            for b in range(self.problem.num_blocks):
                Jp = np.zeros((1, lay.size))
                if name == "focal":
                    f = math.exp(x.log_f[b])
                    rows.append(np.array([(f - prior.value) / prior.std]))
                    Jp[0, lay.intrinsics[b]["focal"]] = f / prior.std
                else:
                    j = int(name[1]) - 1
                    rows.append(np.array([(x.k[b, j] - prior.value) / prior.std]))
                    Jp[0, lay.intrinsics[b][name]] = 1.0 / prior.std
                jrows.append(Jp)
        if not rows:
            return np.zeros(0), np.zeros((0, lay.size))
        return np.concatenate(rows), (np.concatenate(jrows) if with_jac else None)

    def evaluate(self, x: _State):
        rs, ws = [], []
        for i, obs in enumerate(self.obs):
            blk = jac.evaluate(self.camera(x, i), x.gravities[i], obs, extend=True)
            rs.append(blk.r)
            ws.append(blk.w)
        rp, _ = self._prior_rows(x, with_jac=False)
        return np.concatenate(rs + [rp]), np.concatenate(ws + [np.ones(len(rp))])

    def linearize(self, x: _State):
        lay = self.layout
        J = np.zeros((self.n_data, lay.size))
        rs, ws = [], []
        row = 0
        for i, obs in enumerate(self.obs):
            blk = jac.linearize(
                self.camera(x, i), x.gravities[i], obs, free=None, method=self.problem.jacobian_method, extend=True
            )
            n = len(blk.r)
            rows = slice(row, row + n)
            if lay.gravity[i] is not None:
                J[rows, lay.gravity[i]] = blk.J[:, 0:2]
            for name, col in lay.intrinsics[self.problem.block_of(i)].items():
                src = 2 if name == "focal" else 2 + int(name[1])
                J[rows, col] = blk.J[:, src]
            rs.append(blk.r)
            ws.append(blk.w)
            row += n
        rp, Jp = self._prior_rows(x, with_jac=True)
        r = np.concatenate(rs + [rp])
        w = np.concatenate(ws + [np.ones(len(rp))])
        return r, w, np.vstack([J, Jp])

    def retract(self, x: _State, delta: np.ndarray) -> _State:
        lay = self.layout
        gravities = tuple(
            g if sl is None else retract(g, delta[sl]) for g, sl in zip(x.gravities, lay.gravity)
        )
        log_f = x.log_f.copy()
        k = x.k.copy()
        for b, cols in enumerate(lay.intrinsics):
            for name, col in cols.items():
                if name == "focal":
                    log_f[b] += delta[col]
                else:
                    k[b, int(name[1]) - 1] += delta[col]
        return _State(gravities, log_f, k)

    def dof(self, w: np.ndarray) -> int:
        # a unit-vector residual carries one degree of freedom per pixel
        wd = w[: self.n_data].reshape(-1, 3)
        return int(np.count_nonzero(wd[:, 0] > 0) + np.count_nonzero(wd[:, 2] > 0)) - self.layout.size


def _active_mask(problem: CalibrationProblem, i: int) -> np.ndarray:
    fld = problem.fields[i]
    mask = np.zeros((fld.height, fld.width), dtype=bool)
    mask[:: problem.stride, :: problem.stride] = True
    mask &= (fld.conf_up > 0) | (fld.conf_lat > 0)
    if problem.masks is not None:
        mask &= np.asarray(problem.masks[i], dtype=bool)
    return mask


def _initial_state(problem: CalibrationProblem) -> tuple[_State, list[CameraParams]]:
    fixed, priors = problem.fixed, problem.priors
    gravities, focals = [], []
    for i, fld in enumerate(problem.fields):
        width, height = fld.size
        if problem.init is InitStrategy.TRIVIAL:
            g, f = init_trivial(width, height)
        elif problem.init is InitStrategy.HEURISTIC:
            try:
                g, f = init_heuristic(fld, problem.principal_point)
            except (DegenerateHeuristic, DomainError) as exc:
                logger.warning("heuristic init failed on image %d (%s); using trivial init", i, exc)
                g, f = init_trivial(width, height)
        else:
            g, f = init_solver(fld, problem.ransac, problem.principal_point)
        gravities.append(g)
        focals.append(f)

    if "gravity" in problem.initial:
        gravities = problem.per_image(problem.initial["gravity"], "initial gravity")
    if "gravity" in fixed:
        gravities = problem.per_image(fixed["gravity"], "fixed gravity")
    elif "gravity" in priors:
        gravities = problem.per_image(priors["gravity"].value, "gravity prior")
    gravities = [g if isinstance(g, GravityDir) else GravityDir(g) for g in gravities]

    n_blocks = problem.num_blocks
    if problem.sharing is Sharing.SHARED_INTRINSICS:
        block_f = [float(np.median(focals))]
    else:
        block_f = list(focals)
    for name, source in (("focal", problem.initial), ("focal", fixed), ("focal", priors)):
        if name in source:
            v = source[name]
            block_f = [float(v.value if isinstance(v, Prior) else v)] * n_blocks
    k = np.zeros((n_blocks, 2))
    for j, name in enumerate(("k1", "k2")):
        for source in (problem.initial, fixed, priors):
            if name in source:
                v = source[name]
                k[:, j] = float(v.value if isinstance(v, Prior) else v)

    base = []
    for fld in problem.fields:
        width, height = fld.size
        cx, cy = problem.principal_point if problem.principal_point is not None else (width / 2.0, height / 2.0)
        base.append(CameraParams(width, height, 1.0, cx, cy))
    return _State(tuple(gravities), np.log(np.asarray(block_f, dtype=float)), k), base


def calibrate(problem: CalibrationProblem) -> CalibrationResult:
    """Fit gravity, focal length and distortion to the problem's fields."""
    if problem.num_images == 0:
        raise EmptyProblem("no fields to calibrate")
    if problem.sharing is Sharing.SHARED_GRAVITY:
        raise NotImplementedError("shared-gravity (camera rig) coupling is not implemented")
    x0, base = _initial_state(problem)

    observations = []
    for i, fld in enumerate(problem.fields):
        obs = jac.gather(fld, _active_mask(problem, i))
        geo = pixel_geometry(_camera(problem, base, x0, i), x0.gravities[i], obs.pixels)
        if not geo.valid.all():
            logger.warning(
                "image %d: dropping %d pixel(s) outside the invertible radius at initialization",
                i,
                int((~geo.valid).sum()),
            )
            obs = obs.subset(geo.valid)
        observations.append(obs)
    if sum(len(o) for o in observations) == 0 and not problem.priors:
        raise EmptyProblem("no pixel has a positive confidence")

    ls = _AlignmentProblem(problem, observations, base)
    result = _solve(problem, ls, observations, base, x0)
    x = result.x
    names = ls.layout.names
    cov = Covariance(
        covariance(result.J, result.w, result.r, n_prior=ls.n_prior, dof=ls.dof(result.w)),
        names,
        unobservable(result.J, result.w),
    )
    return _build_result(problem, ls, x, cov, result.trace)


def _solve(problem, ls, observations, base, x0: _State) -> LMResult:
    """Run LM, optionally preceded by short stages with distortion held fixed.

    Starting far from a wide-angle solution, the joint problem tends to trade
    focal length against strong barrel distortion and then crawl along the
    lens-fold boundary. Settling gravity and focal length first, then
    releasing the distortion coefficients one at a time, avoids that valley.
    All stages share the iteration budget of ``problem.lm``.
    """
    cfg = problem.lm
    k_names = [n for n in problem.free_names() if n in ("k1", "k2")]
    if not problem.warm_start or any(n in problem.priors for n in k_names):
        k_names = []
    x, records, initial_cost = x0, [], None
    for n_free in range(len(k_names)):
        budget = min(WARM_START_ITERS, cfg.max_iters - len(records) - 1)
        if budget < 1:
            break
        held = {n: float(x.k[0, int(n[1]) - 1]) for n in k_names[n_free:]}
        stage = dataclasses.replace(problem, fixed={**problem.fixed, **held}, warm_start=False)
        warm = optimize(
            _AlignmentProblem(stage, observations, base), x, dataclasses.replace(cfg, max_iters=budget)
        )
        x = warm.x
        records += warm.trace.records
        if initial_cost is None:
            initial_cost = warm.trace.initial_cost
    result = optimize(ls, x, dataclasses.replace(cfg, max_iters=cfg.max_iters - len(records)))
    if records:
        result.trace = LMTrace(initial_cost, records + result.trace.records, result.trace.status)
    return result


def _camera(problem: CalibrationProblem, base: list[CameraParams], x: _State, image: int) -> CameraParams:
    b = problem.block_of(image)
    k = x.k[b]
    num_k = problem.model.num_k
    # a fixed focal length is reported exactly, not through exp(log(f))
    f = float(problem.fixed["focal"]) if "focal" in problem.fixed else float(np.exp(x.log_f[b]))
    return CameraParams(
        base[image].width,
        base[image].height,
        f,
        base[image].cx,
        base[image].cy,
        float(k[0]) if num_k >= 1 else 0.0,
        float(k[1]) if num_k >= 2 else 0.0,
        problem.model,
    )


def _build_result(problem, ls: _AlignmentProblem, x: _State, cov: Covariance, trace: LMTrace) -> CalibrationResult:
    lay = ls.layout
    n = problem.num_images
    cameras = [ls.camera(x, i) for i in range(n)]
    g_std, roll_std, pitch_std = np.zeros(n), np.zeros(n), np.zeros(n)
    f_std, v_std, k_std = np.zeros(n), np.zeros(n), np.zeros((n, 2))
    for i in range(n):
        g = x.gravities[i]
        if lay.gravity[i] is not None:
            S = cov.block([f"g{i}_a", f"g{i}_b"])
            g_std[i] = math.sqrt(max(np.trace(S), 0.0))
            if math.isinf(cov.std(f"g{i}_a")) or math.isinf(cov.std(f"g{i}_b")):
                g_std[i] = roll_std[i] = pitch_std[i] = math.inf
            elif math.hypot(g.x, g.y) > 1e-12:
                Jrp = roll_pitch_jacobian(g) @ tangent_basis(g)
                Srp = Jrp @ S @ Jrp.T
                roll_std[i] = math.sqrt(max(Srp[0, 0], 0.0))
                pitch_std[i] = math.sqrt(max(Srp[1, 1], 0.0))
        b = problem.block_of(i)
        suffix = "" if problem.num_blocks == 1 else f"_{b}"
        s_logf = cov.std("log_f" + suffix)
        f = cameras[i].f
        height = cameras[i].height
        f_std[i] = f * s_logf
        v_std[i] = math.inf if math.isinf(s_logf) else abs(height * f / (f * f + height * height / 4.0)) * s_logf
        k_std[i] = (cov.std("k1" + suffix), cov.std("k2" + suffix))
    return CalibrationResult(
        gravities=list(x.gravities),
        cameras=cameras,
        gravity_std=g_std,
        roll_std=roll_std,
        pitch_std=pitch_std,
        focal_std=f_std,
        vfov_std=v_std,
        k_std=k_std,
        covariance=cov,
        trace=trace,
    )


def calibrate_field(field: PerspectiveField, **kwargs) -> CalibrationResult:
    """Single-image convenience wrapper around :func:`calibrate`."""
    return calibrate(CalibrationProblem([field], **kwargs))
