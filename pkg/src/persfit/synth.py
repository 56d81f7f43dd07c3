"""Synthetic calibration scenarios.

Camera parameters follow the training distribution of learned field
predictors: roll and pitch uniform in [-45, 45] degrees, vertical FoV
uniform in [20, 105] degrees, and a normalized distortion
``k_hat = k1 / vfov`` (vfov in radians) from a normal distribution with
std 0.07, truncated to [-0.3, 0.3] by rejection. ``radial2`` scenarios use
``k2 = 0``.

Every scenario owns a :class:`numpy.random.SeedSequence` built from its
seed, spawned into two independent PCG64 streams: one for the camera and
gravity, one for the field noise. Changing the noise therefore never changes
the sampled geometry.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .camera import CameraModel, CameraParams, focal_from_vfov
from .fieldio import write_camera, write_field, write_gravity
from .field import PerspectiveField, render_field
from .gravity import GravityDir, from_roll_pitch

ROLL_RANGE_DEG = (-45.0, 45.0)
PITCH_RANGE_DEG = (-45.0, 45.0)
VFOV_RANGE_DEG = (20.0, 105.0)
K_HAT_STD = 0.07
K_HAT_BOUND = 0.3
OUTLIER_CONFIDENCE = 0.05
MIN_SIZE = 32


class ConfMode(str, enum.Enum):
    UNIT = "unit"
    ORACLE_INLIER = "oracle"


@dataclass(frozen=True)
class NoiseSpec:
    """Field corruption: angular noise (degrees), outlier fraction, confidences."""

    sigma_up_deg: float = 0.0
    sigma_lat_deg: float = 0.0
    outlier_frac: float = 0.0
    conf_mode: ConfMode = ConfMode.UNIT

    def __post_init__(self):
        object.__setattr__(self, "conf_mode", ConfMode(self.conf_mode))
        if self.sigma_up_deg < 0 or self.sigma_lat_deg < 0:
            raise ValueError("noise std must be non-negative")
        if not 0.0 <= self.outlier_frac <= 1.0:
            raise ValueError("outlier fraction must lie in [0, 1]")

    @property
    def is_zero(self) -> bool:
        return self.sigma_up_deg == 0 and self.sigma_lat_deg == 0 and self.outlier_frac == 0


@dataclass
class Scenario:
    camera: CameraParams
    gravity: GravityDir
    field: PerspectiveField
    noise: NoiseSpec
    seed: int
    outliers: np.ndarray = field(repr=False, default=None)

    @property
    def gt(self) -> tuple[CameraParams, GravityDir]:
        return self.camera, self.gravity


def _streams(seed: int) -> tuple[np.random.Generator, np.random.Generator]:
    geometry, noise = np.random.SeedSequence(seed).spawn(2)
    return np.random.Generator(np.random.PCG64(geometry)), np.random.Generator(np.random.PCG64(noise))


def sample_k_hat(rng: np.random.Generator) -> float:
    while True:
        k = rng.normal(0.0, K_HAT_STD)
        if abs(k) <= K_HAT_BOUND:
            return float(k)


def sample_geometry(rng: np.random.Generator, width: int, height: int, model) -> tuple[CameraParams, GravityDir]:
    model = CameraModel(model)
    roll = math.radians(rng.uniform(*ROLL_RANGE_DEG))
    pitch = math.radians(rng.uniform(*PITCH_RANGE_DEG))
    vfov = math.radians(rng.uniform(*VFOV_RANGE_DEG))
    k_hat = sample_k_hat(rng)
    k1 = k_hat * vfov if model is not CameraModel.PINHOLE else 0.0
    cam = CameraParams(width, height, focal_from_vfov(vfov, height), k1=k1, model=model)
    return cam, from_roll_pitch(roll, pitch)


def rotate(up: np.ndarray, angles: np.ndarray) -> np.ndarray:
    """Rotate 2-vectors ``(..., 2)`` by ``angles`` radians."""
    c, s = np.cos(angles), np.sin(angles)
    return np.stack([c * up[..., 0] - s * up[..., 1], s * up[..., 0] + c * up[..., 1]], axis=-1)


def perturb(field: PerspectiveField, noise: NoiseSpec, rng: np.random.Generator) -> tuple[PerspectiveField, np.ndarray]:
    """Apply ``noise`` to a clean field; returns the noisy field and the outlier mask.

    Pixels that carry no information (zero confidence) are left untouched.
    """
    h, w = field.height, field.width
    out = field.copy()
    outliers = np.zeros((h, w), dtype=bool)
    if noise.is_zero:
        return out, outliers
    up_noise = rng.normal(0.0, math.radians(noise.sigma_up_deg), size=(h, w))
    lat_noise = rng.normal(0.0, math.radians(noise.sigma_lat_deg), size=(h, w))
    outliers = rng.random((h, w)) < noise.outlier_frac
    random_dir = rng.uniform(-math.pi, math.pi, size=(h, w))
    random_lat = rng.uniform(-math.pi / 2, math.pi / 2, size=(h, w))

    has_up = field.conf_up > 0
    has_lat = field.conf_lat > 0
    up = rotate(field.up, up_noise)
    up[outliers] = np.stack([np.cos(random_dir), np.sin(random_dir)], axis=-1)[outliers]
    out.up = np.where(has_up[..., None], up, field.up)
    lat = np.clip(field.latitude + lat_noise, -math.pi / 2, math.pi / 2)
    lat[outliers] = random_lat[outliers]
    out.latitude = np.where(has_lat, lat, field.latitude)
    if noise.conf_mode is ConfMode.ORACLE_INLIER:
        weight = np.where(outliers, OUTLIER_CONFIDENCE, 1.0)
        out.conf_up = field.conf_up * weight
        out.conf_lat = field.conf_lat * weight
    return out, outliers


def sample_scenario(seed: int, width: int, height: int, model="pinhole", noise: NoiseSpec | None = None) -> Scenario:
    """Draw a camera and gravity from ``seed`` and render a (noisy) field."""
    if width < MIN_SIZE or height < MIN_SIZE:
        raise ValueError(f"scenario images must be at least {MIN_SIZE}x{MIN_SIZE}, got {width}x{height}")
    noise = noise or NoiseSpec()
    geo_rng, noise_rng = _streams(seed)
    cam, g = sample_geometry(geo_rng, width, height, model)
    clean = render_field(cam, g)
    noisy, outliers = perturb(clean, noise, noise_rng)
    return Scenario(cam, g, noisy, noise, seed, outliers)


def scenario_stem(index: int) -> str:
    return f"{index:04d}"


def write_scenario(scenario: Scenario, directory, index: int) -> Path:
    """Write ``NNNN.pfld``, ``NNNN.cam`` and ``NNNN.grav`` into ``directory``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    stem = directory / scenario_stem(index)
    write_field(scenario.field, stem.with_suffix(".pfld"))
    write_camera(scenario.camera, stem.with_suffix(".cam"))
    write_gravity(scenario.gravity, stem.with_suffix(".grav"))
    return stem
