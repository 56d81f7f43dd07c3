"""Single-image camera calibration from Perspective Fields.

A Perspective Field assigns every pixel an up-vector (the image direction of
gravity) and a latitude (the angle between the pixel's ray and the horizon).
Given such a field, :func:`calibrate` recovers gravity, focal length and
radial distortion with Levenberg-Marquardt and reports their uncertainties.
"""

from .calibrator import (
    CalibrationProblem,
    CalibrationResult,
    InitStrategy,
    Prior,
    RansacConfig,
    Sharing,
    calibrate,
    calibrate_field,
)
from .camera import CameraModel, CameraParams, distort, focal_from_vfov, undistort, vfov
from .field import PerspectiveField, latitude_at, render_field, up_vector_at
from .gravity import GravityDir, from_roll_pitch, roll_pitch
from .lm import LMConfig, Status

__version__ = "0.1.0"

__all__ = [
    "CalibrationProblem",
    "CalibrationResult",
    "CameraModel",
    "CameraParams",
    "GravityDir",
    "InitStrategy",
    "LMConfig",
    "PerspectiveField",
    "Prior",
    "RansacConfig",
    "Sharing",
    "Status",
    "calibrate",
    "calibrate_field",
    "distort",
    "focal_from_vfov",
    "from_roll_pitch",
    "latitude_at",
    "render_field",
    "roll_pitch",
    "undistort",
    "up_vector_at",
    "vfov",
]
