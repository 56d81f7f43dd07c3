"""Gravity direction on the unit sphere.

Camera frame: x right, y down, z forward. An upright camera sees gravity as
``(0, 1, 0)``. Roll and pitch are defined by::

    g = Rz(roll) @ Rx(pitch) @ (0, 1, 0)
      = (-sin(roll) cos(pitch), cos(roll) cos(pitch), sin(pitch))

so positive pitch tilts the optical axis toward gravity (looking down) and
``pitch = pi/2`` gives ``g = (0, 0, 1)``.
"""

from __future__ import annotations

import math

import numpy as np

from .errors import GimbalLock


class GravityDir:
    """Unit gravity vector in the camera frame."""

    __slots__ = ("vec",)

    def __init__(self, vec):
        v = np.array(vec, dtype=float).reshape(3)
        n = np.linalg.norm(v)
        if not (n > 0 and np.isfinite(n)):
            raise ValueError(f"gravity must be a nonzero finite 3-vector, got {vec}")
        self.vec = v / n
        self.vec.setflags(write=False)

    @classmethod
    def upright(cls) -> "GravityDir":
        return cls((0.0, 1.0, 0.0))

    @classmethod
    def from_roll_pitch(cls, roll: float, pitch: float) -> "GravityDir":
        return from_roll_pitch(roll, pitch)

    @property
    def x(self) -> float:
        return float(self.vec[0])

    @property
    def y(self) -> float:
        return float(self.vec[1])

    @property
    def z(self) -> float:
        return float(self.vec[2])

    def roll_pitch(self) -> tuple[float, float]:
        return roll_pitch(self)

    def tangent_basis(self) -> np.ndarray:
        return tangent_basis(self)

    def retract(self, delta) -> "GravityDir":
        return retract(self, delta)

    def angle_to(self, other: "GravityDir") -> float:
        return angle_between(self.vec, other.vec)

    def __repr__(self):
        return f"GravityDir({self.x:.17g}, {self.y:.17g}, {self.z:.17g})"


def from_roll_pitch(roll: float, pitch: float) -> GravityDir:
    cp = math.cos(pitch)
    return GravityDir((-math.sin(roll) * cp, math.cos(roll) * cp, math.sin(pitch)))


def roll_pitch(g: GravityDir, strict: bool = False) -> tuple[float, float]:
    """Inverse of :func:`from_roll_pitch` for ``|pitch| < pi/2``.

    At the poles the roll is unobservable and reported as 0, or
    :class:`GimbalLock` is raised when ``strict``.
    """
    gx, gy, gz = g.vec
    pitch = math.asin(max(-1.0, min(1.0, gz)))
    horiz = math.hypot(gx, gy)
    if horiz < 1e-15:
        if strict:
            raise GimbalLock(f"pitch {math.degrees(pitch):.3f} deg leaves roll undefined")
        return 0.0, math.copysign(math.pi / 2, gz)
    # atan2 on the horizontal part is better conditioned than asin near the poles
    pitch = math.atan2(gz, horiz)
    return math.atan2(-gx, gy), pitch


def roll_pitch_jacobian(g: GravityDir) -> np.ndarray:
    """2x3 derivative of ``(roll, pitch)`` with respect to the vector ``g``."""
    gx, gy, gz = g.vec
    h2 = gx * gx + gy * gy
    h = math.sqrt(h2)
    return np.array(
        [
            [-gy / h2, gx / h2, 0.0],
            [-gz * gx / h, -gz * gy / h, h],
        ]
    )


def tangent_basis(g: GravityDir) -> np.ndarray:
    """Orthonormal 3x2 basis of the tangent plane at ``g``.

    The first column is the coordinate axis least aligned with ``g`` (lowest
    index on ties), projected onto the tangent plane; the second is
    ``g x b1``.
    """
    v = g.vec
    axis = int(np.argmin(np.abs(v)))
    e = np.zeros(3)
    e[axis] = 1.0
    b1 = e - v[axis] * v
    b1 /= np.linalg.norm(b1)
    b2 = np.cross(v, b1)
    b2 /= np.linalg.norm(b2)
    return np.stack([b1, b2], axis=1)


def retract(g: GravityDir, delta) -> GravityDir:
    """Exponential map: walk ``|delta|`` radians along the geodesic ``B @ delta``."""
    delta = np.asarray(delta, dtype=float).reshape(2)
    t = tangent_basis(g) @ delta
    theta = float(np.linalg.norm(t))
    if theta == 0.0:
        return g
    if theta < 1e-8:
        sinc = 1.0 - theta * theta / 6.0
    else:
        sinc = math.sin(theta) / theta
    return GravityDir(math.cos(theta) * g.vec + sinc * t)


def angle_between(a, b) -> float:
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    return math.atan2(float(np.linalg.norm(np.cross(a, b))), float(np.dot(a, b)))
