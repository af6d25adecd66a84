"""Rotation algebra and viewpoint transforms.

Conventions (shared by the generator, the rasterizer and inference):

- Rotations are 3x3 row-major matrices acting on column vectors: ``x' = R @ x``.
- The world is Y-up.  The camera sits on a sphere of radius ``D`` around the
  object; at ``az = el = 0`` it is on the -Z axis looking toward +Z with up +Y.
- ``lookat(az, el, theta)`` returns the *object* rotation equivalent to moving
  the camera to azimuth ``az`` (about +Y), elevation ``el`` (toward the +Y
  pole) and rolling it by ``theta`` about the viewing axis.
- Poses compose on the right: the pose of a generated view is
  ``canonical @ delta``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DegenerateViewError

ORTHO_TOL = 1e-9


class Rotation:
    """Immutable proper rotation (det +1, orthonormal within 1e-9)."""

    __slots__ = ("_m",)

    def __init__(self, m):
        m = np.asarray(m, dtype=np.float64)
        if m.shape != (3, 3):
            raise ValueError(f"rotation must be 3x3, got {m.shape}")
        err = np.linalg.norm(m.T @ m - np.eye(3))
        if err > ORTHO_TOL:
            raise ValueError(f"matrix not orthonormal (|R^T R - I|_F = {err:.3e})")
        det = np.linalg.det(m)
        if abs(det - 1.0) > ORTHO_TOL:
            raise ValueError(f"matrix not special orthogonal (det = {det!r})")
        m = m.copy()
        m.flags.writeable = False
        self._m = m

    @property
    def m(self) -> np.ndarray:
        """The 3x3 matrix (read-only view)."""
        return self._m

    @staticmethod
    def identity() -> "Rotation":
        return Rotation(np.eye(3))

    @staticmethod
    def from_axis_angle(axis, angle: float) -> "Rotation":
        """Rodrigues' formula; ``axis`` need not be unit length."""
        axis = np.asarray(axis, dtype=np.float64)
        n = np.linalg.norm(axis)
        if n < 1e-300:
            raise ValueError("rotation axis must be non-zero")
        x, y, z = axis / n
        K = np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])
        m = np.eye(3) + np.sin(angle) * K + (1.0 - np.cos(angle)) * (K @ K)
        return Rotation(m)

    def transpose(self) -> "Rotation":
        return Rotation(self._m.T)

    def angle_to(self, other: "Rotation") -> float:
        return geodesic_distance(self, other)

    def __matmul__(self, other: "Rotation") -> "Rotation":
        return Rotation(self._m @ other._m)

    def __repr__(self) -> str:
        return f"Rotation({self._m.tolist()!r})"

    def __eq__(self, other) -> bool:
        return isinstance(other, Rotation) and bool(np.array_equal(self._m, other._m))

    def __hash__(self):
        return hash(self._m.tobytes())


@dataclass(frozen=True)
class ViewSpec:
    """Viewing direction in degrees: azimuth, elevation and in-plane roll.

    Generated views always carry ``theta = 0``; the generator only controls
    azimuth and elevation.
    """

    az: float
    el: float
    theta: float = 0.0

    def __post_init__(self):
        if not -180.0 <= self.az <= 180.0:
            raise ValueError(f"az out of [-180, 180]: {self.az}")
        if not -90.0 <= self.el <= 90.0:
            raise ValueError(f"el out of [-90, 90]: {self.el}")
        if not -180.0 <= self.theta <= 180.0:
            raise ValueError(f"theta out of [-180, 180]: {self.theta}")


def lookat(view: ViewSpec) -> Rotation:
    """Object rotation equivalent to viewing from ``view``.

    Rows of the result are the camera's right/up/forward axes expressed in
    world coordinates, so ``lookat(ViewSpec(0, 0, 0))`` is the identity.
    Raises :class:`DegenerateViewError` at ``el = +/-90`` where the up vector
    is parallel to the viewing direction.
    """
    az = np.deg2rad(view.az)
    el = np.deg2rad(view.el)
    th = np.deg2rad(view.theta)

    # Forward axis: from the camera at D*(-cos el sin az, sin el, -cos el cos az)
    # toward the origin.
    f = np.array([np.cos(el) * np.sin(az), -np.sin(el), np.cos(el) * np.cos(az)])
    up_world = np.array([0.0, 1.0, 0.0])
    u = up_world - np.dot(up_world, f) * f
    n = np.linalg.norm(u)
    if n < 1e-9:
        raise DegenerateViewError(f"el = {view.el} deg: up parallel to view direction")
    u /= n
    r = np.cross(u, f)

    base = np.vstack([r, u, f])
    if view.theta == 0.0:
        return Rotation(base)
    c, s = np.cos(th), np.sin(th)
    roll = np.array([[c, s, 0.0], [-s, c, 0.0], [0.0, 0.0, 1.0]])
    return Rotation(roll @ base)


def compose_pose(canonical: Rotation, delta: Rotation) -> Rotation:
    """Pose of a view generated at ``delta`` from canonical pose ``canonical``."""
    return canonical @ delta


def geodesic_distance(a: Rotation, b: Rotation) -> float:
    """Rotation angle of ``a^T b`` in radians, in [0, pi].

    Equals ``|logm(a^T b)|_F / sqrt(2)``; computed through the trace for
    stability near 0 and pi.
    """
    rel = a.m.T @ b.m
    c = np.clip((np.trace(rel) - 1.0) * 0.5, -1.0, 1.0)
    return float(np.arccos(c))


def so3_grid(n_az: int, n_el: int, n_theta: int) -> list[Rotation]:
    """Deterministic az-major grid of initial poses.

    Azimuth covers [-180, 180) half-open, elevation [-60, 60] and roll
    [-30, 30] inclusive; every grid point is mapped through :func:`lookat`.
    """
    if min(n_az, n_el, n_theta) < 1:
        raise ValueError("grid counts must be >= 1")
    azs = -180.0 + 360.0 * np.arange(n_az) / n_az
    els = np.linspace(-60.0, 60.0, n_el)
    thetas = np.linspace(-30.0, 30.0, n_theta)
    out = []
    for az in azs:
        for el in els:
            for th in thetas:
                out.append(lookat(ViewSpec(float(az), float(el), float(th))))
    return out
