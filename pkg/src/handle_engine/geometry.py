"""Pinhole camera model and the lift / rigid-transform / project primitives.

Camera space is right-handed: camera at the origin, +z into the scene,
y up. A pixel center u in [0, 1]^2 lifts to

    x = (u_x - 0.5) * 2 * tan(fov_h / 2) * z
    y = -(u_y - 0.5) * 2 * tan(fov_v / 2) * z

with tan(fov_v / 2) = tan(fov_h / 2) * H / W and z the stored depth
value (perpendicular depth, not ray length). Point math runs in float64
so lift/project round-trips hold to well under 1e-6.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .core import Mask, ScalarField, _freeze
from .errors import ValidationError

_ORTHO_TOL = 1e-6


@dataclass(frozen=True)
class CameraIntrinsics:
    fov_h_deg: float
    width: int
    height: int

    def __post_init__(self):
        if not 0.0 < self.fov_h_deg < 180.0:
            raise ValidationError(f"horizontal fov must be in (0, 180), got {self.fov_h_deg}")
        if self.width < 1 or self.height < 1:
            raise ValidationError(f"invalid camera resolution {self.width}x{self.height}")

    @property
    def tan_half_h(self) -> float:
        return math.tan(math.radians(self.fov_h_deg) / 2.0)

    @property
    def tan_half_v(self) -> float:
        return self.tan_half_h * self.height / self.width

    def pixel_centers(self):
        """Normalized center coordinates: (ux of shape (W,), uy of shape (H,))."""
        ux = (np.arange(self.width, dtype=np.float64) + 0.5) / self.width
        uy = (np.arange(self.height, dtype=np.float64) + 0.5) / self.height
        return ux, uy


@dataclass(frozen=True)
class RigidTransform:
    """Rotation (3x3, orthonormal, det +1) followed by a translation."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        rot = np.array(self.rotation, dtype=np.float64, copy=True)
        trans = np.array(self.translation, dtype=np.float64, copy=True).reshape(3)
        if rot.shape != (3, 3):
            raise ValidationError(f"rotation must be 3x3, got {rot.shape}")
        if not np.isfinite(rot).all() or not np.isfinite(trans).all():
            raise ValidationError("transform contains non-finite values")
        if np.abs(rot.T @ rot - np.eye(3)).max() > _ORTHO_TOL:
            raise ValidationError("rotation is not orthonormal")
        if abs(np.linalg.det(rot) - 1.0) > _ORTHO_TOL:
            raise ValidationError("rotation must have determinant +1")
        object.__setattr__(self, "rotation", _freeze(rot))
        object.__setattr__(self, "translation", _freeze(trans))

    @classmethod
    def identity(cls) -> "RigidTransform":
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_axis_angle(cls, axis, angle_deg, translation=(0.0, 0.0, 0.0), pivot=None):
        """Rodrigues rotation about ``axis`` by ``angle_deg``, then translate.

        With a pivot p the rotation happens about p: the effective
        translation becomes p - R p + t.
        """
        axis = np.asarray(axis, dtype=np.float64).reshape(3)
        norm = np.linalg.norm(axis)
        if norm == 0.0:
            raise ValidationError("rotation axis must be nonzero")
        k = axis / norm
        theta = math.radians(float(angle_deg))
        kx = np.array(
            [[0.0, -k[2], k[1]], [k[2], 0.0, -k[0]], [-k[1], k[0], 0.0]], dtype=np.float64
        )
        rot = np.eye(3) + math.sin(theta) * kx + (1.0 - math.cos(theta)) * (kx @ kx)
        trans = np.asarray(translation, dtype=np.float64).reshape(3).copy()
        if pivot is not None:
            pivot = np.asarray(pivot, dtype=np.float64).reshape(3)
            trans = pivot - rot @ pivot + trans
        return cls(rot, trans)

    def compose(self, other: "RigidTransform") -> "RigidTransform":
        """self ∘ other: apply ``other`` first, then ``self``."""
        return RigidTransform(
            self.rotation @ other.rotation,
            self.rotation @ other.translation + self.translation,
        )

    def inverse(self) -> "RigidTransform":
        return RigidTransform(self.rotation.T, -(self.rotation.T @ self.translation))

    def apply(self, points: np.ndarray) -> np.ndarray:
        pts = np.asarray(points, dtype=np.float64)
        return pts @ self.rotation.T + self.translation

    def is_identity(self, tol: float = 0.0) -> bool:
        return (
            np.abs(self.rotation - np.eye(3)).max() <= tol
            and np.abs(self.translation).max() <= tol
        )


@dataclass(frozen=True)
class PointGrid:
    """Per-pixel 3D points in camera space, (H, W, 3) float64."""

    points: np.ndarray

    def __post_init__(self):
        pts = np.array(self.points, dtype=np.float64, copy=True)
        if pts.ndim != 3 or pts.shape[2] != 3 or min(pts.shape[:2]) < 1:
            raise ValidationError(f"PointGrid needs a (H, W, 3) array, got shape {pts.shape}")
        if not np.isfinite(pts).all():
            raise ValidationError("PointGrid contains non-finite values")
        object.__setattr__(self, "points", _freeze(pts))

    @property
    def width(self) -> int:
        return self.points.shape[1]

    @property
    def height(self) -> int:
        return self.points.shape[0]


def lift(depth: ScalarField, cam: CameraIntrinsics) -> PointGrid:
    """Backproject every pixel center using its depth value."""
    if (depth.height, depth.width) != (cam.height, cam.width):
        raise ValidationError(
            f"depth {depth.width}x{depth.height} does not match camera "
            f"{cam.width}x{cam.height}"
        )
    z = depth.data.astype(np.float64)
    if (z <= 0.0).any():
        r, c = np.argwhere(z <= 0.0)[0]
        raise ValidationError(f"depth must be positive everywhere; pixel (row={r}, col={c}) "
                              f"has value {z[r, c]}")
    ux, uy = cam.pixel_centers()
    x = (ux[None, :] - 0.5) * (2.0 * cam.tan_half_h) * z
    y = -(uy[:, None] - 0.5) * (2.0 * cam.tan_half_v) * z
    return PointGrid(np.stack([x, y, z], axis=-1))


def project(points, cam: CameraIntrinsics):
    """Project points to normalized image coordinates (unclamped).

    Returns (uv, in_front): points with z <= 0 are flagged invalid and
    get uv = 0 rather than raising.
    """
    pts = points.points if isinstance(points, PointGrid) else np.asarray(points, np.float64)
    if pts.shape[-1] != 3:
        raise ValidationError(f"points must have a trailing dimension of 3, got {pts.shape}")
    z = pts[..., 2]
    in_front = z > 0.0
    uv = np.zeros(pts.shape[:-1] + (2,), dtype=np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        ux = pts[..., 0] / (2.0 * cam.tan_half_h * z) + 0.5
        uy = -pts[..., 1] / (2.0 * cam.tan_half_v * z) + 0.5
    uv[..., 0] = np.where(in_front, ux, 0.0)
    uv[..., 1] = np.where(in_front, uy, 0.0)
    return uv, in_front


def apply_edit(points: PointGrid, edit: RigidTransform, objmask: Mask) -> PointGrid:
    """Rigidly move the masked points; all other points stay bit-identical."""
    if (objmask.height, objmask.width) != (points.height, points.width):
        raise ValidationError(
            f"mask {objmask.width}x{objmask.height} does not match point grid "
            f"{points.width}x{points.height}"
        )
    out = points.points.copy()
    sel = objmask.as_bool()
    if sel.any():
        out[sel] = edit.apply(out[sel])
    return PointGrid(out)


def masked_centroid(points: PointGrid, objmask: Mask) -> np.ndarray:
    """Centroid of the masked points (the default rotation pivot)."""
    sel = objmask.as_bool()
    if not sel.any():
        raise ValidationError("cannot take the centroid of an empty mask")
    return points.points[sel].mean(axis=0)
