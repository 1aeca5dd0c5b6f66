"""Edited depth maps: transformed-object depth over static-scene depth.

The edited depth d' composites the depth of the moved object (distances
of the warped, transformed 3D points) over a background depth for the
static scene, seamlessly via the Poisson solver. The background depth
is either supplied (synthetic ground truth) or reconstructed by
harmonically infilling the dilated object footprint of the input depth.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from . import flow as flowmod
from . import geometry, poisson
from .core import Mask, ScalarField
from .errors import EditOutOfFrameError, ValidationError

DEPTH_CONVENTIONS = ("z", "euclidean")
_MIN_DEPTH = 1e-6


@dataclass(frozen=True)
class DepthEditResult:
    edited_depth: ScalarField
    object_depth: ScalarField
    warped_object_mask: Mask
    background_mask: Mask
    valid_mask: Mask
    flow: flowmod.FlowField


def transformed_object_depth(moved: geometry.PointGrid, flow: flowmod.FlowField,
                             convention: str = "z") -> ScalarField:
    """Per-pixel distance of the warped transformed points.

    ``z`` reads the z coordinate (perpendicular depth, matching the
    lift convention); ``euclidean`` takes the norm of the warped point,
    reproducing the distance-to-camera formula literally. Values are
    only meaningful on the warped object mask.
    """
    if convention not in DEPTH_CONVENTIONS:
        raise ValidationError(f"unknown depth convention {convention!r}")
    pts = np.moveaxis(moved.points, 2, 0)
    warped = flowmod.warp_array(pts, flow)
    if convention == "z":
        depth = warped[2]
    else:
        depth = np.sqrt((warped ** 2).sum(axis=0))
    return ScalarField(depth.astype(np.float32))


def background_depth(depth: ScalarField, objmask: Mask,
                     provided_bg: ScalarField | None = None, *,
                     dilation_radius: int = 3,
                     tol: float = poisson.DEFAULT_TOL) -> ScalarField:
    """Depth of the scene without the object.

    A supplied background (e.g. synthetic ground truth) is returned
    unchanged; otherwise the object footprint, dilated by
    ``dilation_radius`` pixels, is infilled harmonically.
    """
    if provided_bg is not None:
        if (provided_bg.height, provided_bg.width) != (depth.height, depth.width):
            raise ValidationError("provided background depth size mismatch")
        return provided_bg
    sel = objmask.as_bool()
    if not sel.any():
        return ScalarField(depth.data)
    if dilation_radius > 0:
        sel = ndimage.binary_dilation(sel, structure=np.ones((3, 3), bool),
                                      iterations=dilation_radius)
    if sel.all():
        raise ValidationError("object mask covers the whole image; cannot infill background")
    return poisson.harmonic_infill(depth, Mask(sel.astype(np.uint8)), tol=tol)


def edit_depth(depth: ScalarField, cam: geometry.CameraIntrinsics,
               edit: geometry.RigidTransform, objmask: Mask,
               provided_bg: ScalarField | None = None, *,
               convention: str = "z",
               dilation_radius: int = 3,
               tol: float = poisson.DEFAULT_TOL,
               footprint_2x2: bool = True,
               validity_erosion: int = 0) -> DepthEditResult:
    """Full edited-depth pipeline: flow, object depth, background, composite."""
    if (objmask.height, objmask.width) != (depth.height, depth.width):
        raise ValidationError("object mask does not match depth resolution")
    fl, moved = flowmod.build_flow(depth, cam, edit, objmask,
                                   footprint_2x2=footprint_2x2,
                                   validity_erosion=validity_erosion)
    warped_obj = flowmod.warp_mask(objmask, fl)
    m_obj = Mask(warped_obj.data & fl.valid.data)
    if m_obj.count() == 0:
        raise EditOutOfFrameError("edit out of frame: warped object mask is empty")
    m_bg = m_obj.complement()

    d_obj = transformed_object_depth(moved, fl, convention)
    d_bg = background_depth(depth, objmask, provided_bg,
                            dilation_radius=dilation_radius, tol=tol)

    if m_obj.as_bool().all():
        edited = d_obj
    else:
        # The composite guidance needs fg values on a ring around the
        # region; extend the object depth with the background there.
        fg_full = ScalarField(np.where(m_obj.as_bool(), d_obj.data, d_bg.data))
        edited = poisson.seamless_composite(fg_full, d_bg, m_obj, tol=tol)

    values = edited.data.copy()
    bad = ~np.isfinite(values) | (values <= 0.0)
    if bad.any():
        values = np.where(bad, 0.0, values)
        filled = poisson.harmonic_infill(ScalarField(values), Mask(bad.astype(np.uint8)),
                                         tol=tol)
        values = np.maximum(filled.data, _MIN_DEPTH)
    edited = ScalarField(values)
    return DepthEditResult(edited, d_obj, m_obj, m_bg, fl.valid, fl)
