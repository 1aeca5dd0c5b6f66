"""3D-aware flow fields: inversion of project ∘ transform ∘ lift, and warping.

The flow F stores, per target pixel v, the displacement back to its
source: sampling a signal at v - F(v) realizes the 3D edit in 2D.
Building F inverts the forward map by splatting every source pixel into
the target pixel covering its projected position and keeping, per
target, the source whose transformed point is closest to the camera.
Targets no source reaches are holes; they carry zero displacement and
are flagged invalid, and nothing downstream may read them.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from . import geometry
from .core import FeatureMap, Mask, ScalarField, _freeze, block_any, resample_array
from .errors import ValidationError

Z_TIE_TOL = 1e-6


@dataclass(frozen=True)
class FlowField:
    """Per-pixel displacement in normalized [0,1]^2 units plus validity.

    Invariants: where valid, v - F(v) lies inside [0,1]^2; where
    invalid, du = dv = 0 (sentinel).
    """

    du: np.ndarray
    dv: np.ndarray
    valid: Mask

    def __post_init__(self):
        du = np.array(self.du, dtype=np.float32, order="C", copy=True)
        dv = np.array(self.dv, dtype=np.float32, order="C", copy=True)
        if du.shape != dv.shape or du.ndim != 2:
            raise ValidationError(f"flow components must share a (H, W) shape, "
                                  f"got {du.shape} and {dv.shape}")
        if (self.valid.height, self.valid.width) != du.shape:
            raise ValidationError("validity mask does not match flow resolution")
        if not (np.isfinite(du).all() and np.isfinite(dv).all()):
            raise ValidationError("flow contains non-finite displacements")
        hole = ~self.valid.as_bool()
        if du[hole].any() or dv[hole].any():
            raise ValidationError("invalid flow pixels must carry zero displacement")
        object.__setattr__(self, "du", _freeze(du))
        object.__setattr__(self, "dv", _freeze(dv))

    @property
    def width(self) -> int:
        return self.du.shape[1]

    @property
    def height(self) -> int:
        return self.du.shape[0]

    @classmethod
    def zero(cls, width: int, height: int) -> "FlowField":
        z = np.zeros((height, width), dtype=np.float32)
        return cls(z, z.copy(), Mask.ones(width, height))


def _zbuffer(targets, dists, sources, n_targets):
    """Per-target winning source index under the min-distance rule.

    Distances within Z_TIE_TOL of the per-target minimum are tied; ties
    go to the lowest source index. Returns -1 for untouched targets.
    """
    best = np.full(n_targets, np.inf)
    np.minimum.at(best, targets, dists)
    tied = dists <= best[targets] + Z_TIE_TOL
    winner = np.full(n_targets, np.iinfo(np.int64).max, dtype=np.int64)
    np.minimum.at(winner, targets[tied], sources[tied])
    winner[np.isinf(best)] = -1
    return winner


def build_flow(depth: ScalarField, cam: geometry.CameraIntrinsics,
               edit: geometry.RigidTransform, objmask: Mask, *,
               footprint_2x2: bool = True, validity_erosion: int = 0):
    """Invert the edited reprojection into a flow field.

    Returns (flow, transformed point grid). Each source pixel splats
    into the target pixel nearest its projected position, z-buffered by
    Euclidean camera distance; with ``footprint_2x2`` (default) the four
    pixels of the bilinear neighborhood additionally fill any targets
    the nearest-pixel pass left as holes, which suppresses pinholes from
    sampling mismatch. An identity edit therefore yields the exact zero
    flow with full validity.
    """
    grid = geometry.lift(depth, cam)
    moved = geometry.apply_edit(grid, edit, objmask)
    uv, in_front = geometry.project(moved, cam)
    if not in_front.any():
        raise ValidationError("all transformed points are behind the camera")

    h, w = depth.height, depth.width
    n = h * w
    dist = np.linalg.norm(moved.points, axis=-1).ravel()
    tx = (uv[..., 0] * w - 0.5).ravel()
    ty = (uv[..., 1] * h - 0.5).ravel()
    src_idx = np.arange(n, dtype=np.int64)
    front = in_front.ravel()

    def gather(cols, rows):
        ok = front & (cols >= 0) & (cols < w) & (rows >= 0) & (rows < h)
        tgt = rows[ok] * w + cols[ok]
        return tgt, dist[ok], src_idx[ok]

    near_c = np.floor(tx + 0.5).astype(np.int64)
    near_r = np.floor(ty + 0.5).astype(np.int64)
    winner = _zbuffer(*gather(near_c, near_r), n)

    if footprint_2x2:
        holes = winner < 0
        if holes.any():
            x0 = np.floor(tx).astype(np.int64)
            y0 = np.floor(ty).astype(np.int64)
            cand_t, cand_d, cand_s = [], [], []
            for dc in (0, 1):
                for dr in (0, 1):
                    tgt, d, s = gather(x0 + dc, y0 + dr)
                    cand_t.append(tgt)
                    cand_d.append(d)
                    cand_s.append(s)
            filler = _zbuffer(
                np.concatenate(cand_t), np.concatenate(cand_d), np.concatenate(cand_s), n
            )
            winner = np.where(holes & (filler >= 0), filler, winner)

    valid = winner >= 0
    if validity_erosion > 0:
        valid = ndimage.binary_erosion(
            valid.reshape(h, w), structure=np.ones((3, 3), bool),
            iterations=validity_erosion, border_value=True,
        ).ravel()

    tgt_c = np.arange(n) % w
    tgt_r = np.arange(n) // w
    src_c = np.where(valid, winner % w, tgt_c)
    src_r = np.where(valid, winner // w, tgt_r)
    du = ((tgt_c - src_c) / w).reshape(h, w)
    dv = ((tgt_r - src_r) / h).reshape(h, w)
    du[~valid.reshape(h, w)] = 0.0
    dv[~valid.reshape(h, w)] = 0.0
    flow = FlowField(du.astype(np.float32), dv.astype(np.float32),
                     Mask(valid.reshape(h, w).astype(np.uint8)))
    return flow, moved


def warp_array(arr: np.ndarray, flow: FlowField) -> np.ndarray:
    """W[X, F](v) = X(v - F(v)) on a (..., H, W) array; 0 where invalid.

    Sample coordinates are formed in pixel units (col - du * W), so a
    zero-displacement pixel reads its source value exactly.
    """
    a = np.asarray(arr, dtype=np.float64)
    h, w = flow.height, flow.width
    if a.shape[-2:] != (h, w):
        raise ValidationError(f"signal {a.shape[-2:]} does not match flow {(h, w)}")
    ax = np.arange(w, dtype=np.float64)[None, :] - flow.du.astype(np.float64) * w
    ay = np.arange(h, dtype=np.float64)[:, None] - flow.dv.astype(np.float64) * h
    ax = np.clip(ax, 0.0, w - 1.0)
    ay = np.clip(ay, 0.0, h - 1.0)
    x0 = np.minimum(np.floor(ax).astype(np.int64), w - 1)
    y0 = np.minimum(np.floor(ay).astype(np.int64), h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = ax - x0
    fy = ay - y0
    out = (
        a[..., y0, x0] * (1 - fy) * (1 - fx)
        + a[..., y0, x1] * (1 - fy) * fx
        + a[..., y1, x0] * fy * (1 - fx)
        + a[..., y1, x1] * fy * fx
    )
    return out * flow.valid.as_bool()


def warp(signal: FeatureMap, flow: FlowField) -> FeatureMap:
    """Warp a feature map by the flow; holes come out as exact zeros."""
    return FeatureMap(warp_array(signal.data, flow).astype(np.float32))


def warp_mask(mask: Mask, flow: FlowField) -> Mask:
    """Warp a binary mask and re-binarize at 0.5; holes map to 0."""
    warped = warp_array(mask.data.astype(np.float64), flow)
    return Mask((warped >= 0.5).astype(np.uint8))


def resample_flow(flow: FlowField, out_w: int, out_h: int) -> FlowField:
    """Resample a flow to a new resolution.

    Displacements are resolution-independent (normalized units) and are
    interpolated bilinearly. Validity is conservative: an output pixel
    is a hole if any source pixel it covers is a hole, or if any of its
    interpolation taps reads one.
    """
    if out_w < 1 or out_h < 1:
        raise ValidationError(f"output size must be positive, got {out_w}x{out_h}")
    hole = ~flow.valid.as_bool()
    covered_hole = block_any(hole, out_w, out_h)
    taps_bad = resample_array(hole.astype(np.float64), out_w, out_h) > 0.0
    valid = ~(covered_hole | taps_bad)
    du = resample_array(flow.du, out_w, out_h)
    dv = resample_array(flow.dv, out_w, out_h)
    du[~valid] = 0.0
    dv[~valid] = 0.0
    return FlowField(du.astype(np.float32), dv.astype(np.float32),
                     Mask(valid.astype(np.uint8)))
