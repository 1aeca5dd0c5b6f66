"""Synthetic benchmark scenes: analytic primitives on a ground plane.

A scene is a single primitive (box, sphere or cylinder) resting on the
ground plane y = 0 in world space, viewed by a pinhole camera at a
fixed height, with a vertical backdrop plane so every ray hits
something. Rays are parameterized so the ray parameter equals camera-z,
which makes rendered depth exactly consistent with the lift convention.

The benchmark sampler rejection-samples scenes and rigid edits until
the object sits fully inside the frustum before and after the edit and
the edit causes at most a bounded fraction of disocclusion.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import flow as flowmod
from . import geometry
from .core import FeatureMap, Mask, ScalarField
from .errors import ValidationError
from .geometry import CameraIntrinsics, RigidTransform

PRIMITIVE_KINDS = ("box", "sphere", "cylinder")
_EPS = 1e-9


@dataclass(frozen=True)
class Scene:
    kind: str
    size: tuple  # sphere: (r,); box: (hx, hy, hz); cylinder: (r, half_height)
    center: tuple  # world-space center of the primitive
    yaw_deg: float
    camera: CameraIntrinsics
    cam_height: float = 1.5
    cam_pitch_deg: float = -10.0
    backdrop_z: float = 12.0
    light: tuple = (0.3, 0.8, -0.5)
    object_albedo: tuple = (0.8, 0.3, 0.25)
    ground_albedo: tuple = (0.45, 0.45, 0.45)

    def __post_init__(self):
        if self.kind not in PRIMITIVE_KINDS:
            raise ValidationError(f"unknown primitive kind {self.kind!r}")
        light = np.asarray(self.light, dtype=np.float64)
        norm = np.linalg.norm(light)
        if norm == 0:
            raise ValidationError("light direction must be nonzero")
        object.__setattr__(self, "light", tuple(light / norm))
        object.__setattr__(self, "size", tuple(float(v) for v in self.size))
        object.__setattr__(self, "center", tuple(float(v) for v in self.center))

    def world_from_local(self) -> RigidTransform:
        return RigidTransform.from_axis_angle((0.0, 1.0, 0.0), self.yaw_deg,
                                              translation=self.center)

    def camera_to_world(self) -> RigidTransform:
        return RigidTransform.from_axis_angle((1.0, 0.0, 0.0), self.cam_pitch_deg,
                                              translation=(0.0, self.cam_height, 0.0))

    def resting_center_height(self) -> float:
        if self.kind == "sphere":
            return self.size[0]
        if self.kind == "box":
            return self.size[1]
        return self.size[1]  # cylinder: half height


@dataclass(frozen=True)
class EditSample:
    scene: Scene
    edit: RigidTransform  # camera space, pivot already resolved
    edit_spec: dict = field(default_factory=dict)
    disocclusion_fraction: float = 0.0


# ---------------------------------------------------------------------------
# Analytic intersectors (local primitive frame; rays (o, d), o + s*d)


def _hit_sphere(o, d, radius):
    a = (d * d).sum(-1)
    b = 2.0 * (o * d).sum(-1)
    c = (o * o).sum(-1) - radius * radius
    disc = b * b - 4.0 * a * c
    ok = disc >= 0.0
    sq = np.sqrt(np.where(ok, disc, 0.0))
    s0 = (-b - sq) / (2.0 * a)
    s1 = (-b + sq) / (2.0 * a)
    s = np.where(s0 > _EPS, s0, s1)
    s = np.where(ok & (s > _EPS), s, np.inf)
    hit = o + s[..., None] * d
    normal = hit / radius
    return s, normal


def _hit_box(o, d, half):
    half = np.asarray(half, dtype=np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / d
        t1 = (-half - o) * inv
        t2 = (half - o) * inv
    lo = np.minimum(t1, t2)
    hi = np.maximum(t1, t2)
    # Rays parallel to a slab: inside iff |o| <= half on that axis.
    parallel = np.abs(d) < _EPS
    inside = np.abs(o) <= half
    lo = np.where(parallel, np.where(inside, -np.inf, np.inf), lo)
    hi = np.where(parallel, np.where(inside, np.inf, -np.inf), hi)
    tmin = lo.max(-1)
    tmax = hi.min(-1)
    ok = (tmax >= tmin) & (tmax > _EPS)
    s = np.where(tmin > _EPS, tmin, tmax)
    s = np.where(ok & (s > _EPS), s, np.inf)
    axis = lo.argmax(-1)
    normal = np.zeros_like(o)
    idx = np.indices(axis.shape)
    normal[(*idx, axis)] = -np.sign(np.take_along_axis(d, axis[..., None], -1)[..., 0])
    return s, normal


def _hit_cylinder(o, d, radius, half_height):
    ox, oy, oz = o[..., 0], o[..., 1], o[..., 2]
    dx, dy, dz = d[..., 0], d[..., 1], d[..., 2]
    a = dx * dx + dz * dz
    b = 2.0 * (ox * dx + oz * dz)
    c = ox * ox + oz * oz - radius * radius
    disc = b * b - 4.0 * a * c
    ok = (disc >= 0.0) & (a > _EPS)
    sq = np.sqrt(np.where(ok, disc, 0.0))
    with np.errstate(divide="ignore", invalid="ignore"):
        s0 = np.where(ok, (-b - sq) / (2.0 * a), np.inf)
        s1 = np.where(ok, (-b + sq) / (2.0 * a), np.inf)
    side = np.full(ox.shape, np.inf)
    for cand in (s0, s1):
        y = oy + cand * dy
        good = ok & (cand > _EPS) & (np.abs(y) <= half_height) & (cand < side)
        side = np.where(good, cand, side)
    caps = np.full(ox.shape, np.inf)
    cap_sign = np.zeros(ox.shape)
    with np.errstate(divide="ignore", invalid="ignore"):
        for sign in (1.0, -1.0):
            cand = (sign * half_height - oy) / dy
            px = ox + cand * dx
            pz = oz + cand * dz
            good = (np.abs(dy) > _EPS) & (cand > _EPS) & \
                   (px * px + pz * pz <= radius * radius) & (cand < caps)
            caps = np.where(good, cand, caps)
            cap_sign = np.where(good, sign, cap_sign)
    s = np.minimum(side, caps)
    hit = o + s[..., None] * d
    radial = hit.copy()
    radial[..., 1] = 0.0
    radial /= max(radius, _EPS)
    normal = np.where((caps < side)[..., None],
                      np.stack([np.zeros_like(ox), cap_sign, np.zeros_like(ox)], -1),
                      radial)
    return s, normal


def _primitive_hit(scene: Scene, pose: RigidTransform, origins, dirs):
    to_local = pose.inverse()
    o = to_local.apply(origins)
    d = dirs @ to_local.rotation.T
    if scene.kind == "sphere":
        s, n_local = _hit_sphere(o, d, scene.size[0])
    elif scene.kind == "box":
        s, n_local = _hit_box(o, d, np.asarray(scene.size))
    else:
        s, n_local = _hit_cylinder(o, d, scene.size[0], scene.size[1])
    normal = n_local @ pose.rotation.T
    return s, normal


def _render(scene: Scene, pose: RigidTransform):
    cam = scene.camera
    ux, uy = cam.pixel_centers()
    dirs_cam = np.empty((cam.height, cam.width, 3))
    dirs_cam[..., 0] = (ux[None, :] - 0.5) * 2.0 * cam.tan_half_h
    dirs_cam[..., 1] = -(uy[:, None] - 0.5) * 2.0 * cam.tan_half_v
    dirs_cam[..., 2] = 1.0
    c2w = scene.camera_to_world()
    dirs = dirs_cam @ c2w.rotation.T
    origin = np.broadcast_to(c2w.translation, dirs.shape)

    oy, dy = origin[..., 1], dirs[..., 1]
    with np.errstate(divide="ignore", invalid="ignore"):
        s_ground = np.where(dy < -_EPS, -oy / dy, np.inf)
        oz, dz = origin[..., 2], dirs[..., 2]
        s_back = np.where(dz > _EPS, (scene.backdrop_z - oz) / dz, np.inf)
    s_bg = np.minimum(s_ground, s_back)
    if not np.isfinite(s_bg).all():
        raise ValidationError("a ray misses both ground and backdrop; "
                              "check camera pitch / backdrop placement")

    s_prim, n_prim = _primitive_hit(scene, pose, origin, dirs)
    mask = s_prim < s_bg
    depth = np.where(mask, s_prim, s_bg)

    light = np.asarray(scene.light)
    n_ground = np.where((s_ground <= s_back)[..., None],
                        np.array([0.0, 1.0, 0.0]), np.array([0.0, 0.0, -1.0]))
    normal = np.where(mask[..., None], n_prim, n_ground)
    shade = np.maximum(0.0, (normal * light).sum(-1)) + 0.1
    albedo = np.where(mask[..., None], np.asarray(scene.object_albedo),
                      np.asarray(scene.ground_albedo))
    rgb = np.clip(np.moveaxis(albedo * shade[..., None], 2, 0), 0.0, 1.0)
    return (ScalarField(depth.astype(np.float32)),
            FeatureMap(rgb.astype(np.float32)),
            Mask(mask.astype(np.uint8)))


def render(scene: Scene):
    """Render depth (camera z), shaded image, and the primitive mask."""
    return _render(scene, scene.world_from_local())


def render_edited(scene: Scene, edit: RigidTransform):
    """Render with the camera-space edit applied to the primitive pose."""
    c2w = scene.camera_to_world()
    pose = c2w.compose(edit).compose(c2w.inverse()).compose(scene.world_from_local())
    return _render(scene, pose)


# ---------------------------------------------------------------------------
# Benchmark sampling


def _mask_in_frame(mask: Mask, margin: int, min_pixels: int) -> bool:
    count = mask.count()
    if count < min_pixels:
        return False
    m = mask.as_bool()
    border = np.zeros_like(m)
    border[:margin, :] = True
    border[-margin:, :] = True
    border[:, :margin] = True
    border[:, -margin:] = True
    return not (m & border).any()


def _random_scene(rng: np.random.Generator, resolution: int, fov_deg: float) -> Scene:
    kind = PRIMITIVE_KINDS[rng.integers(len(PRIMITIVE_KINDS))]
    if kind == "sphere":
        size = (rng.uniform(0.28, 0.55),)
    elif kind == "box":
        size = tuple(rng.uniform(0.22, 0.5, size=3))
    else:
        size = (rng.uniform(0.2, 0.4), rng.uniform(0.25, 0.55))
    x = rng.uniform(-1.0, 1.0)
    z = rng.uniform(2.8, 5.5)
    yaw = rng.uniform(0.0, 360.0)
    azim = rng.uniform(0.0, 2.0 * math.pi)
    elev = rng.uniform(math.radians(35.0), math.radians(75.0))
    light = (math.cos(elev) * math.sin(azim), math.sin(elev), math.cos(elev) * math.cos(azim))
    scene = Scene(
        kind=kind,
        size=size,
        center=(x, 0.0, z),
        yaw_deg=yaw,
        camera=CameraIntrinsics(fov_deg, resolution, resolution),
        light=light,
        object_albedo=tuple(rng.uniform(0.25, 0.9, size=3)),
        ground_albedo=tuple(rng.uniform(0.35, 0.6) * np.ones(3)),
    )
    return replace(scene, center=(x, scene.resting_center_height(), z))


def _random_edit(rng: np.random.Generator, depth: ScalarField, mask: Mask,
                 cam: CameraIntrinsics):
    """Random camera-space rigid edit (translation or rotation about the centroid)."""
    if rng.random() < 0.5:
        direction = rng.normal(size=3)
        direction /= np.linalg.norm(direction)
        magnitude = rng.uniform(0.15, 1.0)
        translation = direction * magnitude * np.array([0.8, 0.35, 1.0])
        spec = {
            "axis": [0.0, 1.0, 0.0],
            "angle_deg": 0.0,
            "translation": [float(v) for v in translation],
            "pivot": [0.0, 0.0, 0.0],
        }
        return spec, RigidTransform.from_axis_angle((0, 1, 0), 0.0, translation)
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    angle = rng.uniform(5.0, 45.0) * (1.0 if rng.random() < 0.5 else -1.0)
    pivot = geometry.masked_centroid(geometry.lift(depth, cam), mask)
    spec = {
        "axis": [float(v) for v in axis],
        "angle_deg": float(angle),
        "translation": [0.0, 0.0, 0.0],
        "pivot": [float(v) for v in pivot],
    }
    return spec, RigidTransform.from_axis_angle(axis, angle, pivot=pivot)


def disocclusion_fraction(depth: ScalarField, cam: CameraIntrinsics,
                          edit: RigidTransform, mask: Mask) -> float:
    """Share of the original object footprint left uncovered by the edit."""
    fl, _ = flowmod.build_flow(depth, cam, edit, mask)
    holes = ~fl.valid.as_bool()
    count = mask.count()
    if count == 0:
        raise ValidationError("object mask is empty")
    return float((holes & mask.as_bool()).sum()) / count


def sample_benchmark(n: int, seed: int, delta: float = 0.3, *, resolution: int = 128,
                     fov_deg: float = 55.0, margin: int = 2, min_pixels: int = 60,
                     budget_per_sample: int = 200) -> list:
    """Rejection-sample n constrained edit samples, deterministic per seed."""
    if n < 1:
        raise ValidationError("need n >= 1 samples")
    rng = np.random.default_rng(seed)
    samples = []
    attempts = 0
    budget = budget_per_sample * n
    while len(samples) < n:
        attempts += 1
        if attempts > budget:
            raise ValidationError(
                f"rejection budget exhausted ({budget} attempts for {n} samples)"
            )
        scene = _random_scene(rng, resolution, fov_deg)
        depth, _, mask = render(scene)
        if not _mask_in_frame(mask, margin, min_pixels):
            continue
        spec, edit = _random_edit(rng, depth, mask, scene.camera)
        _, _, gt_mask = render_edited(scene, edit)
        if not _mask_in_frame(gt_mask, margin, min_pixels):
            continue
        fraction = disocclusion_fraction(depth, scene.camera, edit, mask)
        if fraction > delta:
            continue
        samples.append(EditSample(scene, edit, spec, fraction))
    return samples


# ---------------------------------------------------------------------------
# Serialization


def scene_to_dict(scene: Scene) -> dict:
    return {
        "kind": scene.kind,
        "size": list(scene.size),
        "center": list(scene.center),
        "yaw_deg": scene.yaw_deg,
        "camera": {
            "fov_h_deg": scene.camera.fov_h_deg,
            "width": scene.camera.width,
            "height": scene.camera.height,
        },
        "cam_height": scene.cam_height,
        "cam_pitch_deg": scene.cam_pitch_deg,
        "backdrop_z": scene.backdrop_z,
        "light": list(scene.light),
        "object_albedo": list(scene.object_albedo),
        "ground_albedo": list(scene.ground_albedo),
    }


def scene_from_dict(data: dict) -> Scene:
    cam = data["camera"]
    return Scene(
        kind=data["kind"],
        size=tuple(data["size"]),
        center=tuple(data["center"]),
        yaw_deg=float(data["yaw_deg"]),
        camera=CameraIntrinsics(cam["fov_h_deg"], cam["width"], cam["height"]),
        cam_height=float(data["cam_height"]),
        cam_pitch_deg=float(data["cam_pitch_deg"]),
        backdrop_z=float(data["backdrop_z"]),
        light=tuple(data["light"]),
        object_albedo=tuple(data["object_albedo"]),
        ground_albedo=tuple(data["ground_albedo"]),
    )
