"""Analytic SDF scenes: the ground-truth oracle for images, depth and LiDAR."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .errors import FormatError, ValidationError
from .geometry import Aabb, CameraRig, CameraView, clip_rays, pixel_directions, ring_rig

SCENE_FORMAT = "maskvol-scene"
SCENE_VERSION = 1
LIGHT_DIR = np.array([0.4, 0.3, 0.866])
LIGHT_DIR = LIGHT_DIR / np.linalg.norm(LIGHT_DIR)
AMBIENT = 0.1
TRACE_EPS = 1e-6
TRACE_MAX_ITERS = 512
HIT_TOL = 1e-4


@dataclass(frozen=True)
class SdfPrimitive:
    kind: str  # sphere | box | halfspace
    params: dict
    albedo: tuple = (0.5, 0.5, 0.5)

    def __post_init__(self):
        k = self.kind
        p = {key: np.asarray(val, dtype=np.float64) for key, val in self.params.items()}
        if k == "sphere":
            if float(p["radius"]) <= 0:
                raise ValidationError("sphere radius must be positive")
        elif k == "box":
            if np.any(p["half_extents"] <= 0):
                raise ValidationError("box half extents must be positive")
        elif k == "halfspace":
            if abs(np.linalg.norm(p["normal"]) - 1.0) > 1e-9:
                raise ValidationError("halfspace normal must be unit length")
        else:
            raise ValidationError(f"unknown primitive kind {k!r}")
        alb = tuple(float(a) for a in self.albedo)
        if len(alb) != 3 or min(alb) < 0 or max(alb) > 1:
            raise ValidationError("albedo must be three values in [0, 1]")
        object.__setattr__(self, "params", p)
        object.__setattr__(self, "albedo", alb)

    def sdf(self, p: np.ndarray) -> np.ndarray:
        q = self.params
        if self.kind == "sphere":
            return np.linalg.norm(p - q["center"], axis=-1) - q["radius"]
        if self.kind == "box":
            d = np.abs(p - q["center"]) - q["half_extents"]
            outside = np.linalg.norm(np.maximum(d, 0.0), axis=-1)
            inside = np.minimum(d.max(axis=-1), 0.0)
            return outside + inside
        return p @ q["normal"] - q["offset"]

    def normal(self, p: np.ndarray) -> np.ndarray:
        q = self.params
        if self.kind == "sphere":
            v = p - q["center"]
            return v / np.linalg.norm(v, axis=-1, keepdims=True)
        if self.kind == "box":
            rel = p - q["center"]
            d = np.abs(rel) - q["half_extents"]
            sign = np.where(rel < 0, -1.0, 1.0)
            pos = np.maximum(d, 0.0)
            norm = np.linalg.norm(pos, axis=-1, keepdims=True)
            outside = sign * pos / np.where(norm > 0, norm, 1.0)
            axis = np.argmax(d, axis=-1)
            inside = np.zeros_like(p)
            np.put_along_axis(inside, axis[..., None], np.take_along_axis(sign, axis[..., None], -1), -1)
            return np.where(norm > 0, outside, inside)
        return np.broadcast_to(q["normal"], p.shape).copy()

    @property
    def anchor(self) -> np.ndarray:
        q = self.params
        if self.kind == "halfspace":
            return q["normal"] * q["offset"]
        return q["center"]

    def to_dict(self) -> dict:
        return {"kind": self.kind, **{k: v.tolist() for k, v in self.params.items()}, "albedo": list(self.albedo)}

    @classmethod
    def from_dict(cls, d: dict) -> "SdfPrimitive":
        d = dict(d)
        kind = d.pop("kind")
        albedo = d.pop("albedo")
        return cls(kind, d, tuple(albedo))


def sphere(center, radius, albedo=(0.5, 0.5, 0.5)) -> SdfPrimitive:
    return SdfPrimitive("sphere", {"center": center, "radius": radius}, tuple(albedo))


def box(center, half_extents, albedo=(0.5, 0.5, 0.5)) -> SdfPrimitive:
    return SdfPrimitive("box", {"center": center, "half_extents": half_extents}, tuple(albedo))


def halfspace(normal, offset, albedo=(0.5, 0.5, 0.5)) -> SdfPrimitive:
    """Solid ``{p : normal . p <= offset}``."""
    return SdfPrimitive("halfspace", {"normal": normal, "offset": offset}, tuple(albedo))


@dataclass(frozen=True)
class SceneDef:
    primitives: tuple
    background_rgb: tuple
    bounds: Aabb
    rig: CameraRig
    lidar_origin: np.ndarray
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "primitives", tuple(self.primitives))
        object.__setattr__(self, "background_rgb", tuple(float(c) for c in self.background_rgb))
        object.__setattr__(self, "lidar_origin", np.asarray(self.lidar_origin, dtype=np.float64).reshape(3))


def scene_sdf_batch(scene: SceneDef, p) -> tuple[np.ndarray, np.ndarray]:
    """Union distance and index of the closest primitive for ``(N, 3)`` points."""
    p = np.asarray(p, dtype=np.float64).reshape(-1, 3)
    if not scene.primitives:
        return np.full(len(p), np.inf), np.full(len(p), -1)
    dists = np.stack([prim.sdf(p) for prim in scene.primitives], axis=-1)
    which = np.argmin(dists, axis=-1)
    return np.take_along_axis(dists, which[:, None], -1)[:, 0], which


def scene_sdf(scene: SceneDef, p):
    """Distance to the union surface and the albedo of the closest primitive."""
    d, which = scene_sdf_batch(scene, np.asarray(p, dtype=np.float64)[None])
    albedo = scene.primitives[which[0]].albedo if which[0] >= 0 else None
    return float(d[0]), albedo


def scene_normal(scene: SceneDef, p) -> np.ndarray:
    p = np.asarray(p, dtype=np.float64).reshape(-1, 3)
    _, which = scene_sdf_batch(scene, p)
    out = np.zeros_like(p)
    for k, prim in enumerate(scene.primitives):
        sel = which == k
        if sel.any():
            out[sel] = prim.normal(p[sel])
    return out


def sphere_trace(scene: SceneDef, origins, directions, t_start, t_end):
    """March every ray from ``t_start`` until ``|sdf| < 1e-6`` or it leaves ``t_end``.

    Returns ``(t, hit)``; rays that exhaust the iteration budget count as hits
    only if within ``1e-4`` of the surface.
    """
    o = np.asarray(origins, dtype=np.float64).reshape(-1, 3)
    d = np.asarray(directions, dtype=np.float64).reshape(-1, 3)
    t = np.array(t_start, dtype=np.float64).reshape(-1).copy()
    t_end = np.asarray(t_end, dtype=np.float64).reshape(-1)
    active = t < t_end
    hit = np.zeros(len(o), dtype=bool)
    dist = np.full(len(o), np.inf)
    for _ in range(TRACE_MAX_ITERS):
        if not active.any():
            break
        idx = np.nonzero(active)[0]
        dd, _ = scene_sdf_batch(scene, o[idx] + t[idx, None] * d[idx])
        dist[idx] = dd
        done = np.abs(dd) < TRACE_EPS
        hit[idx[done]] = True
        t[idx[~done]] += dd[~done]
        left = t[idx] > t_end[idx]
        active[idx[done | left]] = False
    stalled = active & (np.abs(dist) < HIT_TOL)
    hit |= stalled
    return t, hit


def oracle_render_rays(scene: SceneDef, origins, directions):
    """Ground-truth ``(rgb (N,3), depth (N,) with NaN on misses)`` for arbitrary rays.

    Tracing is confined to the scene bounds so every depth target is
    representable by the voxel volume.
    """
    o = np.asarray(origins, dtype=np.float64).reshape(-1, 3)
    d = np.asarray(directions, dtype=np.float64).reshape(-1, 3)
    t_near, t_far, inside = clip_rays(o, d, scene.bounds)
    t0 = np.where(inside, t_near, 0.0)
    t1 = np.where(inside, t_far, -1.0)
    t, hit = sphere_trace(scene, o, d, t0, t1)
    rgb = np.tile(np.asarray(scene.background_rgb), (len(o), 1))
    depth = np.full(len(o), np.nan)
    if hit.any():
        p = o[hit] + t[hit, None] * d[hit]
        n = scene_normal(scene, p)
        _, which = scene_sdf_batch(scene, p)
        albedo = np.asarray([scene.primitives[k].albedo for k in which])
        shade = np.maximum(n @ LIGHT_DIR, 0.0) + AMBIENT
        rgb[hit] = np.clip(albedo * shade[:, None], 0.0, 1.0)
        depth[hit] = t[hit]
    return rgb, depth


def oracle_render_pixel(scene: SceneDef, view: int, pixel):
    cam = scene.rig.view(view)
    d = pixel_directions([pixel], scene.rig, view)
    rgb, depth = oracle_render_rays(scene, cam.center[None], d)
    return tuple(rgb[0].tolist()), (None if np.isnan(depth[0]) else float(depth[0]))


def oracle_render_view(scene: SceneDef, view: int):
    """Full ``(H, W, 3)`` RGB and ``(H, W)`` depth (NaN = no surface) for one view."""
    H, W = scene.rig.image_size
    vv, uu = np.meshgrid(np.arange(H) + 0.5, np.arange(W) + 0.5, indexing="ij")
    px = np.stack([uu.ravel(), vv.ravel()], axis=-1)
    dirs = pixel_directions(px, scene.rig, view)
    origins = np.broadcast_to(scene.rig.view(view).center, dirs.shape)
    rgb, depth = oracle_render_rays(scene, origins, dirs)
    return rgb.reshape(H, W, 3), depth.reshape(H, W)


def simulate_lidar(
    scene: SceneDef,
    origin=None,
    azimuth_count: int = 360,
    elevation_rows: int = 32,
    elevation_range: Sequence[float] = (-35.0, 5.0),
) -> np.ndarray:
    """Spinning-LiDAR returns as ``(M, 4)`` rows ``x, y, z, intensity``.

    Intensity is the mean albedo of the surface hit. Misses produce no row.
    """
    origin = scene.lidar_origin if origin is None else np.asarray(origin, dtype=np.float64)
    az = 2.0 * np.pi * np.arange(azimuth_count) / azimuth_count
    el = np.deg2rad(np.linspace(elevation_range[0], elevation_range[1], elevation_rows))
    ee, aa = np.meshgrid(el, az, indexing="ij")
    dirs = np.stack([np.cos(ee) * np.cos(aa), np.cos(ee) * np.sin(aa), np.sin(ee)], axis=-1).reshape(-1, 3)
    if not scene.primitives:
        return np.zeros((0, 4))
    origins = np.broadcast_to(origin, dirs.shape)
    t_near, t_far, inside = clip_rays(origins, dirs, scene.bounds)
    t, hit = sphere_trace(scene, origins, dirs, np.where(inside, t_near, 0.0), np.where(inside, t_far, -1.0))
    pts = origins[hit] + t[hit, None] * dirs[hit]
    _, which = scene_sdf_batch(scene, pts)
    intensity = np.asarray([np.mean(scene.primitives[k].albedo) for k in which]).reshape(-1)
    return np.concatenate([pts, intensity[:, None]], axis=-1)


DEFAULT_BOUNDS = Aabb(np.array([-4.0, -4.0, 0.0]), np.array([4.0, 4.0, 2.0]))
GROUND_HEIGHT = 0.2


def gen_scene(
    seed: int,
    bounds: Aabb = DEFAULT_BOUNDS,
    n_views: int = 6,
    image_size: Sequence[int] = (64, 96),
    camera_height: float = 1.0,
    lidar_height: float = 1.4,
) -> SceneDef:
    """One random scene: a ground plane plus 1-5 spheres/boxes around the ego rig."""
    rng = np.random.default_rng(seed)
    lo = bounds.min + 0.1 * bounds.extent
    hi = bounds.max - 0.1 * bounds.extent
    ground_z = max(GROUND_HEIGHT, float(lo[2]))
    prims = [halfspace((0.0, 0.0, 1.0), ground_z, tuple(np.round(rng.uniform(0.3, 0.6, 3), 3)))]
    n_objects = int(rng.integers(1, 6))
    ego = np.array([0.0, 0.0, camera_height])
    attempts = 0
    while len(prims) < n_objects + 1 and attempts < 1000:
        attempts += 1
        kind = "sphere" if rng.uniform() < 0.5 else "box"
        size = float(rng.uniform(0.3, 0.7))
        xy = rng.uniform(lo[:2], hi[:2])
        z = float(np.clip(ground_z + size * rng.uniform(0.5, 1.0), lo[2], hi[2]))
        center = np.array([xy[0], xy[1], z])
        albedo = tuple(np.round(rng.uniform(0.2, 1.0, 3), 3))
        if kind == "sphere":
            prim = sphere(center, size, albedo)
        else:
            half = rng.uniform(0.5, 1.0, 3) * size
            prim = box(center, half, albedo)
        # keep the ego rig and lidar in free space
        clearance = min(prim.sdf(ego[None])[0], prim.sdf(np.array([[0.0, 0.0, lidar_height]]))[0])
        if clearance < 0.8:
            continue
        prims.append(prim)
    rig = ring_rig(n_views, image_size, height=camera_height)
    bg = (0.55, 0.7, 0.9)
    return SceneDef(tuple(prims), bg, bounds, rig, np.array([0.0, 0.0, lidar_height]), seed)


def gen_suite(seed: int, n_scenes: int, **kwargs) -> list:
    """Deterministic list of scenes; scene ``k`` is seeded by ``(seed, k)``."""
    return [gen_scene(int(np.random.SeedSequence([seed, k]).generate_state(1)[0]), **kwargs) for k in range(n_scenes)]


# ---------------------------------------------------------------------------
# scene files


def scene_to_dict(scene: SceneDef) -> dict:
    return {
        "format": SCENE_FORMAT,
        "version": SCENE_VERSION,
        "seed": int(scene.seed),
        "bounds": {"min": scene.bounds.min.tolist(), "max": scene.bounds.max.tolist()},
        "background_rgb": list(scene.background_rgb),
        "lidar_origin": scene.lidar_origin.tolist(),
        "rig": {
            "image_size": list(scene.rig.image_size),
            "views": [
                {"intrinsics": v.intrinsics.tolist(), "extrinsics_l2c": v.extrinsics_l2c.tolist()}
                for v in scene.rig.views
            ],
        },
        "primitives": [p.to_dict() for p in scene.primitives],
    }


def scene_from_dict(doc: dict) -> SceneDef:
    from .schemas import validate_scene_doc

    validate_scene_doc(doc)
    rig = CameraRig(
        tuple(CameraView(np.array(v["intrinsics"]), np.array(v["extrinsics_l2c"])) for v in doc["rig"]["views"]),
        tuple(doc["rig"]["image_size"]),
    )
    bounds = Aabb(np.array(doc["bounds"]["min"]), np.array(doc["bounds"]["max"]))
    prims = tuple(SdfPrimitive.from_dict(p) for p in doc["primitives"])
    return SceneDef(prims, tuple(doc["background_rgb"]), bounds, rig, np.array(doc["lidar_origin"]), int(doc["seed"]))


def save_scene(scene: SceneDef, path) -> None:
    Path(path).write_text(json.dumps(scene_to_dict(scene), indent=1) + "\n")


def load_scene(path) -> SceneDef:
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: not valid JSON ({exc})") from exc
    return scene_from_dict(doc)


@dataclass
class SceneData:
    """Oracle products for one scene, computed once and cached."""
    scene: SceneDef
    images: np.ndarray  # (S, H, W, 3)
    depths: np.ndarray  # (S, H, W), NaN where no surface
    lidar: np.ndarray  # (M, 4)
    depth_maps: list = field(default_factory=list)  # camera-z, per view
    ray_depth_maps: list = field(default_factory=list)  # distance along pixel ray


def prepare_scene(scene: SceneDef, tau: Optional[float] = None, azimuth_count: int = 360, elevation_rows: int = 32) -> SceneData:
    from .geometry import build_depth_map, depth_map_to_ray_distance

    S = scene.rig.view_count
    renders = [oracle_render_view(scene, v) for v in range(S)]
    images = np.stack([r[0] for r in renders])
    depths = np.stack([r[1] for r in renders])
    lidar = simulate_lidar(scene, azimuth_count=azimuth_count, elevation_rows=elevation_rows)
    tau = default_tau(scene.bounds) if tau is None else tau
    if len(lidar):
        dmaps = build_depth_map(lidar[:, :3], scene.rig, tau)
    else:
        dmaps = [{} for _ in range(S)]
    ray_maps = [depth_map_to_ray_distance(m, scene.rig, v) for v, m in enumerate(dmaps)]
    return SceneData(scene, images, depths, lidar, dmaps, ray_maps)


def default_tau(bounds: Aabb) -> float:
    return 0.9 * bounds.diagonal
