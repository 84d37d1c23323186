"""Pinhole cameras, rigid transforms, rays and LiDAR-to-image projection.

Conventions
-----------
* The LiDAR frame is the world frame. Extrinsics map LiDAR -> camera.
* Camera frame is x right, y down, z forward.
* A continuous pixel coordinate ``(u, v)`` falls in array cell
  ``(floor(v), floor(u))``; pixel centres sit at integer + 0.5.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .errors import BehindCamera, EmptyCloud, OutOfImage, ValidationError


@dataclass(frozen=True)
class Aabb:
    min: np.ndarray
    max: np.ndarray

    def __post_init__(self):
        lo = np.asarray(self.min, dtype=np.float64).reshape(3)
        hi = np.asarray(self.max, dtype=np.float64).reshape(3)
        if not np.all(lo < hi):
            raise ValidationError(f"Aabb min {lo} must be < max {hi} componentwise")
        object.__setattr__(self, "min", lo)
        object.__setattr__(self, "max", hi)

    @property
    def extent(self) -> np.ndarray:
        return self.max - self.min

    @property
    def diagonal(self) -> float:
        return float(np.linalg.norm(self.extent))

    @property
    def center(self) -> np.ndarray:
        return 0.5 * (self.min + self.max)

    def contains(self, p, tol: float = 0.0) -> np.ndarray:
        p = np.asarray(p, dtype=np.float64)
        return np.all((p >= self.min - tol) & (p <= self.max + tol), axis=-1)


@dataclass(frozen=True)
class CameraView:
    intrinsics: np.ndarray  # 3x3, T_c2i
    extrinsics_l2c: np.ndarray  # 4x4, T_l2c

    def __post_init__(self):
        K = np.asarray(self.intrinsics, dtype=np.float64).reshape(3, 3)
        E = np.asarray(self.extrinsics_l2c, dtype=np.float64).reshape(4, 4)
        if not (K[0, 0] > 0 and K[1, 1] > 0):
            raise ValidationError("intrinsics need positive focal lengths")
        if K[0, 1] != 0 or np.any(K[2] != (0.0, 0.0, 1.0)) or K[1, 0] != 0:
            raise ValidationError("intrinsics must be zero-skew upper triangular with last row (0,0,1)")
        R = E[:3, :3]
        if np.max(np.abs(R @ R.T - np.eye(3))) > 1e-9 or np.linalg.det(R) < 0:
            raise ValidationError("extrinsics rotation block is not a proper rotation")
        if np.any(E[3] != (0.0, 0.0, 0.0, 1.0)):
            raise ValidationError("extrinsics last row must be (0,0,0,1)")
        object.__setattr__(self, "intrinsics", K)
        object.__setattr__(self, "extrinsics_l2c", E)

    @property
    def rotation(self) -> np.ndarray:
        return self.extrinsics_l2c[:3, :3]

    @property
    def translation(self) -> np.ndarray:
        return self.extrinsics_l2c[:3, 3]

    @property
    def center(self) -> np.ndarray:
        """Camera centre in the LiDAR frame."""
        return -self.rotation.T @ self.translation

    @property
    def forward(self) -> np.ndarray:
        """Optical axis in the LiDAR frame."""
        return self.rotation[2].copy()


@dataclass(frozen=True)
class CameraRig:
    views: tuple
    image_size: tuple  # (H, W)

    def __post_init__(self):
        views = tuple(v if isinstance(v, CameraView) else CameraView(**v) for v in self.views)
        if len(views) < 1:
            raise ValidationError("a rig needs at least one view")
        H, W = (int(x) for x in self.image_size)
        if H < 1 or W < 1:
            raise ValidationError("image size must be positive")
        object.__setattr__(self, "views", views)
        object.__setattr__(self, "image_size", (H, W))

    @property
    def view_count(self) -> int:
        return len(self.views)

    @property
    def height(self) -> int:
        return self.image_size[0]

    @property
    def width(self) -> int:
        return self.image_size[1]

    def view(self, index: int) -> CameraView:
        if not 0 <= index < len(self.views):
            raise ValidationError(f"view index {index} outside [0, {len(self.views)})")
        return self.views[index]


@dataclass(frozen=True)
class Ray:
    origin: np.ndarray
    direction: np.ndarray
    view_index: int = 0
    pixel: tuple = field(default=(0.0, 0.0))


def look_at_view(center, forward, up=(0.0, 0.0, 1.0), fx=60.0, fy=60.0, cx=48.0, cy=32.0) -> CameraView:
    """Build a camera at ``center`` looking along ``forward`` (image y points away from ``up``)."""
    f = np.asarray(forward, dtype=np.float64)
    f = f / np.linalg.norm(f)
    right = np.cross(f, np.asarray(up, dtype=np.float64))
    right /= np.linalg.norm(right)
    down = np.cross(f, right)
    R = np.stack([right, down, f])  # rows: camera axes in lidar frame
    E = np.eye(4)
    E[:3, :3] = R
    E[:3, 3] = -R @ np.asarray(center, dtype=np.float64)
    K = np.array([[fx, 0.0, cx], [0.0, fy, cy], [0.0, 0.0, 1.0]])
    return CameraView(K, E)


def in_image(pixels, rig: CameraRig) -> np.ndarray:
    pixels = np.asarray(pixels, dtype=np.float64)
    u, v = pixels[..., 0], pixels[..., 1]
    return (u >= 0) & (u < rig.width) & (v >= 0) & (v < rig.height)


def project_points(points, rig: CameraRig, view: int):
    """Vectorised projection of LiDAR-frame points.

    Returns ``(pixels (N,2), depth (N,), valid (N,))`` where ``valid`` means
    in front of the camera and inside the image. Pixels of points behind the
    camera are NaN.
    """
    cam = rig.view(view)
    p = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    pc = p @ cam.rotation.T + cam.translation
    depth = pc[:, 2]
    front = depth > 0
    K = cam.intrinsics
    with np.errstate(divide="ignore", invalid="ignore"):
        u = np.where(front, K[0, 0] * pc[:, 0] / depth + K[0, 2], np.nan)
        v = np.where(front, K[1, 1] * pc[:, 1] / depth + K[1, 2], np.nan)
    pixels = np.stack([u, v], axis=-1)
    valid = front & in_image(pixels, rig)
    return pixels, depth, valid


def project_point(p, rig: CameraRig, view: int):
    """Project one point; returns ``(pixel, depth, inside_image)``.

    Raises :class:`BehindCamera` when the camera-frame depth is <= 0.
    """
    pixels, depth, valid = project_points(np.asarray(p, dtype=np.float64)[None], rig, view)
    if not depth[0] > 0:
        raise BehindCamera(f"point {p} has camera depth {depth[0]}")
    return (float(pixels[0, 0]), float(pixels[0, 1])), float(depth[0]), bool(valid[0])


def pixel_directions(pixels, rig: CameraRig, view: int) -> np.ndarray:
    """Unit LiDAR-frame ray directions through continuous pixel coordinates."""
    cam = rig.view(view)
    px = np.asarray(pixels, dtype=np.float64).reshape(-1, 2)
    K = cam.intrinsics
    dc = np.stack(
        [(px[:, 0] - K[0, 2]) / K[0, 0], (px[:, 1] - K[1, 2]) / K[1, 1], np.ones(len(px))],
        axis=-1,
    )
    dirs = dc @ cam.rotation  # R^T applied row-wise
    return dirs / np.linalg.norm(dirs, axis=-1, keepdims=True)


def ray_from_pixel(rig: CameraRig, view: int, pixel) -> Ray:
    u, v = float(pixel[0]), float(pixel[1])
    if not in_image((u, v), rig):
        raise OutOfImage(f"pixel {(u, v)} outside {rig.width}x{rig.height} image")
    d = pixel_directions([(u, v)], rig, view)[0]
    return Ray(origin=rig.view(view).center, direction=d, view_index=view, pixel=(u, v))


def clip_rays(origins, directions, box: Aabb):
    """Slab-method clip for many rays; returns ``(t_near, t_far, hit)``."""
    o = np.asarray(origins, dtype=np.float64).reshape(-1, 3)
    d = np.asarray(directions, dtype=np.float64).reshape(-1, 3)
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / d
        t0 = (box.min - o) * inv
        t1 = (box.max - o) * inv
    lo = np.minimum(t0, t1)
    hi = np.maximum(t0, t1)
    # zero direction component: inside the slab -> unbounded, outside -> empty
    par = d == 0
    inside = (o >= box.min) & (o <= box.max)
    lo = np.where(par, np.where(inside, -np.inf, np.inf), lo)
    hi = np.where(par, np.where(inside, np.inf, -np.inf), hi)
    t_near = np.maximum(lo.max(axis=-1), 0.0)
    t_far = hi.min(axis=-1)
    hit = t_far > t_near
    return t_near, t_far, hit


def ray_aabb_clip(ray: Ray, box: Aabb) -> Optional[tuple]:
    t_near, t_far, hit = clip_rays(ray.origin, ray.direction, box)
    if not hit[0]:
        return None
    return float(t_near[0]), float(t_far[0])


def build_depth_map(points, rig: CameraRig, tau: float) -> list:
    """Z-buffered sparse depth maps, one ``{(col, row): depth}`` dict per view.

    Only points with camera depth strictly below ``tau`` are kept.
    """
    if tau <= 0:
        raise ValidationError("tau must be positive")
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if len(pts) == 0:
        raise EmptyCloud("cannot build a depth map from an empty cloud")
    maps = []
    for view in range(rig.view_count):
        pixels, depth, valid = project_points(pts, rig, view)
        keep = valid & (depth < tau)
        cols = np.floor(pixels[keep, 0]).astype(np.int64)
        rows = np.floor(pixels[keep, 1]).astype(np.int64)
        dm: dict = {}
        for c, r, z in zip(cols.tolist(), rows.tolist(), depth[keep].tolist()):
            key = (c, r)
            if key not in dm or z < dm[key]:
                dm[key] = z
        maps.append(dm)
    return maps


def depth_map_to_ray_distance(depth_map: dict, rig: CameraRig, view: int) -> dict:
    """Convert camera-z depths to distances along the pixel-centre ray."""
    if not depth_map:
        return {}
    keys = list(depth_map)
    px = np.array(keys, dtype=np.float64) + 0.5
    dirs = pixel_directions(px, rig, view)
    cos = dirs @ rig.view(view).forward
    return {k: depth_map[k] / c for k, c in zip(keys, cos.tolist())}


def ring_rig(
    n_views: int = 6,
    image_size: Sequence[int] = (64, 96),
    height: float = 1.0,
    radius: float = 0.1,
    focal: Optional[float] = None,
) -> CameraRig:
    """Surround-view rig: ``n_views`` cameras facing outward on a horizontal ring.

    The default focal length (0.625 x width) gives a ~77 degree horizontal field of view.
    """
    H, W = image_size
    focal = 0.625 * W if focal is None else focal
    views = []
    for k in range(n_views):
        yaw = 2.0 * np.pi * k / n_views
        fwd = np.array([np.cos(yaw), np.sin(yaw), 0.0])
        center = np.array([radius * fwd[0], radius * fwd[1], height])
        views.append(look_at_view(center, fwd, fx=focal, fy=focal, cx=W / 2.0, cy=H / 2.0))
    return CameraRig(tuple(views), (H, W))
