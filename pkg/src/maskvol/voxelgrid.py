"""Dense voxel feature volumes and the samplers that read and write them.

Voxel features live at voxel centres: voxel ``(i, j, k)`` sits at
``bounds.min + (index + 0.5) * voxel_size``. Between the outermost centres
and the volume faces the field is extended as a constant.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
import torch
import torch.nn.functional as F

from .errors import OutOfBounds, OutOfImage, ShapeMismatch, ValidationError
from .geometry import Aabb, CameraRig, project_points

BOUNDS_TOL = 1e-9


@dataclass(frozen=True)
class VoxelSpec:
    resolution: tuple
    bounds: Aabb
    feature_dim: int

    def __post_init__(self):
        res = tuple(int(r) for r in self.resolution)
        if len(res) != 3 or min(res) < 2:
            raise ValidationError(f"resolution must be three counts >= 2, got {res}")
        if int(self.feature_dim) < 1:
            raise ValidationError("feature_dim must be >= 1")
        object.__setattr__(self, "resolution", res)
        object.__setattr__(self, "feature_dim", int(self.feature_dim))

    @property
    def voxel_size(self) -> np.ndarray:
        return self.bounds.extent / np.asarray(self.resolution, dtype=np.float64)

    def centers(self) -> np.ndarray:
        """Voxel-centre coordinates, shape ``(X, Y, Z, 3)``."""
        axes = [
            self.bounds.min[a] + (np.arange(n) + 0.5) * self.voxel_size[a]
            for a, n in enumerate(self.resolution)
        ]
        return np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)

    def with_features(self, feature_dim: int) -> "VoxelSpec":
        return VoxelSpec(self.resolution, self.bounds, feature_dim)


@dataclass
class FeatureVolume:
    spec: VoxelSpec
    data: torch.Tensor  # (X, Y, Z, C)

    def __post_init__(self):
        expected = (*self.spec.resolution, self.spec.feature_dim)
        if tuple(self.data.shape) != expected:
            raise ShapeMismatch(f"volume data {tuple(self.data.shape)} != {expected}")

    @classmethod
    def zeros(cls, spec: VoxelSpec, dtype=torch.float64) -> "FeatureVolume":
        return cls(spec, torch.zeros(*spec.resolution, spec.feature_dim, dtype=dtype))

    @classmethod
    def from_function(cls, spec: VoxelSpec, fn) -> "FeatureVolume":
        """Fill voxel centres with ``fn(centers (X,Y,Z,3)) -> (X,Y,Z,C)``."""
        vals = np.asarray(fn(spec.centers()), dtype=np.float64)
        return cls(spec, torch.from_numpy(vals.reshape(*spec.resolution, spec.feature_dim)))


@dataclass
class ImageFeatureMap:
    data: torch.Tensor  # (S, H_f, W_f, C_f)
    stride: int = 1

    @property
    def shape(self):
        return tuple(self.data.shape)


def _as_points(p) -> tuple[torch.Tensor, bool]:
    t = torch.as_tensor(p, dtype=torch.float64)
    single = t.dim() == 1
    return t.reshape(-1, 3), single


def _cell_coords(spec: VoxelSpec, p: torch.Tensor):
    """Lower corner indices, fractional offsets and clamp masks for each point."""
    lo = torch.as_tensor(spec.bounds.min, dtype=p.dtype)
    hi = torch.as_tensor(spec.bounds.max, dtype=p.dtype)
    outside = ((p < lo - BOUNDS_TOL) | (p > hi + BOUNDS_TOL)).any(dim=-1)
    if bool(outside.any()):
        bad = p[outside][0].tolist()
        raise OutOfBounds(f"sample point {bad} outside volume bounds")
    size = torch.as_tensor(spec.voxel_size, dtype=p.dtype)
    res = torch.as_tensor(spec.resolution, dtype=p.dtype)
    g = (p - lo) / size - 0.5
    # voxel centres can land an ulp off the integer grid; snap so they sample exactly
    snapped = torch.round(g)
    g = torch.where((g - snapped).abs() < 1e-12, g + (snapped - g).detach(), g)
    # interior where the continuous index is between the first and last centre
    free = (g > 0) & (g < res - 1)
    g = torch.minimum(torch.clamp(g, min=0.0), res - 1)
    i0 = torch.minimum(torch.floor(g), res - 2).long()
    frac = g - i0.to(p.dtype)
    return i0, frac, free, size


def _corner_values(data: torch.Tensor, i0: torch.Tensor) -> list:
    x, y, z = i0.unbind(-1)
    return [data[x + a, y + b, z + c] for a in (0, 1) for b in (0, 1) for c in (0, 1)]


def trilinear_sample(vol: FeatureVolume, p) -> torch.Tensor:
    """Trilinear blend of the 8 surrounding voxel-centre features.

    ``p`` may be a single 3-vector or an ``(N, 3)`` batch; the result is
    ``(C,)`` or ``(N, C)`` accordingly. Differentiable w.r.t. ``vol.data``
    and ``p``.
    """
    pts, single = _as_points(p)
    i0, frac, _, _ = _cell_coords(vol.spec, pts)
    corners = _corner_values(vol.data, i0)
    fx, fy, fz = (frac[:, a:a + 1] for a in range(3))
    wx = (1 - fx, fx)
    wy = (1 - fy, fy)
    wz = (1 - fz, fz)
    out = 0
    n = 0
    for a in (0, 1):
        for b in (0, 1):
            for c in (0, 1):
                out = out + corners[n] * (wx[a] * wy[b] * wz[c])
                n += 1
    return out[0] if single else out


def trilinear_sample_grad(vol: FeatureVolume, p):
    """Value and analytic Jacobian ``d feature / d p`` of shape ``(..., C, 3)``.

    The value is differentiable; the Jacobian carries no graph.
    """
    pts, single = _as_points(p)
    i0, frac, free, size = _cell_coords(vol.spec, pts)
    corners = _corner_values(vol.data, i0)
    f = [frac[:, a:a + 1] for a in range(3)]
    w = [(1 - fa, fa) for fa in f]
    dw = [(-torch.ones_like(fa), torch.ones_like(fa)) for fa in f]
    value = 0
    n = 0
    for a in (0, 1):
        for b in (0, 1):
            for c in (0, 1):
                value = value + corners[n] * (w[0][a] * w[1][b] * w[2][c])
                n += 1
    # the Jacobian is a constant for callers (normals are detached), so skip the graph
    grads = [0, 0, 0]
    with torch.no_grad():
        n = 0
        for a in (0, 1):
            for b in (0, 1):
                for c in (0, 1):
                    idx = (a, b, c)
                    for axis in range(3):
                        term = 1
                        for k in range(3):
                            term = term * (dw[k][idx[k]] if k == axis else w[k][idx[k]])
                        grads[axis] = grads[axis] + corners[n] * term
                    n += 1
    # d g / d p = 1 / voxel size inside, 0 in the clamped border band
    scale = free.to(pts.dtype) / size
    with torch.no_grad():
        jac = torch.stack([grads[a] * scale[:, a:a + 1] for a in range(3)], dim=-1)
    if single:
        return value[0], jac[0]
    return value, jac


def bilinear_sample(fmap: ImageFeatureMap, view: int, uv) -> torch.Tensor:
    """Bilinear lookup with the pixel-centre convention.

    ``uv`` is in input-image pixels; it is divided by ``fmap.stride``.
    """
    data = fmap.data[view]
    Hf, Wf = data.shape[0], data.shape[1]
    t = torch.as_tensor(uv, dtype=torch.float64)
    single = t.dim() == 1
    t = t.reshape(-1, 2) / fmap.stride
    u, v = t[:, 0], t[:, 1]
    if bool(((u < 0) | (u > Wf) | (v < 0) | (v > Hf)).any()):
        raise OutOfImage("bilinear sample outside the feature map")
    out = _bilinear(data, u, v)
    return out[0] if single else out


def _bilinear(data: torch.Tensor, u: torch.Tensor, v: torch.Tensor) -> torch.Tensor:
    Hf, Wf = data.shape[0], data.shape[1]
    x = torch.clamp(u - 0.5, 0.0, Wf - 1.0)
    y = torch.clamp(v - 0.5, 0.0, Hf - 1.0)
    x0 = torch.clamp(torch.floor(x), max=max(Wf - 2, 0)).long()
    y0 = torch.clamp(torch.floor(y), max=max(Hf - 2, 0)).long()
    x1 = torch.clamp(x0 + 1, max=Wf - 1)
    y1 = torch.clamp(y0 + 1, max=Hf - 1)
    fx = (x - x0.to(x.dtype)).unsqueeze(-1)
    fy = (y - y0.to(y.dtype)).unsqueeze(-1)
    return (
        data[y0, x0] * (1 - fx) * (1 - fy)
        + data[y0, x1] * fx * (1 - fy)
        + data[y1, x0] * (1 - fx) * fy
        + data[y1, x1] * fx * fy
    )


@dataclass(frozen=True)
class DepthBins:
    d_min: float
    d_max: float
    count: int

    @classmethod
    def for_bounds(cls, bounds: Aabb, count: int = 32) -> "DepthBins":
        return cls(0.5, 1.5 * bounds.diagonal, count)

    @property
    def centers(self) -> np.ndarray:
        return np.linspace(self.d_min, self.d_max, self.count)


def depth_distribution(fmap: ImageFeatureMap, weight: torch.Tensor, bias: torch.Tensor) -> torch.Tensor:
    """Per-pixel softmax over depth bins from a 1x1 convolution, ``(S, H, W, D_b)``."""
    return torch.softmax(fmap.data @ weight.T + bias, dim=-1)


@dataclass
class LiftPlan:
    """Cached projection of every voxel centre into every view."""
    uv: list  # per view (V, 2) tensors
    bin_coord: list  # per view (V,) tensors
    valid: list  # per view (V,) bool tensors
    count: torch.Tensor  # (V,) number of views that see each voxel


def plan_lift(rig: CameraRig, spec: VoxelSpec, bins: DepthBins, stride: int = 1) -> LiftPlan:
    centers = spec.centers().reshape(-1, 3)
    uv_l, bc_l, val_l = [], [], []
    count = np.zeros(len(centers))
    spacing = (bins.d_max - bins.d_min) / (bins.count - 1)
    for view in range(rig.view_count):
        pixels, depth, valid = project_points(centers, rig, view)
        bc = (depth - bins.d_min) / spacing
        valid = valid & (bc >= 0) & (bc <= bins.count - 1)
        pixels = np.where(valid[:, None], pixels, 0.5) / stride
        uv_l.append(torch.from_numpy(pixels))
        bc_l.append(torch.from_numpy(np.where(valid, bc, 0.0)))
        val_l.append(torch.from_numpy(valid))
        count += valid
    return LiftPlan(uv_l, bc_l, val_l, torch.from_numpy(count))


def lift_image_features(
    fmap: ImageFeatureMap,
    rig: CameraRig,
    spec: VoxelSpec,
    distribution: torch.Tensor,
    bins: DepthBins,
    plan: Optional[LiftPlan] = None,
) -> FeatureVolume:
    """Lift per-view image features into the voxel volume.

    Each voxel centre gathers the bilinear image feature at its projection,
    scaled by the depth distribution trilinearly sampled at (u, v, camera
    depth). Views that see the voxel are averaged; unseen voxels stay zero.
    """
    S, _, _, C = fmap.data.shape
    if S != rig.view_count:
        raise ShapeMismatch(f"{S} feature maps for {rig.view_count} views")
    if plan is None:
        plan = plan_lift(rig, spec, bins, fmap.stride)
    total = 0
    for view in range(S):
        uv = plan.uv[view]
        u, v = uv[:, 0], uv[:, 1]
        feat = _bilinear(fmap.data[view], u, v)
        probs = _bilinear(distribution[view], u, v)  # (V, D_b)
        bc = plan.bin_coord[view]
        b0 = torch.clamp(torch.floor(bc), max=bins.count - 2).long()
        fb = (bc - b0.to(bc.dtype)).unsqueeze(-1)
        scale = torch.gather(probs, 1, b0[:, None]) * (1 - fb) + torch.gather(probs, 1, b0[:, None] + 1) * fb
        total = total + feat * scale * plan.valid[view].to(feat.dtype)[:, None]
    mean = total / torch.clamp(plan.count, min=1.0)[:, None]
    return FeatureVolume(spec.with_features(C), mean.reshape(*spec.resolution, C))


def voxel_indices(points, spec: VoxelSpec):
    """Integer voxel index per point and an in-bounds mask."""
    p = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    idx = np.floor((p - spec.bounds.min) / spec.voxel_size).astype(np.int64)
    res = np.asarray(spec.resolution)
    # points exactly on the max face belong to the last voxel
    on_max = np.isclose(p, spec.bounds.max, rtol=0.0, atol=BOUNDS_TOL)
    idx = np.where(on_max & (idx == res), res - 1, idx)
    inside = np.all((idx >= 0) & (idx < res), axis=-1)
    return idx, inside


def voxelize_points(points, features: torch.Tensor, spec: VoxelSpec) -> FeatureVolume:
    """Mean of point features per occupied voxel; empty voxels are zero.

    Points are summed in a canonical order (voxel, then coordinates) so the
    result is bitwise independent of input order. Out-of-bounds points are
    ignored.
    """
    p = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    C = features.shape[-1] if features.dim() == 2 else spec.feature_dim
    out_spec = spec.with_features(C)
    X, Y, Z = spec.resolution
    if len(p) == 0:
        return FeatureVolume.zeros(out_spec, dtype=features.dtype)
    if features.shape[0] != len(p):
        raise ShapeMismatch("one feature row per point required")
    idx, inside = voxel_indices(p, spec)
    flat = (idx[:, 0] * Y + idx[:, 1]) * Z + idx[:, 2]
    keep = np.nonzero(inside)[0]
    feat_np = features.detach().cpu().numpy()
    order_keys = [feat_np[keep, c] for c in reversed(range(C))]
    order_keys += [p[keep, 2], p[keep, 1], p[keep, 0], flat[keep]]
    order = keep[np.lexsort(order_keys)]
    target = torch.from_numpy(flat[order])
    sums = torch.zeros(X * Y * Z, C, dtype=features.dtype)
    sums = sums.index_add(0, target, features[torch.from_numpy(order)])
    counts = torch.zeros(X * Y * Z, dtype=features.dtype)
    counts = counts.index_add(0, target, torch.ones(len(order), dtype=features.dtype))
    mean = sums / torch.clamp(counts, min=1.0)[:, None]
    return FeatureVolume(out_spec, mean.reshape(X, Y, Z, C))


def occupancy(points, spec: VoxelSpec) -> torch.Tensor:
    """Boolean ``(X, Y, Z)`` grid of voxels holding at least one point."""
    occ = np.zeros(spec.resolution, dtype=bool)
    p = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if len(p):
        idx, inside = voxel_indices(p, spec)
        occ[tuple(idx[inside].T)] = True
    return torch.from_numpy(occ)


def conv3d_same(data: torch.Tensor, weight: torch.Tensor, bias: Optional[torch.Tensor] = None) -> torch.Tensor:
    """3x3x3 zero-padded convolution on a channels-last ``(X, Y, Z, C)`` grid.

    ``weight`` has shape ``(C_out, C_in, 3, 3, 3)``.
    """
    if data.dim() != 4 or weight.dim() != 5 or weight.shape[1] != data.shape[-1]:
        raise ShapeMismatch(f"cannot convolve {tuple(data.shape)} with kernel {tuple(weight.shape)}")
    x = data.permute(3, 0, 1, 2).unsqueeze(0)
    y = F.conv3d(x, weight, bias, padding=weight.shape[-1] // 2)
    return y[0].permute(1, 2, 3, 0)


def projection_layer(vol: FeatureVolume, weight: torch.Tensor, bias: torch.Tensor) -> FeatureVolume:
    """One 3x3x3 convolution mapping the volume to ``weight.shape[0]`` channels."""
    out = conv3d_same(vol.data, weight, bias)
    return FeatureVolume(vol.spec.with_features(out.shape[-1]), out)
