"""The full pre-training network: encoders -> voxel volume -> projection -> decoders."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
import torch
import torch.nn as nn

from .config import ModelConfig
from .encoders import ImageEncoder, PointEncoder, encode_image_sparse, encode_points
from .geometry import Aabb, CameraRig
from .renderer import RenderOutput, RgbDecoder, SdfDecoder, Sharpness, render_rays
from .voxelgrid import (
    DepthBins,
    FeatureVolume,
    ImageFeatureMap,
    VoxelSpec,
    depth_distribution,
    lift_image_features,
    plan_lift,
    projection_layer,
)


@dataclass
class FrameInputs:
    """Everything the encoders see for one frame."""
    rig: CameraRig
    images: Optional[np.ndarray] = None  # (S, H, W, 3), unmasked
    pixel_mask: Optional[np.ndarray] = None  # (S, H, W), True = masked
    points: Optional[np.ndarray] = None  # (N, 4) visible points
    masked_columns: Optional[np.ndarray] = None  # (X, Y) masked BEV columns


class Pipeline(nn.Module):
    def __init__(self, cfg: ModelConfig, modality: str, bounds: Aabb):
        super().__init__()
        self.cfg = cfg
        self.modality = modality
        self.bounds = bounds
        C = cfg.feature_dim
        self.spec = VoxelSpec(cfg.voxel_resolution, bounds, C)
        self.bins = DepthBins.for_bounds(bounds, cfg.depth_bins)
        c_in = 0
        if modality in ("camera", "fused"):
            self.image_encoder = ImageEncoder(C)
            self.depth_head = nn.Linear(C, cfg.depth_bins, dtype=torch.float64)
            c_in += C
        if modality in ("lidar", "fused"):
            self.point_encoder = PointEncoder(C)
            c_in += C
        proj = nn.Conv3d(c_in, cfg.proj_dim, 3, padding=1, dtype=torch.float64)
        self.proj_weight = nn.Parameter(proj.weight.detach().clone())
        self.proj_bias = nn.Parameter(proj.bias.detach().clone())
        self.sdf_decoder = SdfDecoder(cfg.proj_dim, cfg.width, cfg.sdf_layers)
        self.rgb_decoder = RgbDecoder(cfg.proj_dim, cfg.width, cfg.rgb_layers)
        self.sharpness = Sharpness(cfg.init_sharpness)
        self._plans: dict = {}

    @property
    def uses_images(self) -> bool:
        return self.modality in ("camera", "fused")

    @property
    def uses_points(self) -> bool:
        return self.modality in ("lidar", "fused")

    def _plan(self, rig: CameraRig, stride: int):
        key = (stride, rig.image_size, b"".join(v.extrinsics_l2c.tobytes() + v.intrinsics.tobytes() for v in rig.views))
        if key not in self._plans:
            self._plans[key] = plan_lift(rig, self.spec, self.bins, stride)
        return self._plans[key]

    def image_volume(self, frame: FrameInputs) -> FeatureVolume:
        fmap = encode_image_sparse(frame.images, frame.pixel_mask, self.image_encoder)
        return self.lift(fmap, frame.rig)

    def lift(self, fmap: ImageFeatureMap, rig: CameraRig) -> FeatureVolume:
        dist = depth_distribution(fmap, self.depth_head.weight, self.depth_head.bias)
        return lift_image_features(fmap, rig, self.spec, dist, self.bins, self._plan(rig, fmap.stride))

    def point_volume(self, frame: FrameInputs) -> FeatureVolume:
        pts = frame.points if frame.points is not None else np.zeros((0, 4))
        return encode_points(pts, self.spec, self.point_encoder, frame.masked_columns)

    def raw_volume(self, frame: FrameInputs) -> FeatureVolume:
        parts = []
        if self.uses_images:
            parts.append(self.image_volume(frame).data)
        if self.uses_points:
            parts.append(self.point_volume(frame).data)
        data = torch.cat(parts, dim=-1)
        return FeatureVolume(self.spec.with_features(data.shape[-1]), data)

    def build_volume(self, frame: FrameInputs) -> FeatureVolume:
        return projection_layer(self.raw_volume(frame), self.proj_weight, self.proj_bias)

    def render(self, vol: FeatureVolume, origins, directions, t, normals_override=None) -> RenderOutput:
        return render_rays(origins, directions, t, vol, self.sdf_decoder, self.rgb_decoder, self.sharpness, normals_override)

    def meta(self) -> dict:
        """Scalars that let a checkpoint rebuild this architecture."""
        c = self.cfg
        return {
            "meta.modality": float(("camera", "lidar", "fused").index(self.modality)),
            "meta.voxel_resolution": np.asarray(c.voxel_resolution, dtype=np.float64),
            "meta.feature_dim": float(c.feature_dim),
            "meta.depth_bins": float(c.depth_bins),
            "meta.proj_dim": float(c.proj_dim),
            "meta.width": float(c.width),
            "meta.sdf_layers": float(c.sdf_layers),
            "meta.rgb_layers": float(c.rgb_layers),
            "meta.bounds": np.concatenate([self.bounds.min, self.bounds.max]),
        }


def pipeline_from_meta(meta: dict) -> Pipeline:
    res = tuple(int(x) for x in np.asarray(meta["meta.voxel_resolution"]).ravel())
    cfg = ModelConfig(
        voxel_resolution=res,
        feature_dim=int(meta["meta.feature_dim"]),
        depth_bins=int(meta["meta.depth_bins"]),
        proj_dim=int(meta["meta.proj_dim"]),
        width=int(meta["meta.width"]),
        sdf_layers=int(meta["meta.sdf_layers"]),
        rgb_layers=int(meta["meta.rgb_layers"]),
    )
    b = np.asarray(meta["meta.bounds"]).ravel()
    modality = ("camera", "lidar", "fused")[int(meta["meta.modality"])]
    return Pipeline(cfg, modality, Aabb(b[:3], b[3:]))
