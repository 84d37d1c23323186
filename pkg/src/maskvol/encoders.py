"""Small modality encoders that never read masked input.

Both encoders zero masked inputs before every convolution and re-zero masked
outputs afterwards, so visible outputs are independent of masked content.
"""
from __future__ import annotations

from typing import Optional

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ShapeMismatch
from .voxelgrid import FeatureVolume, ImageFeatureMap, VoxelSpec, conv3d_same, voxelize_points


class ImageEncoder(nn.Module):
    """Two 3x3 convolutions (3 -> C -> C) with a rectifier in between."""

    def __init__(self, channels: int = 16):
        super().__init__()
        self.channels = channels
        self.conv1 = nn.Conv2d(3, channels, 3, padding=1, dtype=torch.float64)
        self.conv2 = nn.Conv2d(channels, channels, 3, padding=1, dtype=torch.float64)


class PointEncoder(nn.Module):
    """Per-point embed of (intensity, height), voxel mean, then a bias-free 3x3x3 conv."""

    def __init__(self, channels: int = 16):
        super().__init__()
        self.channels = channels
        self.embed = nn.Linear(2, channels, dtype=torch.float64)
        self.conv = nn.Parameter(torch.empty(channels, channels, 3, 3, 3, dtype=torch.float64))
        nn.init.kaiming_uniform_(self.conv, a=5 ** 0.5)


def encode_image_sparse(images, pixel_mask, encoder: ImageEncoder) -> ImageFeatureMap:
    """Encode ``(S, H, W, 3)`` images under an ``(S, H, W)`` mask (True = masked)."""
    img = torch.as_tensor(images, dtype=torch.float64)
    if img.dim() == 3:
        img = img.unsqueeze(0)
    m = torch.as_tensor(np.asarray(pixel_mask), dtype=torch.bool)
    if m.dim() == 2:
        m = m.unsqueeze(0)
    if img.shape[:3] != m.shape or img.shape[-1] != 3:
        raise ShapeMismatch(f"images {tuple(img.shape)} vs mask {tuple(m.shape)}")
    keep = (~m).to(img.dtype).unsqueeze(1)  # (S, 1, H, W)
    x = img.permute(0, 3, 1, 2) * keep
    x = encoder.conv1(x) * keep
    x = F.relu(x)
    x = encoder.conv2(x) * keep
    return ImageFeatureMap(x.permute(0, 2, 3, 1), stride=1)


def embed_points(points, encoder: PointEncoder) -> torch.Tensor:
    """``(N, 4)`` rows ``x, y, z, intensity`` -> ``(N, C)`` embeddings."""
    pts = torch.as_tensor(np.asarray(points, dtype=np.float64).reshape(-1, 4))
    return encoder.embed(torch.stack([pts[:, 3], pts[:, 2]], dim=-1))


def encode_points(
    visible_points,
    spec: VoxelSpec,
    encoder: PointEncoder,
    masked_columns: Optional[np.ndarray] = None,
) -> FeatureVolume:
    """Embed, voxelize and convolve visible points.

    ``masked_columns`` is an ``(X, Y)`` boolean grid of BEV columns to zero
    after the convolution.
    """
    pts = np.asarray(visible_points, dtype=np.float64).reshape(-1, 4)
    out_spec = spec.with_features(encoder.channels)
    if len(pts) == 0:
        return FeatureVolume.zeros(out_spec)
    grid = voxelize_points(pts[:, :3], embed_points(pts, encoder), out_spec)
    data = conv3d_same(grid.data, encoder.conv)
    if masked_columns is not None:
        keep = torch.as_tensor(~np.asarray(masked_columns, dtype=bool)).to(data.dtype)
        data = data * keep[:, :, None, None]
    return FeatureVolume(out_spec, data)
