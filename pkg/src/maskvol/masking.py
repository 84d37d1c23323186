"""Block-wise masks for images and BEV point masking."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ShapeMismatch, ValidationError
from .voxelgrid import VoxelSpec, voxel_indices


@dataclass(frozen=True)
class BlockMask:
    grid: np.ndarray  # (h_b, w_b) bool, True = masked
    block_size: int
    ratio: float

    @property
    def achieved_ratio(self) -> float:
        return float(self.grid.mean()) if self.grid.size else 0.0


def masked_count(n_cells: int, ratio: float) -> int:
    # round half up; Python's round() is banker's rounding
    return int(np.floor(ratio * n_cells + 0.5))


def generate_block_mask(h_b: int, w_b: int, ratio: float, rng: np.random.Generator, block_size: int = 1) -> BlockMask:
    """Mask exactly ``round(ratio * h_b * w_b)`` cells chosen without replacement."""
    if not 0.0 <= ratio <= 1.0:
        raise ValidationError(f"mask ratio {ratio} outside [0, 1]")
    n = h_b * w_b
    flat = np.zeros(n, dtype=bool)
    flat[rng.permutation(n)[: masked_count(n, ratio)]] = True
    return BlockMask(flat.reshape(h_b, w_b), int(block_size), float(ratio))


def image_block_mask(height: int, width: int, block: int, ratio: float, rng: np.random.Generator) -> BlockMask:
    if height % block or width % block:
        raise ShapeMismatch(f"image {height}x{width} not divisible by block size {block}")
    return generate_block_mask(height // block, width // block, ratio, rng, block)


def bev_block_mask(spec: VoxelSpec, block: int, ratio: float, rng: np.random.Generator) -> BlockMask:
    X, Y, _ = spec.resolution
    if X % block or Y % block:
        raise ShapeMismatch(f"BEV grid {X}x{Y} not divisible by block size {block}")
    return generate_block_mask(X // block, Y // block, ratio, rng, block)


def upsample_mask(mask: BlockMask, factor: int | None = None) -> np.ndarray:
    """Nearest-neighbour expansion of every block to a ``factor x factor`` patch."""
    factor = mask.block_size if factor is None else int(factor)
    if factor < 1:
        raise ValidationError("upsampling factor must be >= 1")
    return np.kron(mask.grid, np.ones((factor, factor), dtype=bool)).astype(bool)


def mask_image(img: np.ndarray, pixel_mask: np.ndarray) -> np.ndarray:
    """Zero masked pixels of an ``(H, W[, C])`` image."""
    img = np.asarray(img)
    if img.shape[:2] != pixel_mask.shape:
        raise ShapeMismatch(f"image {img.shape[:2]} vs mask {pixel_mask.shape}")
    keep = ~pixel_mask
    return img * (keep[..., None] if img.ndim == 3 else keep)


def bev_cells(points, spec: VoxelSpec, block: int):
    """BEV block index ``(row, col)`` per point and an in-bounds flag."""
    idx, inside = voxel_indices(points, spec)
    return idx[:, 0] // block, idx[:, 1] // block, inside


def mask_points(points: np.ndarray, bev_mask: BlockMask, spec: VoxelSpec) -> np.ndarray:
    """Drop points whose (x, y) lies in a masked BEV block.

    ``points`` is ``(N, 3 + k)``; extra columns travel with their point.
    Points outside the XY extent are kept.
    """
    pts = np.asarray(points, dtype=np.float64)
    if len(pts) == 0:
        return pts.copy()
    bx, by, _ = bev_cells(pts[:, :3], spec, bev_mask.block_size)
    h_b, w_b = bev_mask.grid.shape
    xy_in = (bx >= 0) & (bx < h_b) & (by >= 0) & (by < w_b)
    hit = np.zeros(len(pts), dtype=bool)
    hit[xy_in] = bev_mask.grid[bx[xy_in], by[xy_in]]
    return pts[~hit]


def bev_voxel_mask(bev_mask: BlockMask, spec: VoxelSpec) -> np.ndarray:
    """``(X, Y)`` boolean grid of voxel columns covered by masked blocks."""
    return upsample_mask(bev_mask)[: spec.resolution[0], : spec.resolution[1]]
