"""Ray selection (dilation / random / depth-aware) and depth samples along rays.

Pixel lists are ``(M, 3)`` float arrays of ``(view, u, v)`` with ``u, v`` at
pixel centres. Depth-aware sampling also returns a per-ray target depth that
is NaN for rays drawn by the random fallback.
"""
from __future__ import annotations

import numpy as np

from .errors import BudgetTooLarge, DegenerateInterval, ValidationError
from .geometry import CameraRig


def view_rng(seed: int, step: int, view: int) -> np.random.Generator:
    """Independent stream per (seed, step, view)."""
    return np.random.default_rng([int(seed), int(step), int(view)])


def _pixels(view: int, cols, rows) -> np.ndarray:
    cols = np.asarray(cols, dtype=np.float64)
    return np.stack([np.full(len(cols), float(view)), cols + 0.5, np.asarray(rows, dtype=np.float64) + 0.5], axis=-1)


def sample_dilation(rig: CameraRig, interval: int, views=None) -> np.ndarray:
    """Every ``interval``-th pixel in both axes, starting at the top-left centre."""
    if interval < 1:
        raise ValidationError("interval must be >= 1")
    H, W = rig.image_size
    views = range(rig.view_count) if views is None else views
    # an interval wider than the image keeps the first pixel on that axis
    rows = np.arange(max(1, H // interval)) * interval
    cols = np.arange(max(1, W // interval)) * interval
    rr, cc = np.meshgrid(rows, cols, indexing="ij")
    return np.concatenate([_pixels(v, cc.ravel(), rr.ravel()) for v in views]) if len(views) else np.zeros((0, 3))


def _random_view(rig: CameraRig, view: int, k: int, rng: np.random.Generator, exclude=None) -> np.ndarray:
    H, W = rig.image_size
    pool = np.arange(H * W)
    if exclude is not None and len(exclude):
        pool = np.setdiff1d(pool, exclude)
    if k > len(pool):
        raise BudgetTooLarge(f"{k} rays requested from {len(pool)} pixels")
    chosen = rng.choice(pool, size=k, replace=False)
    return _pixels(view, chosen % W, chosen // W)


def sample_random(rig: CameraRig, k: int, rng, views=None) -> np.ndarray:
    """``k`` distinct pixels per view, uniform without replacement.

    ``rng`` is a generator shared by all views, or a callable ``view -> generator``.
    """
    if k > rig.height * rig.width:
        raise BudgetTooLarge(f"K={k} exceeds {rig.height * rig.width} pixels per view")
    views = range(rig.view_count) if views is None else views
    out = [_random_view(rig, v, k, rng(v) if callable(rng) else rng) for v in views]
    return np.concatenate(out) if out else np.zeros((0, 3))


def sample_depth_aware(rig: CameraRig, depth_maps: list, k: int, rng, views=None):
    """Draw from each view's depth-map pixels; top up with random pixels if too few.

    Returns ``(pixels (M, 3), depth (M,))``; fallback rays carry NaN depth.
    """
    if k > rig.height * rig.width:
        raise BudgetTooLarge(f"K={k} exceeds {rig.height * rig.width} pixels per view")
    views = range(rig.view_count) if views is None else views
    W = rig.width
    px_out, d_out = [], []
    for v in views:
        g = rng(v) if callable(rng) else rng
        dm = depth_maps[v]
        keys = sorted(dm)
        flat = np.array([r * W + c for c, r in keys], dtype=np.int64)
        depth = np.array([dm[key] for key in keys], dtype=np.float64)
        if len(keys) >= k:
            pick = g.choice(len(keys), size=k, replace=False)
            px_out.append(_pixels(v, flat[pick] % W, flat[pick] // W))
            d_out.append(depth[pick])
        else:
            px_out.append(_pixels(v, flat % W, flat // W))
            d_out.append(depth)
            fill = _random_view(rig, v, k - len(keys), g, exclude=flat)
            px_out.append(fill)
            d_out.append(np.full(len(fill), np.nan))
    if not px_out:
        return np.zeros((0, 3)), np.zeros(0)
    return np.concatenate(px_out), np.concatenate(d_out)


def sample_ray_points(t_near, t_far, d: int, rng=None, stratified: bool = True) -> np.ndarray:
    """``d`` sorted depths per ray: one uniform draw per bin, or bin midpoints.

    Scalars give a ``(d,)`` vector, arrays of ``N`` intervals an ``(N, d)`` array.
    """
    t0 = np.asarray(t_near, dtype=np.float64)
    t1 = np.asarray(t_far, dtype=np.float64)
    scalar = t0.ndim == 0
    t0, t1 = np.atleast_1d(t0), np.atleast_1d(t1)
    if d < 1:
        raise ValidationError("need at least one sample per ray")
    if not np.all(t1 > t0):
        raise DegenerateInterval("t_far must exceed t_near")
    width = (t1 - t0) / d
    if stratified:
        if rng is None:
            raise ValidationError("stratified sampling needs an rng")
        # offsets kept inside (0, 1) so bins never share an endpoint
        u = np.clip(rng.uniform(size=(len(t0), d)), 1e-9, 1 - 1e-9)
    else:
        u = np.full((len(t0), d), 0.5)
    t = t0[:, None] + (np.arange(d)[None, :] + u) * width[:, None]
    return t[0] if scalar else t
