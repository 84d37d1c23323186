"""SDF/colour decoders and unbiased, occlusion-aware volume rendering."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import DegenerateRay, ShapeMismatch
from .voxelgrid import FeatureVolume, trilinear_sample, trilinear_sample_grad

SOFTPLUS_BETA = 100.0
GEO_FEATURE_DIM = 15
NORMAL_EPS = 1e-8
# keeps 1 - alpha > 0 once sigmoid ratios underflow
ALPHA_MAX = 1.0 - 1e-12


class Mlp(nn.Module):
    """Affine layers with softplus(beta=100) between them."""

    def __init__(self, dims: Sequence[int], out_activation: Optional[str] = None):
        super().__init__()
        self.dims = tuple(int(d) for d in dims)
        self.layers = nn.ModuleList(nn.Linear(a, b, dtype=torch.float64) for a, b in zip(self.dims[:-1], self.dims[1:]))
        self.out_activation = out_activation

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return mlp_forward(self, x)


def mlp_forward(mlp: Mlp, x: torch.Tensor) -> torch.Tensor:
    if x.shape[-1] != mlp.dims[0]:
        raise ShapeMismatch(f"MLP expects {mlp.dims[0]} inputs, got {x.shape[-1]}")
    last = len(mlp.layers) - 1
    for i, layer in enumerate(mlp.layers):
        x = layer(x)
        if i < last:
            # threshold 50: the linear branch is then exact to f64 precision
            x = F.softplus(x, beta=SOFTPLUS_BETA, threshold=50.0)
    if mlp.out_activation == "sigmoid":
        x = torch.sigmoid(x)
    return x


class SdfDecoder(Mlp):
    def __init__(self, feature_dim: int, width: int = 32, layers: int = 6, geo_dim: int = GEO_FEATURE_DIM):
        super().__init__([3 + feature_dim] + [width] * (layers - 1) + [1 + geo_dim])
        self.feature_dim = feature_dim
        self.geo_dim = geo_dim


class RgbDecoder(Mlp):
    def __init__(self, feature_dim: int, width: int = 32, layers: int = 4, geo_dim: int = GEO_FEATURE_DIM):
        super().__init__([3 + feature_dim + 3 + 3 + geo_dim] + [width] * (layers - 1) + [3], out_activation="sigmoid")
        self.feature_dim = feature_dim


class Sharpness(nn.Module):
    """Learnable inverse bandwidth, ``s = exp(raw) > 0``."""

    def __init__(self, initial: float = 10.0):
        super().__init__()
        self.raw = nn.Parameter(torch.tensor(math.log(initial), dtype=torch.float64))

    @property
    def value(self) -> torch.Tensor:
        return torch.exp(self.raw)


@dataclass
class SdfOutput:
    sdf: torch.Tensor
    geo_feature: torch.Tensor


def sdf_decode(decoder: SdfDecoder, p: torch.Tensor, f: torch.Tensor) -> SdfOutput:
    out = decoder(torch.cat([p, f], dim=-1))
    return SdfOutput(out[..., 0], out[..., 1:])


def rgb_decode(decoder: RgbDecoder, p, f, d, n, h) -> torch.Tensor:
    return decoder(torch.cat([p, f, d, n, h], dim=-1))


def _normalize_or_zero(g: torch.Tensor) -> torch.Tensor:
    norm = g.norm(dim=-1, keepdim=True)
    return torch.where(norm < NORMAL_EPS, torch.zeros_like(g), g / torch.clamp(norm, min=NORMAL_EPS))


def _sdf_gradient(s: torch.Tensor, p_in: torch.Tensor, f: torch.Tensor, jac: torch.Tensor) -> torch.Tensor:
    ds_dp, ds_df = torch.autograd.grad(s.sum(), [p_in, f], retain_graph=True, allow_unused=True)
    if ds_dp is None:
        ds_dp = torch.zeros_like(p_in)
    if ds_df is None:
        return ds_dp
    return ds_dp + torch.einsum("nc,nca->na", ds_df, jac)


def sdf_normal(decoder: SdfDecoder, vol: FeatureVolume, p) -> torch.Tensor:
    """Unit SDF gradient at ``p`` (chain rule through the trilinear Jacobian); zero if degenerate."""
    pts = torch.as_tensor(p, dtype=torch.float64)
    single = pts.dim() == 1
    pts = pts.reshape(-1, 3)
    with torch.enable_grad():
        f, jac = trilinear_sample_grad(vol, pts)
        p_in = pts.detach().requires_grad_(True)
        f_in = f.detach().requires_grad_(True)
        s = sdf_decode(decoder, p_in, f_in).sdf
        g = _sdf_gradient(s, p_in, f_in, jac.detach())
    n = _normalize_or_zero(g.detach())
    return n[0] if single else n


def sigmoid_s(x: torch.Tensor, s) -> torch.Tensor:
    return torch.sigmoid(s * x)


def alpha_from_sdf(s_j, s_next, sharpness) -> torch.Tensor:
    """Discrete opacity ``max((sig(s_j) - sig(s_next)) / sig(s_j), 0)`` with ``sig(x) = 1/(1+exp(-s x))``.

    Evaluated as ``-expm1(logsig(s*s_next) - logsig(s*s_j))`` for stability.
    """
    s_j = torch.as_tensor(s_j, dtype=torch.float64)
    s_next = torch.as_tensor(s_next, dtype=torch.float64)
    s = torch.as_tensor(sharpness, dtype=torch.float64)
    log_ratio = F.logsigmoid(s * s_next) - F.logsigmoid(s * s_j)
    return torch.clamp(-torch.expm1(log_ratio), min=0.0, max=ALPHA_MAX)


def composite(alphas: torch.Tensor, colors: torch.Tensor, depths: torch.Tensor):
    """Front-to-back compositing; returns ``(rgb, depth, weights, transmittance)``."""
    if alphas.shape != depths.shape or colors.shape[:-1] != alphas.shape:
        raise ShapeMismatch("alphas, colors and depths must agree on (..., D)")
    ones = torch.ones_like(alphas[..., :1])
    trans = torch.cumprod(torch.cat([ones, 1.0 - alphas[..., :-1]], dim=-1), dim=-1)
    weights = trans * alphas
    rgb = (weights.unsqueeze(-1) * colors).sum(dim=-2)
    depth = (weights * depths).sum(dim=-1)
    return rgb, depth, weights, trans


@dataclass
class RaySampleBatch:
    t: torch.Tensor  # (N, D)
    points: torch.Tensor  # (N, D, 3)
    features: torch.Tensor  # (N, D, C)
    sdf: torch.Tensor  # (N, D)
    colors: torch.Tensor  # (N, D, 3)
    normals: torch.Tensor  # (N, D, 3), detached
    alphas: torch.Tensor
    weights: torch.Tensor
    transmittance: torch.Tensor


@dataclass
class RenderOutput:
    rgb: torch.Tensor  # (N, 3)
    depth: torch.Tensor  # (N,)
    samples: RaySampleBatch


def render_rays(
    origins,
    directions,
    t_samples,
    vol: FeatureVolume,
    sdf_decoder: SdfDecoder,
    rgb_decoder: RgbDecoder,
    sharpness,
    normals_override: Optional[torch.Tensor] = None,
) -> RenderOutput:
    """Render a batch of rays through the feature volume.

    ``t_samples`` is ``(N, D)`` strictly increasing per ray and inside each
    ray's clip interval. The last sample reuses its own SDF as the successor,
    so its alpha is zero. Normals enter the colour decoder as constants; pass
    ``normals_override`` to pin them (used when finite-differencing).
    """
    o = torch.as_tensor(origins, dtype=torch.float64).reshape(-1, 3)
    d = torch.as_tensor(directions, dtype=torch.float64).reshape(-1, 3)
    t = torch.as_tensor(t_samples, dtype=torch.float64)
    if t.dim() != 2 or t.shape[0] != o.shape[0]:
        raise ShapeMismatch("t_samples must be (N, D) matching the ray count")
    N, D = t.shape
    if D < 2 or bool((t[:, 1:] <= t[:, :-1]).any()):
        raise DegenerateRay("sample depths must be strictly increasing with D >= 2")
    pts = o[:, None, :] + t[..., None] * d[:, None, :]
    flat = pts.reshape(-1, 3)
    with torch.enable_grad():
        if normals_override is None:
            feat, jac = trilinear_sample_grad(vol, flat)
        else:
            feat = trilinear_sample(vol, flat)
        p_in = flat.detach().requires_grad_(normals_override is None)
        if normals_override is None and not feat.requires_grad:
            feat = feat.detach().requires_grad_(True)
        sdf_out = sdf_decode(sdf_decoder, p_in, feat)
        if normals_override is None:
            g = _sdf_gradient(sdf_out.sdf, p_in, feat, jac.detach())
            normals = _normalize_or_zero(g.detach())
        else:
            normals = normals_override.reshape(-1, 3).detach()
    dirs = d[:, None, :].expand(N, D, 3).reshape(-1, 3)
    colors = rgb_decode(rgb_decoder, p_in.detach(), feat, dirs, normals, sdf_out.geo_feature)
    sdf = sdf_out.sdf.reshape(N, D)
    s = sharpness.value if isinstance(sharpness, Sharpness) else torch.as_tensor(sharpness, dtype=torch.float64)
    s_next = torch.cat([sdf[:, 1:], sdf[:, -1:]], dim=-1)
    alphas = alpha_from_sdf(sdf, s_next, s)
    colors = colors.reshape(N, D, 3)
    rgb, depth, weights, trans = composite(alphas, colors, t)
    samples = RaySampleBatch(t, pts, feat.reshape(N, D, -1), sdf, colors, normals.reshape(N, D, 3), alphas, weights, trans)
    return RenderOutput(rgb, depth, samples)


def render_ray(ray, t_samples, vol, sdf_decoder, rgb_decoder, sharpness):
    """Single-ray convenience wrapper around :func:`render_rays`."""
    t = torch.as_tensor(t_samples, dtype=torch.float64).reshape(1, -1)
    out = render_rays(ray.origin, ray.direction, t, vol, sdf_decoder, rgb_decoder, sharpness)
    return out.rgb[0], out.depth[0], out.samples
