"""Pre-training objective, gradient utilities, optimizer and training loop."""
from __future__ import annotations

import logging
import time
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np
import torch

from .config import LossWeights, RunConfig, dump_config
from .errors import GraphNotRecorded, NonFiniteGradient, NonFiniteLoss, ShapeMismatch
from .geometry import Aabb, clip_rays, pixel_directions
from .io import METRICS_HEADER, format_metrics_row, save_checkpoint
from .masking import bev_block_mask, bev_voxel_mask, image_block_mask, mask_points, upsample_mask
from .model import FrameInputs, Pipeline
from .sampling import sample_depth_aware, sample_dilation, sample_random, sample_ray_points, view_rng
from .scenes import SceneData, default_tau, gen_suite, load_scene, prepare_scene

log = logging.getLogger(__name__)


@dataclass
class RenderTargets:
    gt_rgb: torch.Tensor  # (K, 3)
    gt_depth: torch.Tensor  # (K,), NaN where no depth is available

    @property
    def count(self) -> int:
        return int(self.gt_rgb.shape[0])

    @property
    def depth_count(self) -> int:
        return int(torch.isfinite(self.gt_depth).sum())


def _ordered_sum(x: torch.Tensor) -> torch.Tensor:
    # sorting first makes the float sum independent of ray order
    return torch.sort(x.reshape(-1)).values.sum()


def pretrain_loss(pred_rgb, pred_depth, targets: RenderTargets, weights: LossWeights):
    """Weighted L1 colour loss over all rays plus L1 depth loss over rays with depth.

    Colour residuals are summed over channels. Returns ``(loss, residuals)``
    where ``residuals`` holds per-ray ``rgb`` (K,) and ``depth`` (K,) errors
    (NaN where depth is missing).
    """
    if pred_rgb.shape != targets.gt_rgb.shape or pred_depth.shape != targets.gt_depth.shape:
        raise ShapeMismatch("prediction and target ray counts differ")
    K = targets.count
    rgb_res = (pred_rgb - targets.gt_rgb).abs().sum(dim=-1)
    loss = weights.lambda_rgb * _ordered_sum(rgb_res) / K if K else pred_rgb.sum() * 0.0
    has_depth = torch.isfinite(targets.gt_depth)
    k_plus = int(has_depth.sum())
    depth_res = torch.full_like(pred_depth, float("nan"))
    if k_plus:
        d_res = (pred_depth[has_depth] - targets.gt_depth[has_depth]).abs()
        loss = loss + weights.lambda_depth * _ordered_sum(d_res) / k_plus
        depth_res = depth_res.masked_scatter(has_depth, d_res.detach())
    return loss, {"rgb": rgb_res.detach(), "depth": depth_res}


# ---------------------------------------------------------------------------
# gradients


def backward(loss: torch.Tensor, params: "OrderedDict[str, torch.Tensor]") -> "OrderedDict[str, torch.Tensor]":
    """Reverse-mode gradients of a recorded scalar w.r.t. named parameters."""
    if not isinstance(loss, torch.Tensor) or loss.grad_fn is None:
        raise GraphNotRecorded("loss carries no recorded graph; run the forward pass with grad enabled")
    names = list(params)
    grads = torch.autograd.grad(loss, [params[n] for n in names], allow_unused=True)
    return OrderedDict((n, torch.zeros_like(params[n]) if g is None else g) for n, g in zip(names, grads))


@dataclass
class GradCheckReport:
    max_rel_error: float
    worst_parameter: Optional[str]
    checked: int
    passed: bool
    per_group: dict = field(default_factory=dict)


def check_gradients(
    loss_fn: Callable[[], torch.Tensor],
    params: "OrderedDict[str, torch.Tensor]",
    eps: float = 1e-6,
    rtol: float = 1e-4,
    atol: float = 1e-8,
    max_entries: Optional[int] = None,
    rng: Optional[np.random.Generator] = None,
    grad_hook: Optional[Callable] = None,
) -> GradCheckReport:
    """Compare reverse-mode gradients with central differences.

    An entry passes when ``|g - fd| <= atol`` or ``|g - fd| <= rtol * max(|g|, |fd|)``;
    equivalently when ``|g - fd| / max(|g|, |fd|, atol / rtol) <= rtol``, which
    is the reported relative error. With
    ``max_entries`` only that many seeded-random entries per tensor are
    differenced. ``grad_hook(name, grad)`` may rewrite analytic gradients
    (fault injection).
    """
    if not params:
        return GradCheckReport(0.0, None, 0, True)
    loss = loss_fn()
    grads = backward(loss, params)
    if grad_hook is not None:
        grads = OrderedDict((n, grad_hook(n, g)) for n, g in grads.items())
    rng = rng or np.random.default_rng(0)
    worst, worst_name, checked, ok = 0.0, None, 0, True
    per_group = {}
    with torch.no_grad():
        for name, p in params.items():
            flat = p.view(-1)
            g = grads[name].reshape(-1)
            idx = np.arange(flat.numel())
            if max_entries is not None and len(idx) > max_entries:
                idx = np.sort(rng.choice(len(idx), size=max_entries, replace=False))
            group_worst = 0.0
            for i in idx.tolist():
                orig = flat[i].item()
                flat[i] = orig + eps
                up = float(loss_fn())
                flat[i] = orig - eps
                down = float(loss_fn())
                flat[i] = orig
                fd = (up - down) / (2 * eps)
                an = float(g[i])
                rel = abs(an - fd) / max(abs(an), abs(fd), atol / rtol)
                group_worst = max(group_worst, rel)
                if rel > rtol:
                    ok = False
                checked += 1
            per_group[name] = group_worst
            if group_worst > worst:
                worst, worst_name = group_worst, name
    return GradCheckReport(worst, worst_name, checked, ok, per_group)


# ---------------------------------------------------------------------------
# optimizer


def make_optimizer(params, cfg) -> torch.optim.AdamW:
    return torch.optim.AdamW(
        params, lr=cfg.lr, betas=(cfg.beta1, cfg.beta2), eps=cfg.eps, weight_decay=cfg.weight_decay
    )


def optimizer_step(optimizer: torch.optim.Optimizer, params, grads=None) -> None:
    """One decoupled-weight-decay Adam update.

    ``grads`` (aligned with ``params``) replaces ``.grad`` when given.
    Non-finite gradients abort before any parameter changes.
    """
    params = list(params)
    if grads is not None:
        for p, g in zip(params, grads):
            p.grad = None if g is None else g.detach().clone()
    for p in params:
        if p.grad is not None and not bool(torch.isfinite(p.grad).all()):
            raise NonFiniteGradient("non-finite gradient; refusing to step")
    optimizer.step()


# ---------------------------------------------------------------------------
# data


def scene_bounds(cfg: RunConfig) -> Aabb:
    return Aabb(np.asarray(cfg.suite.bounds_min), np.asarray(cfg.suite.bounds_max))


def load_scenes(cfg: RunConfig):
    """Training and held-out scene definitions for a run."""
    s = cfg.suite
    kw = dict(bounds=scene_bounds(cfg), n_views=s.n_views, image_size=(s.image_height, s.image_width))
    if s.scene_dir is not None:
        files = sorted(Path(s.scene_dir).glob("scene_*.json"))
        train = [load_scene(f) for f in files]
    else:
        train = gen_suite(s.seed, s.n_scenes, **kw)
    heldout = gen_suite(s.heldout_seed, s.heldout_scenes, **kw) if s.heldout_scenes else []
    return train, heldout


def prepare(cfg: RunConfig, scenes) -> list:
    return [
        prepare_scene(sc, cfg.rays.tau, cfg.suite.lidar_azimuth, cfg.suite.lidar_rows)
        for sc in scenes
    ]


def make_frame(cfg: RunConfig, data: SceneData, model: Pipeline, rng: np.random.Generator) -> FrameInputs:
    """Apply fresh block masks to one scene's inputs."""
    rig = data.scene.rig
    H, W = rig.image_size
    m = cfg.mask
    frame = FrameInputs(rig)
    if model.uses_images:
        masks = [upsample_mask(image_block_mask(H, W, m.image_block, m.image_ratio, rng)) for _ in range(rig.view_count)]
        frame.images = data.images
        frame.pixel_mask = np.stack(masks)
    if model.uses_points:
        bev = bev_block_mask(model.spec, m.point_block, m.point_ratio, rng)
        frame.points = mask_points(data.lidar, bev, model.spec)
        frame.masked_columns = bev_voxel_mask(bev, model.spec)
    return frame


def select_rays(cfg: RunConfig, data: SceneData, views, seed: int, step: int):
    """Pixels ``(M, 3)`` and per-ray depth targets (NaN = unsupervised)."""
    r = cfg.rays
    rig = data.scene.rig
    W = rig.width
    rng = lambda v: view_rng(seed, step, v)  # noqa: E731
    if r.strategy == "dilation":
        px = sample_dilation(rig, r.interval, views)
        lidar_depth = None
    elif r.strategy == "random":
        px = sample_random(rig, r.rays_per_view, rng, views)
        lidar_depth = None
    else:
        px, lidar_depth = sample_depth_aware(rig, data.ray_depth_maps, r.rays_per_view, rng, views)
    v = px[:, 0].astype(np.int64)
    col = np.floor(px[:, 1]).astype(np.int64)
    row = np.floor(px[:, 2]).astype(np.int64)
    if r.depth_source == "oracle":
        depth = data.depths[v, row, col]
    elif lidar_depth is not None:
        depth = lidar_depth
    else:
        depth = np.array([data.ray_depth_maps[a].get((c, b), np.nan) for a, c, b in zip(v, col, row)], dtype=np.float64)
    return px, depth


def rays_for_pixels(rig, px: np.ndarray, bounds: Aabb):
    """Origins, directions and clip intervals; rays missing the volume are dropped."""
    views = px[:, 0].astype(np.int64)
    origins = np.zeros((len(px), 3))
    dirs = np.zeros((len(px), 3))
    for v in np.unique(views):
        sel = views == v
        origins[sel] = rig.view(int(v)).center
        dirs[sel] = pixel_directions(px[sel, 1:], rig, int(v))
    t_near, t_far, hit = clip_rays(origins, dirs, bounds)
    return origins, dirs, t_near, t_far, hit


def ray_buffer_bytes(n_rays: int, d: int, feature_dim: int) -> int:
    """Bytes held per step by the per-sample tensors (points, features, sdf, colour, normal, weights)."""
    per_sample = 3 + feature_dim + 1 + 3 + 3 + 3
    return int(n_rays) * int(d) * per_sample * 8


# ---------------------------------------------------------------------------
# evaluation


@dataclass
class EvalSet:
    data: list
    frames: list
    rays: list  # per scene: (origins, dirs, t, gt_rgb, gt_depth)


def build_eval_set(cfg: RunConfig, data: list, model: Pipeline) -> EvalSet:
    """Fixed held-out rays: pixels with a surface hit, fixed masks, midpoint samples."""
    frames, rays = [], []
    D = cfg.rays.points_per_ray
    for k, sd in enumerate(data):
        rng = np.random.default_rng([cfg.eval.seed, k])
        frames.append(make_frame(cfg, sd, model, rng))
        rig = sd.scene.rig
        px_all = []
        for v in range(rig.view_count):
            rows, cols = np.nonzero(np.isfinite(sd.depths[v]))
            n = min(cfg.eval.rays_per_view, len(rows))
            pick = np.sort(rng.choice(len(rows), size=n, replace=False)) if n else np.zeros(0, dtype=int)
            px_all.append(np.stack([np.full(n, float(v)), cols[pick] + 0.5, rows[pick] + 0.5], axis=-1))
        px = np.concatenate(px_all) if px_all else np.zeros((0, 3))
        o, d, t0, t1, hit = rays_for_pixels(rig, px, model.bounds)
        px, o, d, t0, t1 = px[hit], o[hit], d[hit], t0[hit], t1[hit]
        t = sample_ray_points(t0, t1, D, stratified=False) if len(px) else np.zeros((0, D))
        v = px[:, 0].astype(np.int64)
        col = np.floor(px[:, 1]).astype(np.int64)
        row = np.floor(px[:, 2]).astype(np.int64)
        rays.append((o, d, t, sd.images[v, row, col], sd.depths[v, row, col]))
    return EvalSet(data, frames, rays)


def evaluate(model: Pipeline, ev: EvalSet, chunk: int = 4096) -> dict:
    """Held-out depth L1 (mean and median) and colour L1 over the eval rays."""
    depth_err, rgb_err = [], []
    for frame, (o, d, t, gt_rgb, gt_depth) in zip(ev.frames, ev.rays):
        if not len(o):
            continue
        with torch.no_grad():
            vol = model.build_volume(frame)
        for a in range(0, len(o), chunk):
            out = model.render(vol, o[a:a + chunk], d[a:a + chunk], t[a:a + chunk])
            depth_err.append(np.abs(out.depth.detach().numpy() - gt_depth[a:a + chunk]))
            rgb_err.append(np.abs(out.rgb.detach().numpy() - gt_rgb[a:a + chunk]).sum(axis=-1))
    if not depth_err:
        return {"depth_l1": float("nan"), "depth_median": float("nan"), "rgb_l1": float("nan")}
    de = np.concatenate(depth_err)
    re = np.concatenate(rgb_err)
    return {"depth_l1": float(de.mean()), "depth_median": float(np.median(de)), "rgb_l1": float(re.mean())}


# ---------------------------------------------------------------------------
# training loop


@dataclass
class StepMetrics:
    step: int
    loss: float
    rgb_l1: float
    depth_l1: float
    rays: int
    seconds: float

    def row(self):
        return (self.step, self.loss, self.rgb_l1, self.depth_l1, self.rays, self.seconds)


@dataclass
class PretrainResult:
    model: Pipeline
    history: list
    eval_history: list
    peak_ray_buffer_bytes: int
    checkpoint: Optional[Path] = None


def set_threads(threads: int) -> None:
    if threads > 0:
        torch.set_num_threads(threads)


def init_model(cfg: RunConfig) -> Pipeline:
    torch.manual_seed(cfg.seed)
    return Pipeline(cfg.model, cfg.modality, scene_bounds(cfg))


def checkpoint_entries(model: Pipeline, step: int) -> "OrderedDict[str, np.ndarray]":
    entries: OrderedDict = OrderedDict()
    for name, p in model.named_parameters():
        entries[name] = p.detach().numpy().copy()
    for name, v in model.meta().items():
        entries[name] = np.asarray(v, dtype=np.float64)
    entries["meta.step"] = np.asarray(float(step))
    return entries


def train_step(cfg: RunConfig, model: Pipeline, optimizer, data: list, step: int):
    """One masked-encode / render / loss / update step; returns metrics and ray count."""
    rng = np.random.default_rng([cfg.seed, step, 0x5CE4E])
    sd = data[int(rng.integers(len(data)))]
    rig = sd.scene.rig
    frame = make_frame(cfg, sd, model, rng)
    views = np.sort(rng.choice(rig.view_count, size=cfg.rays.views_per_step, replace=False)).tolist()
    px, depth = select_rays(cfg, sd, views, cfg.seed, step)
    o, d, t0, t1, hit = rays_for_pixels(rig, px, model.bounds)
    px, depth, o, d, t0, t1 = px[hit], depth[hit], o[hit], d[hit], t0[hit], t1[hit]
    v = px[:, 0].astype(np.int64)
    gt_rgb = sd.images[v, np.floor(px[:, 2]).astype(np.int64), np.floor(px[:, 1]).astype(np.int64)]
    t = sample_ray_points(t0, t1, cfg.rays.points_per_ray, rng, cfg.rays.stratified)
    vol = model.build_volume(frame)
    out = model.render(vol, o, d, t)
    targets = RenderTargets(torch.from_numpy(gt_rgb), torch.from_numpy(depth))
    loss, res = pretrain_loss(out.rgb, out.depth, targets, cfg.loss)
    if not bool(torch.isfinite(loss)):
        raise NonFiniteLoss(f"non-finite loss {float(loss)} at step {step}")
    optimizer.zero_grad(set_to_none=True)
    loss.backward()
    optimizer_step(optimizer, model.parameters())
    dres = res["depth"].numpy()
    depth_l1 = float(np.nanmean(dres)) if np.isfinite(dres).any() else float("nan")
    return float(loss.detach()), float(res["rgb"].mean()), depth_l1, len(px)


def pretrain(
    cfg: RunConfig,
    out_dir=None,
    data: Optional[list] = None,
    heldout: Optional[list] = None,
    progress: Optional[Callable[[StepMetrics], None]] = None,
) -> PretrainResult:
    """Run the pre-training loop.

    Writes ``metrics.csv``, ``eval.csv``, ``config.yaml`` and
    ``checkpoint.bin`` (plus ``checkpoint_<step>.bin`` every
    ``checkpoint_every`` steps) under ``out_dir`` when given. With
    ``threads == 1`` the run is bitwise reproducible and the ``seconds``
    column is written as 0.
    """
    set_threads(cfg.threads)
    deterministic = cfg.threads == 1
    if data is None or heldout is None:
        train_scenes, held_scenes = load_scenes(cfg)
        data = prepare(cfg, train_scenes) if data is None else data
        heldout = prepare(cfg, held_scenes) if heldout is None else heldout
    model = init_model(cfg)
    optimizer = make_optimizer(model.parameters(), cfg.optim)
    ev = build_eval_set(cfg, heldout, model) if heldout else None
    out = Path(out_dir) if out_dir is not None else None
    metrics_fh = eval_fh = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        dump_config(cfg, out / "config.yaml")
        metrics_fh = open(out / "metrics.csv", "w", newline="")
        metrics_fh.write(",".join(METRICS_HEADER) + "\n")
        eval_fh = open(out / "eval.csv", "w", newline="")
        eval_fh.write("step,depth_l1,depth_median,rgb_l1\n")
    history, eval_history = [], []
    rays_max = 0

    def run_eval(step):
        if ev is None:
            return
        e = evaluate(model, ev)
        eval_history.append({"step": step, **e})
        if eval_fh:
            eval_fh.write(format_metrics_row((step, e["depth_l1"], e["depth_median"], e["rgb_l1"])))
        log.info("eval step %d: depth L1 %.4f (median %.4f), rgb L1 %.4f", step, e["depth_l1"], e["depth_median"], e["rgb_l1"])

    try:
        run_eval(0)
        start = time.perf_counter()
        for step in range(cfg.steps):
            loss, rgb_l1, depth_l1, n_rays = train_step(cfg, model, optimizer, data, step)
            rays_max = max(rays_max, n_rays)
            secs = 0.0 if deterministic else time.perf_counter() - start
            m = StepMetrics(step + 1, loss, rgb_l1, depth_l1, n_rays, secs)
            history.append(m)
            if metrics_fh:
                metrics_fh.write(format_metrics_row(m.row()))
            if progress:
                progress(m)
            done = step + 1
            if cfg.eval.every and (done % cfg.eval.every == 0 or done == cfg.steps):
                run_eval(done)
            elif done == cfg.steps:
                run_eval(done)
            if out is not None and cfg.checkpoint_every and done % cfg.checkpoint_every == 0:
                save_checkpoint(out / f"checkpoint_{done:06d}.bin", checkpoint_entries(model, done))
    finally:
        if metrics_fh:
            metrics_fh.close()
        if eval_fh:
            eval_fh.close()
    ckpt = None
    if out is not None:
        ckpt = out / "checkpoint.bin"
        save_checkpoint(ckpt, checkpoint_entries(model, cfg.steps))
    peak = ray_buffer_bytes(rays_max, cfg.rays.points_per_ray, cfg.model.proj_dim)
    return PretrainResult(model, history, eval_history, peak, ckpt)


# ---------------------------------------------------------------------------
# gradient check on a tiny configuration


def gradcheck_config() -> RunConfig:
    """Tiny fused-modality setup: 8x8x4 volume, 2 views of 8x8 px, 4 rays, 8 samples."""
    from .config import from_dict

    return from_dict({
        "modality": "fused",
        "suite": {"n_views": 2, "image_height": 8, "image_width": 8, "n_scenes": 1, "heldout_scenes": 0,
                  "lidar_azimuth": 90, "lidar_rows": 8},
        "mask": {"image_block": 4, "image_ratio": 0.25, "point_block": 4, "point_ratio": 0.25},
        "rays": {"strategy": "random", "rays_per_view": 2, "points_per_ray": 8, "views_per_step": 2,
                 "stratified": False, "depth_source": "oracle"},
        "model": {"voxel_resolution": [8, 8, 4], "feature_dim": 4, "depth_bins": 8},
        "steps": 0,
    }).validate()


def grad_check(cfg: Optional[RunConfig] = None, seed: int = 0, max_entries: Optional[int] = 24,
               grad_hook: Optional[Callable] = None, rtol: float = 1e-4, atol: float = 1e-8) -> GradCheckReport:
    """Finite-difference check of every parameter group of the full pipeline.

    Normals are pinned to their base-point values for all evaluations since
    gradients do not flow through them.
    """
    cfg = gradcheck_config() if cfg is None else cfg
    torch.manual_seed(seed)
    scene = gen_suite(seed, 1, bounds=scene_bounds(cfg), n_views=cfg.suite.n_views,
                      image_size=(cfg.suite.image_height, cfg.suite.image_width))[0]
    sd = prepare_scene(scene, cfg.rays.tau, cfg.suite.lidar_azimuth, cfg.suite.lidar_rows)
    model = Pipeline(cfg.model, cfg.modality, scene_bounds(cfg))
    rng = np.random.default_rng(seed)
    frame = make_frame(cfg, sd, model, rng)
    views = list(range(cfg.rays.views_per_step))
    px, depth = select_rays(cfg, sd, views, seed, 0)
    o, d, t0, t1, hit = rays_for_pixels(scene.rig, px, model.bounds)
    px, depth, o, d, t0, t1 = px[hit], depth[hit], o[hit], d[hit], t0[hit], t1[hit]
    v = px[:, 0].astype(np.int64)
    gt_rgb = sd.images[v, np.floor(px[:, 2]).astype(np.int64), np.floor(px[:, 1]).astype(np.int64)]
    # depth for every ray so the depth branch is always exercised
    depth = np.where(np.isfinite(depth), depth, 0.5 * (t0 + t1))
    t = sample_ray_points(t0, t1, cfg.rays.points_per_ray, stratified=False)
    targets = RenderTargets(torch.from_numpy(gt_rgb), torch.from_numpy(depth))
    normals = model.render(model.build_volume(frame), o, d, t).samples.normals.detach()

    def loss_fn():
        vol = model.build_volume(frame)
        out = model.render(vol, o, d, t, normals_override=normals)
        return pretrain_loss(out.rgb, out.depth, targets, cfg.loss)[0]

    params = OrderedDict(model.named_parameters())
    return check_gradients(loss_fn, params, max_entries=max_entries, rng=rng, grad_hook=grad_hook, rtol=rtol, atol=atol)
