"""End-to-end acceptance checks, one test per criterion.

Each test prints a single ``[criterion N] PASS/FAIL`` line with the measured
numbers. Criteria 7 and 8 train real models and take minutes; run them alone
with ``pytest -m slow tests/test_acceptance.py``.
"""
import dataclasses
import time
from pathlib import Path

import numpy as np
import pytest
import torch

from maskvol.cli import STRATEGY_ORDER, ordering_wins, run_bench
from maskvol.config import RunConfig, from_dict, load_config
from maskvol.geometry import Aabb, Ray, clip_rays, ring_rig
from maskvol.masking import bev_block_mask, bev_voxel_mask, image_block_mask, mask_points, upsample_mask
from maskvol.model import FrameInputs, Pipeline
from maskvol.renderer import RgbDecoder, SdfDecoder, render_ray, render_rays
from maskvol.sampling import sample_dilation, sample_ray_points
from maskvol.scenes import default_tau, gen_scene, prepare_scene
from maskvol.training import grad_check, pretrain, select_rays
from maskvol.voxelgrid import (
    FeatureVolume,
    ImageFeatureMap,
    VoxelSpec,
    bilinear_sample,
    conv3d_same,
    trilinear_sample,
    voxelize_points,
)

ROOT = Path(__file__).resolve().parents[1]


@pytest.fixture
def report(capsys):
    def emit(n, ok, detail):
        with capsys.disabled():
            print(f"\n[criterion {n}] {'PASS' if ok else 'FAIL'}: {detail}")
        assert ok, f"criterion {n}: {detail}"

    return emit


# 1 -------------------------------------------------------------------------


def test_c1_weight_invariants(report):
    start = time.perf_counter()
    rng = np.random.default_rng(1)
    torch.manual_seed(1)
    bounds = Aabb(np.array([-2.0, -2.0, -2.0]), np.array([2.0, 2.0, 2.0]))
    spec = VoxelSpec((8, 8, 8), bounds, 8)
    violations = rays = 0
    D = 96
    for chunk in range(10):
        vol = FeatureVolume(spec, torch.randn(8, 8, 8, 8) * rng.uniform(0.1, 20.0))
        sdf_dec, rgb_dec = SdfDecoder(8), RgbDecoder(8)
        s = float(np.exp(rng.uniform(np.log(0.1), np.log(5000.0))))
        o = rng.uniform(-1.9, 1.9, (1000, 3))
        d = rng.normal(size=(1000, 3))
        d /= np.linalg.norm(d, axis=1, keepdims=True)
        t0, t1, _ = clip_rays(o, d, bounds)
        t = sample_ray_points(t0, t1 * (1 - 1e-9), D, rng)
        with torch.no_grad():
            sm = render_rays(o, d, t, vol, sdf_dec, rgb_dec, s).samples
        w, T, a = sm.weights, sm.transmittance, sm.alphas
        bad = (w < 0).any(-1) | (w.sum(-1) > 1 + 1e-9) | (T[:, 1:] > T[:, :-1]).any(-1) | (a < 0).any(-1) | (a >= 1).any(-1)
        violations += int(bad.sum())
        rays += len(o)
    secs = time.perf_counter() - start
    report(1, violations == 0 and rays == 10_000 and secs < 10,
           f"{rays} rays, {violations} violating rays, {secs:.1f} s (limit 10 s)")


# 2 -------------------------------------------------------------------------


class PlanarSdf(SdfDecoder):
    """s(p) = p_z - 2.5 with a zero geometry feature."""

    def forward(self, x):
        s = x[..., 2:3] - 2.5 + 0.0 * x[..., 3:].sum(-1, keepdim=True)
        return torch.cat([s, torch.zeros(*x.shape[:-1], 15, dtype=x.dtype)], dim=-1)


def test_c2_planar_unbiasedness(report):
    start = time.perf_counter()
    spec = VoxelSpec((4, 4, 5), Aabb(np.array([-2.0, -2.0, 0.0]), np.array([2.0, 2.0, 5.0])), 3)
    vol = FeatureVolume.zeros(spec)
    # ray descends through the plane z = 2.5: surface at t = 2.5 on the span [0, 5]
    ray = Ray(np.array([0.0, 0.0, 5.0]), np.array([0.0, 0.0, -1.0]))
    t = torch.from_numpy(sample_ray_points(0.0, 5.0, 96, stratified=False))
    torch.manual_seed(0)
    rgb_dec = RgbDecoder(3)
    errs = []
    for s in (10.0, 50.0, 200.0):
        _, depth, _ = render_ray(ray, t, vol, PlanarSdf(3), rgb_dec, s)
        errs.append(abs(float(depth.detach()) - 2.5))
    secs = time.perf_counter() - start
    within = errs[2] < 0.01 * 5.0
    decreasing = errs[0] > errs[1] > errs[2]
    report(2, within and decreasing and secs < 1.0,
           f"|depth error| at s=10,50,200: {errs[0]:.9f}, {errs[1]:.9f}, {errs[2]:.9f}; "
           f"<1% of span at s=200: {within}; strictly decreasing: {decreasing}; "
           f"half sample spacing = {2.5 / 96:.9f}; {secs:.2f} s")


# 3 -------------------------------------------------------------------------


def test_c3_gradient_check(report):
    start = time.perf_counter()
    rep = grad_check()
    secs = time.perf_counter() - start
    report(3, rep.passed and rep.max_rel_error < 1e-4 and secs < 120,
           f"{rep.checked} entries over {len(rep.per_group)} parameter groups, max rel err "
           f"{rep.max_rel_error:.2e} ({rep.worst_parameter}), {secs:.1f} s (limit 120 s)")


# 4 -------------------------------------------------------------------------


def interp_axis(values, coords, axis):
    """Piecewise-linear interpolation along one axis with end clamping (np.interp per line)."""
    moved = np.moveaxis(values, axis, -1)
    grid = np.arange(moved.shape[-1], dtype=np.float64)
    out = np.empty(moved.shape[:-1])
    for idx in np.ndindex(moved.shape[:-1]):
        out[idx] = np.interp(coords, grid, moved[idx])
    return out


def test_c4_interpolation_exactness(report):
    rng = np.random.default_rng(4)
    bounds = Aabb(np.array([-1.0, 0.0, 2.0]), np.array([3.0, 1.5, 4.0]))
    spec = VoxelSpec((5, 4, 3), bounds, 1)
    data = rng.normal(size=(5, 4, 3))
    vol = FeatureVolume(spec, torch.from_numpy(data[..., None]))
    probes = rng.uniform(bounds.min, bounds.max, (1000, 3))
    got = trilinear_sample(vol, probes)[:, 0].numpy()
    g = (probes - bounds.min) / spec.voxel_size - 0.5
    ref = np.array([interp_axis(interp_axis(interp_axis(data, gx, 0), gy, 0), gz, 0)
                    for gx, gy, gz in g])
    tri_err = float(np.max(np.abs(got - ref)))

    fdata = rng.normal(size=(6, 9))
    fmap = ImageFeatureMap(torch.from_numpy(fdata[None, ..., None]), stride=2)
    uv = rng.uniform([0, 0], [18, 12], (1000, 2))
    got2 = bilinear_sample(fmap, 0, uv)[:, 0].numpy()
    x = uv[:, 0] / 2 - 0.5
    y = uv[:, 1] / 2 - 0.5
    ref2 = np.array([np.interp(yy, np.arange(6.0), interp_axis(fdata, xx, 1)) for xx, yy in zip(x, y)])
    bi_err = float(np.max(np.abs(got2 - ref2)))
    report(4, tri_err < 1e-10 and bi_err < 1e-10,
           f"1000 probes each: trilinear max err {tri_err:.1e}, bilinear max err {bi_err:.1e} (limit 1e-10)")


# 5 -------------------------------------------------------------------------


def test_c5_masking_contract(report):
    cfg = RunConfig(modality="fused")
    rng = np.random.default_rng(5)
    scene = gen_scene(11)
    sd = prepare_scene(scene)
    model = Pipeline(cfg.model, "fused", scene.bounds)
    H, W = scene.rig.image_size
    img_dev = pts_dev = 0.0
    leaks = 0
    for trial in range(20):
        im = image_block_mask(H, W, 32, 0.3, rng)
        bev = bev_block_mask(model.spec, 8, 0.8, rng)
        img_dev = max(img_dev, abs(im.achieved_ratio - 0.3) * im.grid.size)
        pts_dev = max(pts_dev, abs(bev.achieved_ratio - 0.8) * bev.grid.size)
        if trial >= 3:
            continue
        pixel_mask = np.stack([upsample_mask(image_block_mask(H, W, 32, 0.3, rng)) for _ in range(6)])
        frame = FrameInputs(scene.rig, sd.images, pixel_mask, mask_points(sd.lidar, bev, model.spec), bev_voxel_mask(bev, model.spec))
        with torch.no_grad():
            base = model.raw_volume(frame).data
            # fault injection: garbage in every masked pixel and every masked-column point
            images = sd.images.copy()
            images[pixel_mask] = rng.normal(scale=1e3, size=(int(pixel_mask.sum()), 3))
            lidar = sd.lidar.copy()
            col = np.floor((lidar[:, :2] - scene.bounds.min[:2]) / model.spec.voxel_size[:2]).astype(int)
            inside = np.all((col >= 0) & (col < 32), axis=1)
            hidden = np.zeros(len(lidar), dtype=bool)
            hidden[inside] = frame.masked_columns[col[inside, 0], col[inside, 1]]
            # new height and intensity keep each hidden point in its masked column
            lidar[hidden, 2] = rng.uniform(0.0, 2.0, int(hidden.sum()))
            lidar[hidden, 3] = rng.uniform(0.0, 1.0, int(hidden.sum()))
            poked = FrameInputs(scene.rig, images, pixel_mask, mask_points(lidar, bev, model.spec), frame.masked_columns)
            leaks += int(not torch.equal(model.raw_volume(poked).data, base))
            # positive control: visible content does reach the encoders
            images2 = sd.images.copy()
            images2[~pixel_mask] += 0.01
            control = FrameInputs(scene.rig, images2, pixel_mask, frame.points, frame.masked_columns)
            leaks += int(torch.equal(model.raw_volume(control).data, base))
    ok = img_dev <= 1.0 + 1e-12 and pts_dev <= 1.0 + 1e-12 and leaks == 0
    report(5, ok, f"worst ratio deviation image {img_dev / 6:.4f} (bound {1 / 6:.4f}), points {pts_dev / 16:.4f} "
                  f"(bound {1 / 16:.4f}); masked-content fault injection: {leaks} failures in 3 frames")


# 6 -------------------------------------------------------------------------


def test_c6_sampling_contracts(report):
    bad_counts = 0
    for S in (1, 3, 6):
        for I in (1, 2, 4, 8, 16):
            for H, W in ((64, 96), (32, 32), (16, 48)):
                rig = ring_rig(S, (H, W))
                bad_counts += int(len(sample_dilation(rig, I)) != S * (H // I) * (W // I))
    cfg = RunConfig()
    supervised = over_tau = 0
    for seed in range(3):
        sd = prepare_scene(gen_scene(seed))
        tau = default_tau(sd.scene.bounds)
        for step in range(5):
            px, depth = select_rays(cfg, sd, list(range(6)), seed, step)
            for (v, u, w), z in zip(px, depth):
                if np.isfinite(z):
                    supervised += 1
                    over_tau += int(not sd.depth_maps[int(v)][(int(u), int(w))] < tau)
    report(6, bad_counts == 0 and over_tau == 0 and supervised > 0,
           f"dilation count mismatches: {bad_counts}/45 grids; depth-supervised rays with map depth >= tau: "
           f"{over_tau}/{supervised}")


# 7 -------------------------------------------------------------------------


@pytest.mark.slow
def test_c7_learning_smoke(report, tmp_path):
    cfg = dataclasses.replace(RunConfig(), threads=1).validate()
    assert cfg.rays.strategy == "depth_aware" and cfg.rays.rays_per_view == 512 and cfg.steps == 500
    start = time.perf_counter()
    res = pretrain(cfg, tmp_path)
    secs = time.perf_counter() - start
    d0, d1 = res.eval_history[0]["depth_l1"], res.eval_history[-1]["depth_l1"]
    losses = np.array([m.loss for m in res.history])
    windows = losses.reshape(-1, 100).mean(axis=1)
    monotone = bool(np.all(np.diff(windows) <= 0))
    ok = d1 <= 0.5 * d0 and monotone and secs < 600
    report(7, ok, f"held-out depth L1 {d0:.4f} -> {d1:.4f} (needs <= {0.5 * d0:.4f}); 100-step loss means "
                  f"{', '.join(f'{w:.3f}' for w in windows)} (monotone: {monotone}); {secs:.0f} s (limit 600 s)")


# 8 -------------------------------------------------------------------------


@pytest.mark.slow
def test_c8_strategy_ordering(report, tmp_path):
    base = load_config(ROOT / "configs" / "bench_sampling.yaml", environ={})
    start = time.perf_counter()
    per_seed, summary = run_bench(base, list(range(5)), tmp_path)
    secs = time.perf_counter() - start
    wins = ordering_wins(per_seed)
    medians = {r[0]: r[3] for r in summary}
    ok = wins >= 4 and secs < 45 * 60
    report(8, ok, f"depth-aware <= random <= dilation in {wins}/5 seeds; median held-out depth L1 "
                  + ", ".join(f"{k} {medians[k]:.4f}" for k in STRATEGY_ORDER)
                  + f"; K={summary[0][2]} rays/view, {base.steps} steps per run; {secs / 60:.1f} min (limit 45)")


# 9 -------------------------------------------------------------------------


def test_c9_reproducibility(report, tmp_path):
    cfg = from_dict({"steps": 6, "threads": 1, "suite": {"n_scenes": 2, "heldout_scenes": 1},
                     "rays": {"rays_per_view": 128}, "eval": {"every": 3, "rays_per_view": 16}}).validate()
    pretrain(cfg, tmp_path / "a")
    pretrain(cfg, tmp_path / "b")
    same = {f: (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()
            for f in ("checkpoint.bin", "metrics.csv", "eval.csv")}
    report(9, all(same.values()), "byte-identical across two single-threaded runs: "
           + ", ".join(f"{k} {v}" for k, v in same.items()))


# 10 ------------------------------------------------------------------------


def naive_conv(data, weight, bias):
    X, Y, Z, C = data.shape
    pad = np.zeros((X + 2, Y + 2, Z + 2, C))
    pad[1:-1, 1:-1, 1:-1] = data
    out = np.zeros((X, Y, Z, weight.shape[0]))
    for x in range(X):
        for y in range(Y):
            for z in range(Z):
                patch = pad[x:x + 3, y:y + 3, z:z + 3]  # (3,3,3,C)
                for o in range(weight.shape[0]):
                    out[x, y, z, o] = bias[o] + np.sum(patch * np.moveaxis(weight[o], 0, -1))
    return out


def naive_voxelize(points, feats, spec):
    out = np.zeros((*spec.resolution, feats.shape[1]))
    buckets = {}
    for p, f in zip(points, feats):
        idx = []
        for a in range(3):
            k = int(np.floor((p[a] - spec.bounds.min[a]) / spec.voxel_size[a]))
            idx.append(min(k, spec.resolution[a] - 1) if p[a] <= spec.bounds.max[a] else -1)
        if all(0 <= idx[a] < spec.resolution[a] for a in range(3)) and p[0] >= spec.bounds.min[0] \
                and p[1] >= spec.bounds.min[1] and p[2] >= spec.bounds.min[2]:
            buckets.setdefault(tuple(idx), []).append(f)
    for k, fs in buckets.items():
        out[k] = np.mean(fs, axis=0)
    return out


def test_c10_oracle_equivalence(report):
    rng = np.random.default_rng(10)
    torch.manual_seed(10)
    bounds = Aabb(np.array([-2.0, -2.0, 0.0]), np.array([2.0, 2.0, 2.0]))
    spec = VoxelSpec((6, 5, 4), bounds, 4)
    vol = FeatureVolume(spec, torch.randn(6, 5, 4, 4))
    sdf_dec, rgb_dec = SdfDecoder(4), RgbDecoder(4)
    o = rng.uniform(-1.5, 1.5, (40, 3))
    o[:, 2] = rng.uniform(0.2, 1.8, 40)
    d = rng.normal(size=(40, 3))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    t0, t1, _ = clip_rays(o, d, bounds)
    t = sample_ray_points(t0, t1 * (1 - 1e-9), 24, rng)
    batch = render_rays(o, d, t, vol, sdf_dec, rgb_dec, 30.0)
    mismatched = 0
    for i in range(len(o)):
        rgb, depth, _ = render_ray(Ray(o[i], d[i]), t[i], vol, sdf_dec, rgb_dec, 30.0)
        mismatched += int(not (torch.equal(batch.rgb[i], rgb) and torch.equal(batch.depth[i], depth)))

    data = rng.normal(size=(5, 4, 6, 3))
    weight = rng.normal(size=(2, 3, 3, 3, 3))
    bias = rng.normal(size=2)
    conv = conv3d_same(torch.from_numpy(data), torch.from_numpy(weight), torch.from_numpy(bias)).numpy()
    conv_err = float(np.max(np.abs(conv - naive_conv(data, weight, bias))))

    pts = rng.uniform(bounds.min - 0.3, bounds.max + 0.3, (400, 3))
    pts[:10] = spec.centers().reshape(-1, 3)[:10]
    pts[10] = bounds.max
    feats = rng.normal(size=(400, 4))
    vox = voxelize_points(pts, torch.from_numpy(feats), spec).data.numpy()
    vox_err = float(np.max(np.abs(vox - naive_voxelize(pts, feats, spec))))
    ok = mismatched == 0 and conv_err < 1e-12 and vox_err < 1e-12
    report(10, ok, f"batch vs per-ray: {mismatched}/40 rays differ bitwise; conv max err {conv_err:.1e}; "
                   f"voxelize max err {vox_err:.1e} (limit 1e-12)")
