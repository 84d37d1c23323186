"""Command-line entry point.

Exit codes: 0 ok, 1 invalid input or config, 2 numeric failure, 3 I/O error.
"""
from __future__ import annotations

import argparse
import dataclasses
import logging
import sys
import time
from pathlib import Path

import numpy as np
import torch

from .config import RunConfig, load_config
from .errors import MaskvolError, NumericError, ValidationError
from .io import load_checkpoint, write_csv, write_pgm_depth, write_points, write_ppm
from .model import FrameInputs, pipeline_from_meta
from .sampling import sample_ray_points
from .scenes import gen_suite, load_scene, oracle_render_view, save_scene, simulate_lidar
from .training import grad_check, gradcheck_config, pretrain, rays_for_pixels, scene_bounds, set_threads

log = logging.getLogger("maskvol")

EXIT_OK, EXIT_VALIDATION, EXIT_NUMERIC, EXIT_IO = 0, 1, 2, 3
STRATEGY_ORDER = ("depth_aware", "random", "dilation")
BENCH_HEADER = ("strategy", "seed", "rays_per_view", "depth_l1_median", "rgb_l1", "peak_ray_buffer_bytes", "seconds")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_VALIDATION, f"{self.prog}: error: {message}\n")


def _overrides(args) -> dict:
    out = {}
    if getattr(args, "seed", None) is not None:
        out["seed"] = args.seed
    if getattr(args, "threads", None) is not None:
        out["threads"] = args.threads
    if getattr(args, "out", None) is not None:
        out["out"] = args.out
    return out


def _run_config(args) -> RunConfig:
    cfg = load_config(args.config, _overrides(args))
    set_threads(cfg.threads)
    return cfg


# ---------------------------------------------------------------------------
# commands


def cmd_gen_scene(args) -> int:
    """Scene files plus oracle RGB/depth images and a LiDAR dump per scene."""
    cfg = _run_config(args)
    s = cfg.suite
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    scenes = gen_suite(cfg.seed, args.n, bounds=scene_bounds(cfg), n_views=s.n_views,
                       image_size=(s.image_height, s.image_width))
    for k, scene in enumerate(scenes):
        stem = f"scene_{k:03d}"
        save_scene(scene, out / f"{stem}.json")
        for v in range(scene.rig.view_count):
            rgb, depth = oracle_render_view(scene, v)
            write_ppm(out / f"{stem}_view{v}_rgb.ppm", rgb)
            write_pgm_depth(out / f"{stem}_view{v}_depth.pgm", depth)
        write_points(out / f"{stem}_lidar.csv", simulate_lidar(scene, azimuth_count=s.lidar_azimuth, elevation_rows=s.lidar_rows))
        print(f"wrote {stem} ({len(scene.primitives)} primitives)")
    return EXIT_OK


def cmd_pretrain(args) -> int:
    cfg = _run_config(args)

    def progress(m):
        if m.step % max(1, cfg.steps // 20) == 0 or m.step == cfg.steps:
            log.info("step %d loss %.5f rgb %.4f depth %.4f", m.step, m.loss, m.rgb_l1, m.depth_l1)

    res = pretrain(cfg, cfg.out, progress=progress)
    print(f"checkpoint: {res.checkpoint}")
    if res.eval_history:
        e0, e1 = res.eval_history[0], res.eval_history[-1]
        print(f"held-out depth L1: {e0['depth_l1']:.4f} -> {e1['depth_l1']:.4f}")
    return EXIT_OK


def render_view(model, scene, view: int, points_per_ray: int, chunk: int = 2048):
    """Full-view RGB ``(H, W, 3)`` and depth ``(H, W)`` from unmasked inputs.

    Pixels whose ray misses the volume are black with depth 0.
    """
    rig = scene.rig
    H, W = rig.image_size
    frame = FrameInputs(rig)
    if model.uses_images:
        frame.images = np.stack([oracle_render_view(scene, v)[0] for v in range(rig.view_count)])
        frame.pixel_mask = np.zeros((rig.view_count, H, W), dtype=bool)
    if model.uses_points:
        frame.points = simulate_lidar(scene)
    vv, uu = np.meshgrid(np.arange(H) + 0.5, np.arange(W) + 0.5, indexing="ij")
    px = np.stack([np.full(H * W, float(view)), uu.ravel(), vv.ravel()], axis=-1)
    o, d, t0, t1, hit = rays_for_pixels(rig, px, model.bounds)
    rgb = np.zeros((H * W, 3))
    depth = np.zeros(H * W)
    idx = np.nonzero(hit)[0]
    with torch.no_grad():
        vol = model.build_volume(frame)
    for a in range(0, len(idx), chunk):
        sel = idx[a:a + chunk]
        t = sample_ray_points(t0[sel], t1[sel], points_per_ray, stratified=False)
        out = model.render(vol, o[sel], d[sel], t)
        rgb[sel] = out.rgb.detach().numpy()
        depth[sel] = out.depth.detach().numpy()
    return rgb.reshape(H, W, 3), depth.reshape(H, W)


def cmd_render(args) -> int:
    cfg = _run_config(args)
    entries = load_checkpoint(args.checkpoint)
    model = pipeline_from_meta(entries)
    params = dict(model.named_parameters())
    missing = sorted(set(params) - set(entries))
    if missing:
        raise ValidationError(f"checkpoint lacks parameters: {', '.join(missing)}")
    with torch.no_grad():
        for name, p in params.items():
            if tuple(p.shape) != entries[name].shape:
                raise ValidationError(f"{name}: checkpoint shape {entries[name].shape} != model {tuple(p.shape)}")
            p.copy_(torch.from_numpy(entries[name]))
    scene = load_scene(args.scene)
    scene.rig.view(args.view)
    rgb, depth = render_view(model, scene, args.view, cfg.rays.points_per_ray)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    write_ppm(out / f"render_view{args.view}_rgb.ppm", rgb)
    dmax = write_pgm_depth(out / f"render_view{args.view}_depth.pgm", depth, scene.bounds.diagonal)
    print(f"wrote {out}/render_view{args.view}_rgb.ppm and _depth.pgm (depth_max {dmax:.4f})")
    return EXIT_OK


def cmd_grad_check(args) -> int:
    cfg = load_config(args.config) if args.config else gradcheck_config()
    set_threads(args.threads or 0)
    start = time.perf_counter()
    rep = grad_check(cfg, seed=args.seed or 0, max_entries=None if args.all_entries else args.max_entries)
    secs = time.perf_counter() - start
    for name, err in rep.per_group.items():
        print(f"  {name:40s} max rel err {err:.3e}")
    status = "PASS" if rep.passed else "FAIL"
    print(f"grad-check {status}: max rel err {rep.max_rel_error:.3e} ({rep.worst_parameter}), "
          f"{rep.checked} entries, {secs:.1f} s")
    return EXIT_OK if rep.passed else EXIT_NUMERIC


def bench_configs(base: RunConfig, seed: int):
    """One config per strategy at the budget implied by the dilation interval."""
    H, W = base.suite.image_height, base.suite.image_width
    I = base.rays.interval
    k = max(1, H // I) * max(1, W // I)
    out = {}
    for strategy in STRATEGY_ORDER:
        rays = dataclasses.replace(base.rays, strategy=strategy, rays_per_view=k)
        out[strategy] = dataclasses.replace(base, rays=rays, seed=seed).validate()
    return k, out


def run_bench(base: RunConfig, seeds, out_dir: Path):
    """Train every (seed, strategy) pair; returns ``(per_seed_rows, summary_rows)``."""
    per_seed = []
    for seed in seeds:
        k, cfgs = bench_configs(base, seed)
        for strategy, cfg in cfgs.items():
            start = time.perf_counter()
            res = pretrain(cfg, out_dir / f"seed{seed}_{strategy}")
            secs = 0.0 if cfg.threads == 1 else time.perf_counter() - start
            last = res.eval_history[-1]
            per_seed.append((strategy, seed, k, last["depth_median"], last["rgb_l1"], res.peak_ray_buffer_bytes, secs))
            log.info("seed %d %-11s depth median %.4f rgb %.4f", seed, strategy, last["depth_median"], last["rgb_l1"])
    summary = []
    for strategy in STRATEGY_ORDER:
        rows = [r for r in per_seed if r[0] == strategy]
        summary.append((strategy, -1, rows[0][2], float(np.median([r[3] for r in rows])),
                        float(np.median([r[4] for r in rows])), max(r[5] for r in rows), sum(r[6] for r in rows)))
    return per_seed, summary


def ordering_wins(per_seed) -> int:
    """Seeds where depth-aware <= random <= dilation in held-out median depth L1."""
    wins = 0
    for seed in sorted({r[1] for r in per_seed}):
        d = {r[0]: r[3] for r in per_seed if r[1] == seed}
        wins += int(d["depth_aware"] <= d["random"] <= d["dilation"])
    return wins


def cmd_bench_sampling(args) -> int:
    base = _run_config(args)
    out = Path(base.out)
    out.mkdir(parents=True, exist_ok=True)
    seeds = [base.seed + i for i in range(args.seeds)]
    per_seed, summary = run_bench(base, seeds, out)
    write_csv(out / "bench_sampling.csv", BENCH_HEADER, [(r[0],) + r[1:] for r in summary])
    write_csv(out / "bench_sampling_seeds.csv", BENCH_HEADER, per_seed)
    for r in summary:
        print(f"{r[0]:12s} K={r[2]:4d} median depth L1 {r[3]:.4f}  rgb L1 {r[4]:.4f}  peak bytes {r[5]}")
    print(f"ordering depth_aware <= random <= dilation held in {ordering_wins(per_seed)}/{len(seeds)} seeds")
    return EXIT_OK


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML or JSON run config (unknown keys are an error)")
    common.add_argument("--seed", type=int, help="override the run seed")
    common.add_argument("--threads", type=int, help="torch threads; 1 gives bitwise-reproducible runs")
    common.add_argument("--out", help="output directory (nothing is written outside it)")
    common.add_argument("-v", "--verbose", action="store_true")

    p = _Parser(prog="maskvol", description="Masked volumetric pre-training on synthetic scenes.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen-scene", parents=[common], help="write scene files and oracle GT dumps")
    g.add_argument("--n", type=int, default=1, help="number of scenes")
    g.set_defaults(func=cmd_gen_scene)

    t = sub.add_parser("pretrain", parents=[common], help="run pre-training")
    t.set_defaults(func=cmd_pretrain)

    r = sub.add_parser("render", parents=[common], help="render one view from a checkpoint")
    r.add_argument("--checkpoint", required=True)
    r.add_argument("--scene", required=True)
    r.add_argument("--view", type=int, default=0)
    r.set_defaults(func=cmd_render)

    c = sub.add_parser("grad-check", parents=[common], help="finite-difference check of all gradients")
    c.add_argument("--max-entries", type=int, default=24, help="entries differenced per parameter tensor")
    c.add_argument("--all-entries", action="store_true", help="difference every entry")
    c.set_defaults(func=cmd_grad_check)

    b = sub.add_parser("bench-sampling", parents=[common], help="compare ray sampling strategies")
    b.add_argument("--seeds", type=int, default=5, help="number of seeds (run seed, seed+1, ...)")
    b.set_defaults(func=cmd_bench_sampling)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except MaskvolError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION


if __name__ == "__main__":
    sys.exit(main())
