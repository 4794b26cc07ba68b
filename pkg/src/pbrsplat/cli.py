"""Command-line entry point.

Exit codes: 0 success, 1 numerical failure (divergence, failed gradient
check), 2 usage or input error. All outputs land inside --out-dir.
"""

from __future__ import annotations

import argparse
import csv
import os
import sys

import numpy as np
import torch

from . import sceneio
from .config import SceneConfig, load_config
from .losses import eval_metrics
from .rasterize import splat_forward
from .raytrace import trace_image
from .scene import GaussianSet
from .shading import EnvironmentCubemap, deferred_shade, precompute_dfg
from .toys import TOY_NAMES, make_toy_scene, write_toy_scene_dir
from .trainer import (TrainScene, TrainingDiverged, gradcheck_suite, holdout_split,
                      render_view, report_ok, train)

USAGE_ERROR = 2
NUMERIC_ERROR = 1


def _common_flags(p):
    p.add_argument("--config", default=None, help="path to a key = value config file")
    p.add_argument("--seed", type=int, default=0, help="RNG seed")
    p.add_argument("--threads", type=int, default=os.cpu_count(),
                   help="tile worker threads (1 = fully serial)")
    p.add_argument("--out-dir", default="out", help="directory for all outputs")


def build_parser():
    ap = argparse.ArgumentParser(prog="pbrsplat",
                                 description="Differentiable Gaussian-disk renderer "
                                             "and trainer with deferred PBR.")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="optimize a scene from a config file")
    _common_flags(p)

    p = sub.add_parser("render", help="render final images from a checkpoint")
    _common_flags(p)
    p.add_argument("--checkpoint", required=True, help="checkpoint .npz")
    p.add_argument("--cameras", required=True, help="camera JSON file")
    p.add_argument("--no-raytrace", action="store_true",
                   help="skip the ray-traced indirect term")

    p = sub.add_parser("eval", help="PSNR/SSIM table for two image directories")
    _common_flags(p)
    p.add_argument("--renders", required=True, help="directory of rendered images")
    p.add_argument("--gt", required=True, help="directory of reference images")

    p = sub.add_parser("decompose", help="dump per-channel maps and env faces")
    _common_flags(p)
    p.add_argument("--checkpoint", required=True, help="checkpoint .npz")
    p.add_argument("--cameras", required=True, help="camera JSON file")
    p.add_argument("--frame", type=int, default=0, help="camera index to decompose")

    p = sub.add_parser("trace-debug", help="dump occlusion and indirect radiance maps")
    _common_flags(p)
    p.add_argument("--checkpoint", required=True, help="checkpoint .npz")
    p.add_argument("--cameras", required=True, help="camera JSON file")
    p.add_argument("--frame", type=int, default=0, help="camera index to trace")

    p = sub.add_parser("make-toy", help="generate a synthetic trainable scene")
    _common_flags(p)
    p.add_argument("--scene", required=True, choices=TOY_NAMES, help="toy scene name")
    p.add_argument("--size", type=int, default=64, help="image resolution")
    p.add_argument("--views", type=int, default=16, help="number of cameras")
    p.add_argument("--jitter", type=float, default=0.05,
                   help="position jitter of the training init, relative to disk scale")

    p = sub.add_parser("gradcheck", help="finite-difference check of all loss paths")
    _common_flags(p)
    p.add_argument("--corrupt-backward", action="store_true",
                   help="corrupt analytic gradients (self-test; must fail)")
    p.add_argument("--empty-scene", action="store_true",
                   help="run on an empty scene (degenerate no-op)")
    return ap


def _load_scene(cfg: SceneConfig) -> TrainScene:
    cams = sceneio.load_cameras(cfg.cameras)
    images = []
    for cam in cams:
        path = os.path.join(cfg.images_dir, cam.name + ".pfm")
        if not os.path.exists(path):
            path = os.path.join(cfg.images_dir, cam.name + ".png")
        images.append(sceneio.load_image(path, expect_size=(cam.width, cam.height)).data)
    normals = None
    if cfg.normals_dir and os.path.isdir(cfg.normals_dir):
        normals = [sceneio.load_image(os.path.join(cfg.normals_dir, cam.name + ".pfm")).data
                   for cam in cams]
    labels = None
    if cfg.labels_dir and os.path.isdir(cfg.labels_dir):
        labels = [sceneio.load_label_map(os.path.join(cfg.labels_dir, cam.name + ".png"))
                  for cam in cams]
    dtype = torch.float64 if cfg.dtype == "float64" else torch.float32
    with np.load(cfg.init_points) as z:
        init = GaussianSet.from_state_arrays({k: z[k] for k in z.files}, dtype=dtype)
    return TrainScene(cams=cams, images=images, gaussians=init,
                      normals_prior=normals, labels=labels,
                      background=tuple(cfg.background))


def _restore(checkpoint, dtype=torch.float64):
    ck = sceneio.load_checkpoint(checkpoint)
    gaussians = GaussianSet.from_state_arrays(ck["gaussians"], dtype=dtype)
    env = EnvironmentCubemap(torch.as_tensor(ck["env_base"], dtype=dtype))
    return gaussians, env, ck


def cmd_train(args):
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg.seed = args.seed
    cfg.threads = max(1, args.threads)
    scene = _load_scene(cfg)
    os.makedirs(args.out_dir, exist_ok=True)
    try:
        result = train(scene, cfg, out_dir=args.out_dir)
    except TrainingDiverged as e:
        print(f"training halted: {e}", file=sys.stderr)
        return NUMERIC_ERROR

    sceneio.save_checkpoint(os.path.join(args.out_dir, "checkpoint.npz"),
                            cfg.total_iters, result.gaussians,
                            result.env.base.detach().numpy(), result.optimizer)
    fields = ["iteration", "n_gaussians", "l_rgb", "l_dssim", "l_c", "l_nd", "l_n",
              "l_mv", "l_ref", "total", "psnr"]
    with open(os.path.join(args.out_dir, "metrics.csv"), "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=fields)
        w.writeheader()
        for row in result.logs:
            w.writerow({k: row.get(k, "") for k in fields})

    dfg = precompute_dfg(cfg.dfg_resolution)
    render_dir = os.path.join(args.out_dir, "holdout")
    os.makedirs(render_dir, exist_ok=True)
    with torch.no_grad():
        for i in result.test_idx:
            img, _ = render_view(result.gaussians, result.env, dfg, scene.cams[i],
                                 cfg, scene.background, use_pbr=True,
                                 threads=cfg.threads)
            sceneio.save_image(img.numpy(), os.path.join(render_dir,
                                                         scene.cams[i].name + ".pfm"))
    if result.metrics:
        print(f"held-out PSNR {result.metrics['psnr']:.2f} dB  "
              f"SSIM {result.metrics['ssim']:.4f}")
    return 0


def cmd_render(args):
    gaussians, env, _ = _restore(args.checkpoint)
    cams = sceneio.load_cameras(args.cameras)
    cfg = SceneConfig(raytrace=not args.no_raytrace, threads=max(1, args.threads))
    dfg = precompute_dfg(cfg.dfg_resolution)
    os.makedirs(args.out_dir, exist_ok=True)
    with torch.no_grad():
        for cam in cams:
            img, _ = render_view(gaussians, env, dfg, cam, cfg, cfg.background,
                                 use_pbr=True, threads=cfg.threads)
            sceneio.save_image(img.numpy(), os.path.join(args.out_dir, cam.name + ".png"))
            sceneio.save_image(img.numpy(), os.path.join(args.out_dir, cam.name + ".pfm"))
    return 0


def cmd_eval(args):
    def listing(d):
        return sorted(f for f in os.listdir(d) if f.lower().endswith((".png", ".pfm")))

    ra, gb = listing(args.renders), listing(args.gt)
    if [os.path.splitext(f)[0] for f in ra] != [os.path.splitext(f)[0] for f in gb]:
        print("error: render/gt filenames do not match", file=sys.stderr)
        return USAGE_ERROR
    if not ra:
        print("error: no images to evaluate", file=sys.stderr)
        return USAGE_ERROR
    renders = [sceneio.load_image(os.path.join(args.renders, f)).data for f in ra]
    gts = [sceneio.load_image(os.path.join(args.gt, f)).data for f in gb]
    m = eval_metrics(renders, gts)
    w = csv.writer(sys.stdout)
    w.writerow(["image", "psnr", "ssim"])
    for f, p, s in zip(ra, m["per_image_psnr"], m["per_image_ssim"]):
        w.writerow([f, f"{p:.4f}", f"{s:.6f}"])
    w.writerow(["mean", f"{m['psnr']:.4f}", f"{m['ssim']:.6f}"])
    return 0


def _frame_camera(args):
    cams = sceneio.load_cameras(args.cameras)
    if not (0 <= args.frame < len(cams)):
        raise ValueError(f"frame {args.frame} out of range (0..{len(cams) - 1})")
    return cams[args.frame]


def cmd_decompose(args):
    gaussians, env, _ = _restore(args.checkpoint)
    cam = _frame_camera(args)
    cfg = SceneConfig(threads=max(1, args.threads))
    dfg = precompute_dfg(cfg.dfg_resolution)
    os.makedirs(args.out_dir, exist_ok=True)
    with torch.no_grad():
        gbuf = splat_forward(gaussians, cam, threads=cfg.threads)
        incident = trace_image(gaussians, gbuf, cam)
        img, parts = deferred_shade(gbuf, cam, env, dfg, incident, cfg.background,
                                    return_parts=True)
        dumps = {
            "diffuse": gbuf.diffuse, "albedo": gbuf.albedo, "metallic": gbuf.metallic,
            "roughness": gbuf.roughness, "normal": 0.5 * (gbuf.normal + 1.0),
            "depth": gbuf.depth, "alpha": gbuf.alpha,
            "occlusion": parts["occlusion"], "indirect": parts["indirect"],
            "specular": parts["specular"], "diffuse_term": parts["diffuse_term"],
            "final": img,
        }
        for name, tensor in dumps.items():
            sceneio.save_image(tensor.numpy(), os.path.join(args.out_dir, f"{name}.pfm"))
        sceneio.save_env_faces(env.base.detach().numpy(), args.out_dir)
    return 0


def cmd_trace_debug(args):
    gaussians, env, _ = _restore(args.checkpoint)
    cam = _frame_camera(args)
    cfg = SceneConfig(threads=max(1, args.threads))
    os.makedirs(args.out_dir, exist_ok=True)
    with torch.no_grad():
        gbuf = splat_forward(gaussians, cam, threads=cfg.threads)
        l_ind, occ = trace_image(gaussians, gbuf, cam)
        sceneio.save_image(occ.numpy(), os.path.join(args.out_dir, "occlusion.pfm"))
        sceneio.save_image(l_ind.numpy(), os.path.join(args.out_dir, "indirect.pfm"))
    return 0


def cmd_make_toy(args):
    toy = make_toy_scene(args.scene, size=args.size, n_views=args.views,
                         seed=args.seed, threads=max(1, args.threads))
    cfg_path = write_toy_scene_dir(toy, args.out_dir, jitter=args.jitter,
                                   seed=args.seed,
                                   config_overrides={"seed": args.seed})
    print(f"wrote {args.scene} scene; config at {cfg_path}")
    return 0


def cmd_gradcheck(args):
    if args.empty_scene:
        print("no parameters to check (empty scene)")
        return 0
    corruption = 0.02 if args.corrupt_backward else 0.0
    reports = gradcheck_suite(corruption=corruption, verbose=True)
    ok = all(report_ok(r) for r in reports.values())
    worst = max(v["worst_rel"] for r in reports.values() for v in r.values())
    print(f"gradcheck {'PASS' if ok else 'FAIL'} (worst relative error {worst:.2e})")
    return 0 if ok else NUMERIC_ERROR


def main(argv=None):
    ap = build_parser()
    try:
        args = ap.parse_args(argv)
    except SystemExit as e:
        return USAGE_ERROR if e.code not in (0, None) else 0
    torch.set_num_threads(1)  # tile-level parallelism only, for determinism
    torch.manual_seed(args.seed)
    np.random.seed(args.seed % (2 ** 32))
    handlers = {"train": cmd_train, "render": cmd_render, "eval": cmd_eval,
                "decompose": cmd_decompose, "trace-debug": cmd_trace_debug,
                "make-toy": cmd_make_toy, "gradcheck": cmd_gradcheck}
    try:
        return handlers[args.command](args)
    except (FileNotFoundError, ValueError, sceneio.CheckpointVersionError) as e:
        print(f"error: {e}", file=sys.stderr)
        return USAGE_ERROR


if __name__ == "__main__":
    sys.exit(main())
