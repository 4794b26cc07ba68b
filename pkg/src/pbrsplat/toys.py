"""Deterministic synthetic scenes with analytically known geometry.

Ground-truth images are produced by this package's own forward renderer
from the true parameters, so a trainer starting from a perturbed
initialization has an exact, self-consistent reconstruction target.

Scenes:
  plane-mirror : mirror disk grid (metallic 1, roughness 0.05) inside a
                 matte textured border, under a 4-color gradient cubemap
  sphere-glossy: glossy sphere (metallic 0.7, roughness 0.3)
  occluder-box : mirror floor plus a matte box that occludes part of the
                 mirror direction (exercises ray-traced indirect light)
"""

from __future__ import annotations

import dataclasses
import math
import os
from dataclasses import dataclass

import numpy as np
import torch

from .config import SceneConfig
from .scene import Camera, GaussianSet
from .shading import EnvironmentCubemap, cubemap_texel_directions, precompute_dfg
from .rasterize import splat_forward
from .trainer import TrainScene, render_view

TOY_NAMES = ("plane-mirror", "sphere-glossy", "occluder-box")


@dataclass
class ToyScene:
    name: str
    scene: TrainScene             # gaussians field holds the TRUE parameters
    env_true: EnvironmentCubemap
    normals_world: list           # analytic world normal per view (H,W,3), 0 = none


def look_at(eye, target, up=(0.0, 0.0, 1.0)):
    eye = np.asarray(eye, dtype=np.float64)
    z = np.asarray(target, dtype=np.float64) - eye
    z = z / np.linalg.norm(z)
    x = np.cross(z, np.asarray(up, dtype=np.float64))
    n = np.linalg.norm(x)
    if n < 1e-9:
        x = np.cross(z, [0.0, 1.0, 0.0])
        n = np.linalg.norm(x)
    x = x / n
    y = np.cross(z, x)
    R = np.stack([x, y, z])
    return R, -R @ eye


def ring_cameras(n_views, size, radius, height, target=(0, 0, 0), fov_scale=0.85):
    cams = []
    f = fov_scale * size
    for i in range(n_views):
        az = 2.0 * math.pi * i / n_views
        eye = (radius * math.cos(az), radius * math.sin(az), height)
        R, t = look_at(eye, target)
        cams.append(Camera(fx=f, fy=f, cx=(size - 1) / 2.0, cy=(size - 1) / 2.0,
                           R=R, t=t, width=size, height=size, name=f"frame_{i:03d}"))
    return cams


def gradient_env(size=64, dtype=torch.float64) -> EnvironmentCubemap:
    """Smooth 4-color gradient cubemap (values inside [0.05, 0.95])."""
    dirs = cubemap_texel_directions(size)
    u = 0.5 * (dirs[..., 0] + 1.0)
    v = 0.5 * (dirs[..., 2] + 1.0)
    c1 = np.array([0.9, 0.25, 0.15])
    c2 = np.array([0.15, 0.8, 0.3])
    c3 = np.array([0.2, 0.3, 0.9])
    c4 = np.array([0.9, 0.85, 0.2])
    img = ((1 - u)[..., None] * (1 - v)[..., None] * c1
           + u[..., None] * (1 - v)[..., None] * c2
           + (1 - u)[..., None] * v[..., None] * c3
           + u[..., None] * v[..., None] * c4)
    return EnvironmentCubemap(torch.as_tensor(np.clip(img, 0.05, 0.95), dtype=dtype))


def _grid_disks(extent, spacing, z=0.0):
    xs = np.arange(-extent, extent + 1e-9, spacing)
    gx, gy = np.meshgrid(xs, xs, indexing="xy")
    pos = np.stack([gx.reshape(-1), gy.reshape(-1), np.full(gx.size, z)], axis=-1)
    return pos


def _plane_groups(spacing=0.22, mirror_extent=1.0, ring_extent=1.44):
    mirror = _grid_disks(mirror_extent, spacing)
    ring_all = _grid_disks(ring_extent, spacing)
    keep = np.max(np.abs(ring_all[:, :2]), axis=1) > mirror_extent + spacing / 2
    return mirror, ring_all[keep]


def _checker_colors(pos, scale=3.0):
    k = np.floor(pos[:, 0] * scale) + np.floor(pos[:, 1] * scale)
    base = np.where((k % 2 == 0)[:, None], [0.75, 0.6, 0.3], [0.25, 0.35, 0.55])
    return base


def _fibonacci_sphere(n, radius):
    i = np.arange(n, dtype=np.float64)
    phi = math.pi * (3.0 - math.sqrt(5.0)) * i
    z = 1.0 - 2.0 * (i + 0.5) / n
    r = np.sqrt(np.clip(1.0 - z * z, 0.0, 1.0))
    pts = np.stack([r * np.cos(phi), r * np.sin(phi), z], axis=-1)
    return radius * pts, pts


def _box_faces(center, half, spacing):
    """Disk grids on all six faces of an axis-aligned box."""
    center = np.asarray(center, dtype=np.float64)
    pos, nrm = [], []
    ticks = np.arange(-half + spacing / 2, half, spacing)
    gu, gv = np.meshgrid(ticks, ticks, indexing="xy")
    gu = gu.reshape(-1)
    gv = gv.reshape(-1)
    for axis in range(3):
        for sign in (-1.0, 1.0):
            n = np.zeros(3)
            n[axis] = sign
            face_pts = np.zeros((gu.size, 3))
            face_pts[:, axis] = sign * half
            other = [a for a in range(3) if a != axis]
            face_pts[:, other[0]] = gu
            face_pts[:, other[1]] = gv
            pos.append(center + face_pts)
            nrm.append(np.tile(n, (gu.size, 1)))
    return np.concatenate(pos), np.concatenate(nrm)


def _build_gaussians(groups, dtype):
    """groups: list of (positions, normals, scale, material dict) tuples."""
    sets = []
    group_slices = []
    start = 0
    for positions, normals, scale, matset in groups:
        gs = GaussianSet.create(positions, normals, scale, dtype=dtype, **matset)
        sets.append(gs)
        group_slices.append((start, start + len(gs)))
        start += len(gs)
    merged = GaussianSet(**{k: torch.cat([getattr(s, k) for s in sets])
                            for k in GaussianSet.PARAM_NAMES})
    return merged, group_slices


def _render_ground_truth(gaussians, env, cams, background, threads=1):
    cfg = SceneConfig(raytrace=True, threads=threads)
    dfg = precompute_dfg(cfg.dfg_resolution)
    images = []
    with torch.no_grad():
        for cam in cams:
            img, _ = render_view(gaussians, env, dfg, cam, cfg, background,
                                 use_pbr=True, threads=threads)
            images.append(img.numpy())
    return images


def _group_labels(gaussians, group_slices, cams):
    """Per-view region labels from each group's dominant coverage."""
    labels = []
    with torch.no_grad():
        for cam in cams:
            alphas = []
            for (a, b) in group_slices:
                sub = GaussianSet(**{k: getattr(gaussians, k)[a:b]
                                     for k in GaussianSet.PARAM_NAMES})
                alphas.append(splat_forward(sub, cam).alpha.numpy())
            stack = np.stack(alphas)
            lab = np.zeros(stack.shape[1:], dtype=np.int64)
            covered = stack.max(axis=0) > 0.5
            lab[covered] = stack.argmax(axis=0)[covered] + 1
            labels.append(lab)
    return labels


def _analytic_plane_normals(cams, labels):
    """Camera-space unit normals of the z=0 plane wherever labeled."""
    out_cam, out_world = [], []
    for cam, lab in zip(cams, labels):
        n_world = np.array([0.0, 0.0, 1.0])
        n_cam = cam.R @ n_world
        full_cam = np.zeros((cam.height, cam.width, 3))
        full_world = np.zeros((cam.height, cam.width, 3))
        mask = lab > 0
        full_cam[mask] = n_cam * np.sign(-n_cam[2])  # face the camera
        full_world[mask] = n_world
        out_cam.append(full_cam)
        out_world.append(full_world)
    return out_cam, out_world


def make_toy_scene(name, *, size=64, n_views=16, env_size=64, seed=0,
                   dtype=torch.float64, threads=1) -> ToyScene:
    """Deterministic toy scene; see module docstring for the catalog."""
    if name not in TOY_NAMES:
        raise ValueError(f"unknown toy scene {name!r}; choose from {TOY_NAMES}")
    env = gradient_env(env_size, dtype=dtype)
    background = (0.02, 0.02, 0.02)
    rng = np.random.default_rng(seed)

    if name == "plane-mirror":
        mirror, ring = _plane_groups()
        groups = [
            (mirror, np.tile([0, 0, 1.0], (len(mirror), 1)), 0.17,
             dict(opacity=0.97, metallic=1.0, roughness=0.05, albedo=1.0,
                  diffuse=(0.5, 0.5, 0.5))),
            (ring, np.tile([0, 0, 1.0], (len(ring), 1)), 0.17,
             dict(opacity=0.97, metallic=0.0, roughness=0.8, albedo=0.5)),
        ]
        gaussians, slices = _build_gaussians(groups, dtype)
        with torch.no_grad():
            a, b = slices[1]
            gaussians.diffuse_raw[a:b] = torch.as_tensor(
                np.log(_checker_colors(ring) / (1 - _checker_colors(ring))), dtype=dtype)
        cams = ring_cameras(n_views, size, radius=2.4, height=1.9)
        labels = None
    elif name == "sphere-glossy":
        pts, nrm = _fibonacci_sphere(256, 0.8)
        cd = 0.25 + 0.5 * (nrm + 1.0) / 2.0
        groups = [(pts, nrm, 0.135,
                   dict(opacity=0.97, metallic=0.7, roughness=0.3, albedo=0.9))]
        gaussians, slices = _build_gaussians(groups, dtype)
        with torch.no_grad():
            gaussians.diffuse_raw[:] = torch.as_tensor(np.log(cd / (1 - cd)), dtype=dtype)
        cams = ring_cameras(n_views, size, radius=2.6, height=1.1)
        labels = None
    else:  # occluder-box
        floor = _grid_disks(1.2, 0.22)
        box_pos, box_nrm = _box_faces((0.5, 0.0, 0.42), 0.28, 0.12)
        groups = [
            (floor, np.tile([0, 0, 1.0], (len(floor), 1)), 0.17,
             dict(opacity=0.97, metallic=1.0, roughness=0.05, albedo=1.0,
                  diffuse=(0.5, 0.5, 0.5))),
            (box_pos, box_nrm, 0.1,
             dict(opacity=0.97, metallic=0.0, roughness=0.8, albedo=0.5,
                  diffuse=(0.8, 0.25, 0.2))),
        ]
        gaussians, slices = _build_gaussians(groups, dtype)
        cams = ring_cameras(n_views, size, radius=2.6, height=1.7)
        labels = None

    labels = _group_labels(gaussians, slices, cams)
    if name == "sphere-glossy":
        normals_cam = None
        normals_world = [np.zeros((size, size, 3))] * n_views
    else:
        normals_cam, normals_world = _analytic_plane_normals(cams, labels)

    images = _render_ground_truth(gaussians, env, cams, background, threads=threads)
    scene = TrainScene(cams=cams, images=images, gaussians=gaussians,
                       normals_prior=normals_cam, labels=labels, background=background)
    return ToyScene(name=name, scene=scene, env_true=env, normals_world=normals_world)


def perturb_for_training(gaussians: GaussianSet, jitter=0.05, seed=0,
                         metallic=0.0, roughness=0.5, albedo=0.5,
                         diffuse=(0.5, 0.5, 0.5), residual=1e-4) -> GaussianSet:
    """Training initialization: positions jittered by `jitter` x disk scale,
    material attributes reset to the mid-range defaults."""
    from .scene import logit, softplus_inv
    rng = np.random.default_rng(seed)
    out = gaussians.detach_clone()
    dtype = out.dtype
    with torch.no_grad():
        scale_mean = out.scales.mean(dim=1, keepdim=True)
        noise = torch.as_tensor(rng.normal(size=(len(out), 3)), dtype=dtype)
        out.positions += jitter * scale_mean * noise
        out.diffuse_raw[:] = torch.as_tensor(logit(diffuse), dtype=dtype)
        out.albedo_raw[:] = float(logit(albedo))
        out.metallic_raw[:] = float(logit(metallic))
        out.roughness_raw[:] = float(logit(roughness))
        out.residual_raw[:] = float(softplus_inv(residual))
    return out


def write_toy_scene_dir(toy: ToyScene, out_dir, *, jitter=0.05, seed=0,
                        config_overrides=None):
    """Write a trainable scene directory (cameras, images, labels, priors,
    true env faces, perturbed init, config)."""
    from . import sceneio
    os.makedirs(out_dir, exist_ok=True)
    os.makedirs(os.path.join(out_dir, "images"), exist_ok=True)
    os.makedirs(os.path.join(out_dir, "labels"), exist_ok=True)
    scene = toy.scene
    sceneio.save_cameras(os.path.join(out_dir, "cameras.json"), scene.cams)
    for cam, img in zip(scene.cams, scene.images):
        sceneio.save_image(img, os.path.join(out_dir, "images", cam.name + ".pfm"))
    for cam, lab in zip(scene.cams, scene.labels):
        sceneio.save_label_map(lab, os.path.join(out_dir, "labels", cam.name + ".png"))
    if scene.normals_prior is not None:
        os.makedirs(os.path.join(out_dir, "normals"), exist_ok=True)
        for cam, nm in zip(scene.cams, scene.normals_prior):
            sceneio.save_image(nm, os.path.join(out_dir, "normals", cam.name + ".pfm"))
    sceneio.save_env_faces(toy.env_true.base.detach().numpy(), out_dir, prefix="env_true")

    init = perturb_for_training(scene.gaussians, jitter=jitter, seed=seed)
    np.savez(os.path.join(out_dir, "init_points.npz"), **init.state_arrays())

    from .config import save_config
    cfg = SceneConfig(normals_dir="normals",
                      labels_dir="labels" if scene.labels is not None else "",
                      background=tuple(float(x) for x in scene.background))
    if config_overrides:
        cfg = dataclasses.replace(cfg, **config_overrides)
    save_config(cfg, os.path.join(out_dir, "config.cfg"))
    return os.path.join(out_dir, "config.cfg")
