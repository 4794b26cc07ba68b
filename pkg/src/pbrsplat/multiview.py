"""Multi-view material machinery.

* plane-induced homography warps between calibrated views
* material consistency loss over warped 7x7 patches
* photometric reflection scores (3x3 patches, per-pixel std across views)
* spatial fusion of scores through a hash-grid ball query
* region-gated one-sided reflection strength loss

Warp geometry (depth, normal) is always treated as constant: the priors
are precomputed offline and the consistency loss only differentiates the
sampled material values.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .rasterize import GBuffer
from .scene import Camera

MIN_NORMAL_RAY_DOT = 0.05
OCCLUSION_REL_TOL = 0.02


@dataclass
class ReflectionPriorMap:
    """Per-view fused reflection weights and the gated metallic target."""

    w_ref: np.ndarray   # (H,W) >= 0
    gamma: np.ndarray   # (H,W) in {0,1}
    M0: np.ndarray      # (H,W) target metallic
    view: str = ""


@dataclass
class ScorePointCloud:
    points: np.ndarray    # (P,3) world
    scores: np.ndarray    # (P,)
    view_ids: np.ndarray  # (P,)


def homography(cam_i: Camera, cam_j: Camera, pixel, depth, normal_cam_i):
    """Plane-induced pixel homography from view i to view j.

    The tangent plane passes through the back-projection of `pixel` at
    z-depth `depth` with camera-i-space normal `normal_cam_i`. Returns
    None when the plane is viewed near edge-on (|n . ray| <= 0.05).
    """
    if depth <= 0:
        return None
    n = np.asarray(normal_cam_i, dtype=np.float64)
    u, v = float(pixel[0]), float(pixel[1])
    d = np.array([(u - cam_i.cx) / cam_i.fx, (v - cam_i.cy) / cam_i.fy, 1.0])
    if abs(n @ d) / np.linalg.norm(d) <= MIN_NORMAL_RAY_DOT:
        return None
    same = (cam_i.R == cam_j.R).all() and (cam_i.t == cam_j.t).all() \
        and (cam_i.fx, cam_i.fy, cam_i.cx, cam_i.cy) == (cam_j.fx, cam_j.fy, cam_j.cx, cam_j.cy)
    if same:
        return np.eye(3)
    X0 = depth * d
    c = float(n @ X0)  # plane: n . X = c in camera-i coordinates
    if abs(c) < 1e-12:
        return None
    R_ij = cam_j.R @ cam_i.R.T
    T_ij = cam_j.t - R_ij @ cam_i.t
    Ki_inv = np.array([[1.0 / cam_i.fx, 0.0, -cam_i.cx / cam_i.fx],
                       [0.0, 1.0 / cam_i.fy, -cam_i.cy / cam_i.fy],
                       [0.0, 0.0, 1.0]])
    H = cam_j.K @ (R_ij + np.outer(T_ij, n) / c) @ Ki_inv
    return H


def apply_homography(H, uv):
    """(...,2) pixel coords -> warped (...,2); rows with w<=0 become NaN.

    `H` is (...,3,3) with leading dims broadcasting against `uv`'s.
    """
    uv = np.asarray(uv, dtype=np.float64)
    ones = np.ones((*uv.shape[:-1], 1))
    uvh = np.concatenate([uv, ones], axis=-1)
    p = np.einsum("...ij,...j->...i", np.asarray(H, dtype=np.float64), uvh)
    w = p[..., 2:3]
    with np.errstate(divide="ignore", invalid="ignore"):
        out = p[..., :2] / w
    out = np.where(w > 0, out, np.nan)
    return out


def patch_offsets(side):
    r = side // 2
    dv, du = np.meshgrid(np.arange(-r, r + 1), np.arange(-r, r + 1), indexing="ij")
    return np.stack([du.reshape(-1), dv.reshape(-1)], axis=-1).astype(np.float64)


def bilinear_sample(tex: torch.Tensor, uv):
    """Differentiable bilinear taps; returns (values, in_bounds mask).

    `tex` is (H,W) or (H,W,C); `uv` is (...,2) pixel coordinates with
    pixel centers at integers. Out-of-bounds taps return 0 and are
    flagged in the mask.
    """
    squeeze = tex.ndim == 2
    if squeeze:
        tex = tex[..., None]
    H, W, C = tex.shape
    uv_t = torch.as_tensor(np.nan_to_num(np.asarray(uv), nan=-1e6), dtype=tex.dtype)
    u = uv_t[..., 0]
    v = uv_t[..., 1]
    inb = (u >= 0) & (u <= W - 1) & (v >= 0) & (v <= H - 1)
    u = u.clamp(0, W - 1)
    v = v.clamp(0, H - 1)
    x0 = u.floor().long().clamp(0, max(W - 2, 0))
    y0 = v.floor().long().clamp(0, max(H - 2, 0))
    wx = (u - x0).clamp(0.0, 1.0)[..., None]
    wy = (v - y0).clamp(0.0, 1.0)[..., None]
    flat = tex.reshape(-1, C)
    x1 = (x0 + 1).clamp(max=W - 1)
    y1 = (y0 + 1).clamp(max=H - 1)
    v00 = flat[y0 * W + x0]
    v10 = flat[y0 * W + x1]
    v01 = flat[y1 * W + x0]
    v11 = flat[y1 * W + x1]
    out = (v00 * (1 - wx) * (1 - wy) + v10 * wx * (1 - wy)
           + v01 * (1 - wx) * wy + v11 * wx * wy)
    out = out * inb[..., None]
    if squeeze:
        out = out[..., 0]
    return out, inb


def _patch_centers(gbuf: GBuffer, cam: Camera, stride):
    """Stride-grid pixel centers with valid depth and usable normals."""
    H, W = gbuf.alpha.shape
    with torch.no_grad():
        valid = gbuf.valid_depth.numpy()
        n_cam = gbuf.normal_cam.numpy()
    dirs = cam.pixel_dirs_cam().numpy().reshape(H, W, 3)
    dn = np.abs((n_cam * dirs).sum(-1)) / np.linalg.norm(dirs, axis=-1)
    ok = valid & (dn > MIN_NORMAL_RAY_DOT) & (np.linalg.norm(n_cam, axis=-1) > 0.5)
    vv, uu = np.meshgrid(np.arange(H), np.arange(W), indexing="ij")
    r = 3  # keep 7x7 source patches inside the image
    sel = ok & (uu >= r) & (uu < W - r) & (vv >= r) & (vv < H - r) \
        & (uu % stride == 0) & (vv % stride == 0)
    return np.stack([uu[sel], vv[sel]], axis=-1)


def _warp_centers(centers, ref_gbuf, ref_cam, src_cam):
    """Per-center homographies plus the occlusion-check geometry."""
    with torch.no_grad():
        depth = ref_gbuf.depth.numpy()
        n_cam = ref_gbuf.normal_cam.numpy()
    Hs = np.zeros((len(centers), 3, 3))
    valid = np.zeros(len(centers), dtype=bool)
    z_src = np.zeros(len(centers))
    for k, (u, v) in enumerate(centers):
        d = float(depth[v, u])
        Hk = homography(ref_cam, src_cam, (u, v), d, n_cam[v, u])
        if Hk is None:
            continue
        Hs[k] = Hk
        valid[k] = True
        dir_i = np.array([(u - ref_cam.cx) / ref_cam.fx, (v - ref_cam.cy) / ref_cam.fy, 1.0])
        Xw = ref_cam.cam_to_world(d * dir_i)
        z_src[k] = src_cam.world_to_cam(Xw)[2]
    return Hs, valid, z_src


def warp_patch(src_map: torch.Tensor, H, center, side):
    """Warped patch values sampled from `src_map`; (values, all-taps-valid)."""
    taps = np.asarray(center, dtype=np.float64)[None] + patch_offsets(side)
    warped = apply_homography(H, taps)
    vals, inb = bilinear_sample(src_map, warped)
    return vals, bool(inb.all())


def material_mv_loss(ref_gbuf: GBuffer, src_gbufs, ref_cam: Camera, src_cams,
                     patch=7, stride=4, return_parts=False):
    """Mean squared patch difference on diffuse/roughness/metallic maps.

    Averaged over the three map types; albedo is excluded. Returns 0 with
    a zero gradient when no valid reference-source pair exists.
    """
    dtype = ref_gbuf.alpha.dtype
    centers = _patch_centers(ref_gbuf, ref_cam, stride)
    terms = {"diffuse": [], "roughness": [], "metallic": []}
    offs = patch_offsets(patch)
    if len(centers) > 0:
        ref_maps = {"diffuse": ref_gbuf.diffuse, "roughness": ref_gbuf.roughness,
                    "metallic": ref_gbuf.metallic}
        taps_ref = centers[:, None, :].astype(np.float64) + offs[None]
        for src_gbuf, src_cam in zip(src_gbufs, src_cams):
            Hs, hvalid, z_src = _warp_centers(centers, ref_gbuf, ref_cam, src_cam)
            warped = apply_homography(Hs[:, None], taps_ref)
            ctr = warped[:, (patch * patch) // 2, :]
            with torch.no_grad():
                d_src, inb_c = bilinear_sample(src_gbuf.depth, ctr)
                vd_src, _ = bilinear_sample(src_gbuf.valid_depth.to(dtype), ctr)
                d_src = d_src.numpy()
                occl_ok = (np.abs(d_src - z_src) <= OCCLUSION_REL_TOL * np.abs(d_src)) \
                    & inb_c.numpy() & (vd_src.numpy() > 0.999)
            pair_ok = hvalid & occl_ok
            if not pair_ok.any():
                continue
            idx = np.nonzero(pair_ok)[0]
            for name, ref_map in ref_maps.items():
                ref_vals, _ = bilinear_sample(ref_map, taps_ref[idx])
                src_vals, inb = bilinear_sample(src_gbuf.channels()[name], warped[idx])
                good = inb.all(dim=1)
                if not bool(good.any()):
                    continue
                diff = (ref_vals[good] - src_vals[good]) ** 2
                terms[name].append(diff.reshape(len(diff), -1).mean(dim=1))
    parts = {}
    for name, chunks in terms.items():
        if chunks:
            parts[name] = torch.cat(chunks).mean()
        else:
            parts[name] = torch.zeros((), dtype=dtype)
    loss = (parts["diffuse"] + parts["roughness"] + parts["metallic"]) / 3.0
    if return_parts:
        return loss, parts
    return loss


def luminance_normalize(img: np.ndarray, window=31) -> np.ndarray:
    """Divide by windowed mean luminance; channel ratios are preserved."""
    img = np.asarray(img, dtype=np.float64)
    lum = img.mean(axis=-1)
    r = window // 2
    pad = np.pad(lum, r, mode="reflect")
    integral = np.zeros((pad.shape[0] + 1, pad.shape[1] + 1))
    integral[1:, 1:] = pad.cumsum(0).cumsum(1)
    H, W = lum.shape
    s = (integral[window:window + H, window:window + W]
         - integral[window:window + H, 0:W]
         - integral[0:H, window:window + W] + integral[0:H, 0:W])
    mean = s / (window * window)
    return img / np.clip(mean, 1e-3, None)[..., None]


def reflection_score(ref_idx, cams, images, gbufs, n_near=4, patch=3) -> np.ndarray:
    """Per-pixel photometric variation of `ref_idx` against its near views.

    `images` must already be luminance-normalized. Population standard
    deviation across the aligned patch stack, averaged over 3x3 patch
    positions and channels; zero wherever any warp is invalid.
    """
    ref_cam = cams[ref_idx]
    H, W = images[ref_idx].shape[:2]
    centers = np.indices((H, W))[::-1].reshape(2, -1).T  # (P,2) as (u,v)
    offs = patch_offsets(patch)

    dists = [np.linalg.norm(c.center - ref_cam.center) for c in cams]
    order = [i for i in np.argsort(dists, kind="stable") if i != ref_idx][:n_near]

    ref_img = torch.as_tensor(images[ref_idx])
    taps = centers[:, None, :].astype(np.float64) + offs[None]
    stacks = [bilinear_sample(ref_img, taps)[0].numpy()]
    valid = np.ones(len(centers), dtype=bool)
    with torch.no_grad():
        valid &= gbufs[ref_idx].valid_depth.numpy().reshape(-1)
    for j in order:
        Hs, hvalid, z_src = _warp_centers(centers, gbufs[ref_idx], ref_cam, cams[j])
        warped = apply_homography(Hs[:, None], taps)
        vals, inb = bilinear_sample(torch.as_tensor(images[j]), warped)
        valid &= hvalid & inb.all(dim=1).numpy()
        stacks.append(vals.numpy())
    stack = np.stack(stacks)  # (M+1, P, taps, C)
    std = stack.std(axis=0)   # population std across views
    score = std.mean(axis=(1, 2))
    score[~valid] = 0.0
    return score.reshape(H, W)


class HashGrid:
    """Uniform spatial hash over 3D points; cell edge equals the query radius."""

    def __init__(self, points: np.ndarray, cell: float):
        self.points = np.asarray(points, dtype=np.float64)
        self.cell = max(float(cell), 1e-12)
        keys = np.floor(self.points / self.cell).astype(np.int64)
        self.table: dict[tuple, np.ndarray] = {}
        if len(keys):
            order = np.lexsort(keys.T)
            sk = keys[order]
            splits = np.nonzero((sk[1:] != sk[:-1]).any(axis=1))[0] + 1
            for chunk in np.split(order, splits):
                self.table[tuple(keys[chunk[0]])] = chunk

    def query_ball(self, q: np.ndarray, radius: float) -> np.ndarray:
        """Indices of points within `radius` of q."""
        base = np.floor(q / self.cell).astype(np.int64)
        cand = []
        for dx in (-1, 0, 1):
            for dy in (-1, 0, 1):
                for dz in (-1, 0, 1):
                    c = self.table.get((base[0] + dx, base[1] + dy, base[2] + dz))
                    if c is not None:
                        cand.append(c)
        if not cand:
            return np.zeros(0, dtype=np.int64)
        cand = np.concatenate(cand)
        d2 = ((self.points[cand] - q) ** 2).sum(axis=1)
        return cand[d2 <= radius * radius]


def build_score_cloud(score_maps, gbufs, cams) -> ScorePointCloud:
    """Back-project every valid-depth pixel's score into world space."""
    pts, sc, vid = [], [], []
    for i, (smap, gbuf, cam) in enumerate(zip(score_maps, gbufs, cams)):
        with torch.no_grad():
            valid = gbuf.valid_depth.numpy().reshape(-1)
            depth = gbuf.depth.numpy().reshape(-1)
        dirs = cam.pixel_dirs_cam().numpy()
        Xc = depth[:, None] * dirs
        Xw = cam.cam_to_world(Xc)
        pts.append(Xw[valid])
        sc.append(np.asarray(smap).reshape(-1)[valid])
        vid.append(np.full(int(valid.sum()), i))
    if not pts:
        return ScorePointCloud(np.zeros((0, 3)), np.zeros(0), np.zeros(0, dtype=int))
    return ScorePointCloud(np.concatenate(pts), np.concatenate(sc), np.concatenate(vid))


def fuse_scores(score_maps, gbufs, cams, radius, top_k=8):
    """Ball-query fusion: per pixel, mean of the top-K scores in the ball.

    Returns one fused w_ref map per view. Pixels with no neighbors in
    the ball (or no valid depth) get 0.
    """
    cloud = build_score_cloud(score_maps, gbufs, cams)
    grid = HashGrid(cloud.points, radius) if len(cloud.points) else None
    out = []
    for gbuf, cam in zip(gbufs, cams):
        H, W = gbuf.alpha.shape
        fused = np.zeros(H * W)
        with torch.no_grad():
            valid = gbuf.valid_depth.numpy().reshape(-1)
            depth = gbuf.depth.numpy().reshape(-1)
        if grid is not None and valid.any():
            dirs = cam.pixel_dirs_cam().numpy()
            Xw = cam.cam_to_world(depth[:, None] * dirs)
            for p in np.nonzero(valid)[0]:
                idx = grid.query_ball(Xw[p], radius)
                if len(idx) == 0:
                    continue
                s = cloud.scores[idx]
                k = min(top_k, len(s))
                fused[p] = np.mean(np.partition(s, len(s) - k)[len(s) - k:])
        out.append(fused.reshape(H, W))
    return out, cloud


def derive_gate_and_target(w_ref, labels, metallic_map, tau_ref=0.1, delta=0.2,
                           floor_m=0.5):
    """Region-level gate and metallic target from the fused prior.

    Label 0 is background and is never gated. Returns (gamma, M0) maps.
    """
    w_ref = np.asarray(w_ref)
    gamma = np.zeros_like(w_ref)
    M0 = np.zeros_like(w_ref)
    if labels is None:
        return gamma, M0
    labels = np.asarray(labels)
    metallic = np.asarray(metallic_map)
    for region in np.unique(labels):
        if region == 0:
            continue
        sel = labels == region
        if w_ref[sel].mean() > tau_ref:
            gamma[sel] = 1.0
            M0[sel] = min(max(metallic[sel].mean() + delta, floor_m), 1.0)
    return gamma, M0


def reflection_loss(metallic_map: torch.Tensor, gamma, M0, w_ref) -> torch.Tensor:
    """One-sided gated pull toward the target metallic; mean over pixels."""
    dtype = metallic_map.dtype
    g = torch.as_tensor(np.asarray(gamma), dtype=dtype)
    m0 = torch.as_tensor(np.asarray(M0), dtype=dtype)
    w = torch.as_tensor(np.asarray(w_ref), dtype=dtype)
    deficit = (m0 - metallic_map).clamp(min=0.0)
    return (w * g * deficit).mean()
