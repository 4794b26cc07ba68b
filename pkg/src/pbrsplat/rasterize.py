"""Differentiable forward splatting of disk attributes into screen-space buffers.

Per pixel, the camera ray is intersected with each disk's plane and the
Gaussian falloff is evaluated in the disk's local 2D frame (exact
intersection, no 2D-covariance approximation). A screen-space low-pass
floor keeps sub-pixel disks from losing their gradients.

Compositing is front-to-back over per-pixel intersection depth. All
reductions run in depth-sorted order, so permuting the input Gaussian
list leaves every output buffer bit-identical (for distinct depths).
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import torch

from .scene import Camera, GaussianSet, stable_exp

WEIGHT_CUTOFF = 1.0 / 255.0
TRANSMIT_FLOOR = 1e-4
LOWPASS_SIGMA = 0.3
NEAR_PLANE = 0.01
ALPHA_DEPTH_THRESH = 0.2


@dataclass
class ProjectedSplat:
    mean2d: torch.Tensor      # (2,) pixel coords of projected disk center
    cov2d: torch.Tensor       # (2,2) affine-projected covariance (no low-pass)
    conic: torch.Tensor       # (2,2) inverse of low-passed covariance
    depth: float              # camera z of the disk center
    plane_normal: torch.Tensor  # (3,) disk normal, camera space
    plane_offset: float       # n . mu, camera space

    @property
    def radius_px(self):
        a, b, c = self.cov2d[0, 0], self.cov2d[0, 1], self.cov2d[1, 1]
        mid = 0.5 * (a + c)
        disc = torch.sqrt(torch.clamp((0.5 * (a - c)) ** 2 + b * b, min=0.0))
        return torch.sqrt(torch.clamp(mid + disc, min=0.0))


@dataclass
class GBuffer:
    """Rasterized per-pixel maps; material channels are alpha-premultiplied."""

    diffuse: torch.Tensor    # (H,W,3)
    albedo: torch.Tensor     # (H,W)
    metallic: torch.Tensor   # (H,W)
    roughness: torch.Tensor  # (H,W)
    depth: torch.Tensor      # (H,W), alpha-normalized z-depth, 0 where invalid
    normal: torch.Tensor     # (H,W,3) world space, unit length or zero
    normal_cam: torch.Tensor  # (H,W,3) camera space
    alpha: torch.Tensor      # (H,W)
    valid_depth: torch.Tensor  # (H,W) bool, alpha above threshold
    source_mask: torch.Tensor  # (H*W, N) bool, contributed > 1% of pixel alpha

    def channels(self):
        return {"diffuse": self.diffuse, "albedo": self.albedo,
                "metallic": self.metallic, "roughness": self.roughness,
                "depth": self.depth, "normal": self.normal, "alpha": self.alpha}


def _prepare_splats(gs: GaussianSet, cam: Camera, near=NEAR_PLANE):
    """Camera-space disk frames plus screen-space footprint statistics."""
    dtype = gs.dtype
    R, t = cam.torch_Rt(dtype)
    mu_c = gs.positions @ R.T + t                       # (N,3)
    axes = torch.einsum("ij,njk->nik", R, gs.rotations)  # columns: tu, tv, n
    s = gs.scales                                        # (N,2)
    z = mu_c[:, 2]
    front = (z > near).detach()

    zs = torch.where(front, z, torch.ones_like(z))
    x, y = mu_c[:, 0], mu_c[:, 1]
    u0 = cam.fx * x / zs + cam.cx
    v0 = cam.fy * y / zs + cam.cy

    # J: d(pixel)/d(cam point), evaluated at the disk center
    inv_z = 1.0 / zs
    J = torch.zeros((len(gs), 2, 3), dtype=dtype)
    J[:, 0, 0] = cam.fx * inv_z
    J[:, 0, 2] = -cam.fx * x * inv_z * inv_z
    J[:, 1, 1] = cam.fy * inv_z
    J[:, 1, 2] = -cam.fy * y * inv_z * inv_z
    tangents = axes[:, :, :2] * s[:, None, :]           # (N,3,2)
    M = torch.einsum("nij,njk->nik", J, tangents)       # (N,2,2)
    cov2d = M @ M.transpose(1, 2)

    cov_lp = cov2d + (LOWPASS_SIGMA ** 2) * torch.eye(2, dtype=dtype)
    det = cov_lp[:, 0, 0] * cov_lp[:, 1, 1] - cov_lp[:, 0, 1] ** 2
    conic = torch.stack([
        torch.stack([cov_lp[:, 1, 1], -cov_lp[:, 0, 1]], -1),
        torch.stack([-cov_lp[:, 0, 1], cov_lp[:, 0, 0]], -1)], 1) / det[:, None, None]

    mid = 0.5 * (cov_lp[:, 0, 0] + cov_lp[:, 1, 1])
    disc = torch.sqrt(torch.clamp((0.5 * (cov_lp[:, 0, 0] - cov_lp[:, 1, 1])) ** 2
                                  + cov_lp[:, 0, 1] ** 2, min=0.0))
    radius = 3.0 * torch.sqrt(torch.clamp(mid + disc, min=1e-12))

    with torch.no_grad():
        # the low-pass floor only has to act on footprints whose smallest
        # 1-sigma extent falls under LOWPASS_SIGMA pixels
        mid_raw = 0.5 * (cov2d[:, 0, 0] + cov2d[:, 1, 1])
        disc_raw = torch.sqrt(torch.clamp((0.5 * (cov2d[:, 0, 0] - cov2d[:, 1, 1])) ** 2
                                          + cov2d[:, 0, 1] ** 2, min=0.0))
        needs_lp = (mid_raw - disc_raw) < LOWPASS_SIGMA ** 2
        on_image = ((u0 + radius >= 0) & (u0 - radius <= cam.width - 1)
                    & (v0 + radius >= 0) & (v0 - radius <= cam.height - 1))
    valid = front & on_image
    return {"mu_c": mu_c, "axes": axes, "scales": s, "u0": u0, "v0": v0,
            "cov2d": cov2d, "conic": conic, "radius": radius, "valid": valid,
            "needs_lp": needs_lp}


def project_gaussian(gs: GaussianSet, index: int, cam: Camera, near=NEAR_PLANE):
    """Screen-space splat for one disk, or None when culled."""
    pre = _prepare_splats(gs, cam, near)
    if not bool(pre["valid"][index]):
        return None
    i = index
    n = pre["axes"][i, :, 2]
    return ProjectedSplat(
        mean2d=torch.stack([pre["u0"][i], pre["v0"][i]]).detach(),
        cov2d=pre["cov2d"][i].detach(),
        conic=pre["conic"][i].detach(),
        depth=float(pre["mu_c"][i, 2]),
        plane_normal=n.detach(),
        plane_offset=float((n * pre["mu_c"][i]).sum()),
    )


def _splat_band(gs, cam, pre, idx, rows, near):
    """Composite one horizontal band of rows. Returns per-pixel tensors."""
    dtype = gs.dtype
    H, W = cam.height, cam.width
    r0, r1 = rows
    P = (r1 - r0) * W
    zero_cols = {
        "ch6": torch.zeros(P, 6, dtype=dtype), "nrm": torch.zeros(P, 3, dtype=dtype),
        "depth": torch.zeros(P, dtype=dtype), "alpha": torch.zeros(P, dtype=dtype),
        "mask": torch.zeros(P, len(gs), dtype=torch.bool),
    }
    if len(idx) == 0:
        return zero_cols

    dirs = cam.pixel_dirs_cam(dtype).reshape(H, W, 3)[r0:r1].reshape(-1, 3)
    u_pix, v_pix = cam.pixel_grid(dtype)
    u_pix = u_pix.reshape(H, W)[r0:r1].reshape(-1)
    v_pix = v_pix.reshape(H, W)[r0:r1].reshape(-1)

    mu = pre["mu_c"][idx]
    axes = pre["axes"][idx]
    s = pre["scales"][idx]
    tu, tv, nrm = axes[:, :, 0], axes[:, :, 1], axes[:, :, 2]
    o = gs.opacity[idx]

    denom = dirs @ nrm.T                                # (P,K)
    numer = (mu * nrm).sum(-1)                          # (K,)
    ok = denom.detach().abs() > 1e-12
    denom_safe = torch.where(ok, denom, torch.ones_like(denom))
    t_hit = numer[None, :] / denom_safe
    ok = ok & (t_hit.detach() > near)
    t_safe = torch.where(ok, t_hit, torch.ones_like(t_hit))

    # local disk coordinates of the ray-plane intersection, in sigma units
    du = dirs @ tu.T
    dv = dirs @ tv.T
    u_loc = (t_safe * du - (mu * tu).sum(-1)[None, :]) / s[None, :, 0]
    v_loc = (t_safe * dv - (mu * tv).sum(-1)[None, :]) / s[None, :, 1]
    rho2 = u_loc ** 2 + v_loc ** 2

    # screen-space low-pass floor, only for sub-pixel footprints
    lp_cols = pre["needs_lp"][idx].nonzero(as_tuple=True)[0]
    if len(lp_cols):
        sub = idx[lp_cols]
        dx = u_pix[:, None] - pre["u0"][sub][None, :]
        dy = v_pix[:, None] - pre["v0"][sub][None, :]
        con = pre["conic"][sub]
        rho2_lp = con[:, 0, 0][None] * dx * dx + 2 * con[:, 0, 1][None] * dx * dy \
            + con[:, 1, 1][None] * dy * dy
        rho2 = rho2.index_copy(
            1, lp_cols, torch.minimum(rho2.index_select(1, lp_cols), rho2_lp))
    G = stable_exp(-0.5 * rho2)

    w = o[None, :] * G
    keep = ok & (w.detach() >= WEIGHT_CUTOFF)
    w = torch.where(keep, w, torch.zeros_like(w))
    if not bool(keep.any()):
        return zero_cols

    sort_key = torch.where(keep, t_safe.detach(), torch.full_like(t_safe, float("inf")))
    order = torch.argsort(sort_key, dim=1, stable=True)
    w_s = torch.gather(w, 1, order)
    trans = torch.cumprod(1.0 - w_s, dim=1)
    t_excl = torch.cat([torch.ones_like(trans[:, :1]), trans[:, :-1]], dim=1)
    alive = (t_excl.detach() >= TRANSMIT_FLOOR)
    contrib = w_s * t_excl * alive

    # attribute values gathered into the same depth order
    scalars = torch.stack([gs.diffuse[idx, 0], gs.diffuse[idx, 1], gs.diffuse[idx, 2],
                           gs.albedo[idx], gs.metallic[idx], gs.roughness[idx]], dim=1)
    ch6 = torch.stack([(contrib * scalars[:, c][order]).sum(1) for c in range(6)], dim=1)

    flip = -torch.sign(denom.detach())
    flip_s = torch.gather(flip, 1, order)
    nrm_blend = torch.stack([(contrib * flip_s * nrm[:, c][order]).sum(1)
                             for c in range(3)], dim=1)
    depth_blend = (contrib * torch.gather(t_safe, 1, order)).sum(1)
    alpha = contrib.sum(1)

    with torch.no_grad():
        frac = torch.zeros_like(w).scatter_(1, order, contrib)
        mask = torch.zeros(P, len(gs), dtype=torch.bool)
        mask[:, idx] = frac > 0.01 * alpha.detach().clamp(min=1e-12)[:, None]
    return {"ch6": ch6, "nrm": nrm_blend, "depth": depth_blend, "alpha": alpha,
            "mask": mask}


def splat_forward(gs: GaussianSet, cam: Camera, *, threads=1, band_height=16,
                  near=NEAR_PLANE) -> GBuffer:
    """Rasterize every attribute channel in one pass."""
    dtype = gs.dtype
    H, W = cam.height, cam.width
    pre = _prepare_splats(gs, cam, near)
    valid_idx = pre["valid"].nonzero(as_tuple=True)[0]

    with torch.no_grad():
        v0 = pre["v0"][valid_idx]
        rad = pre["radius"][valid_idx]

    bands = [(r0, min(r0 + band_height, H)) for r0 in range(0, H, band_height)]

    def band_indices(rows):
        r0, r1 = rows
        hit = (v0 + rad >= r0) & (v0 - rad <= r1 - 1)
        return valid_idx[hit]

    def run(rows):
        return _splat_band(gs, cam, pre, band_indices(rows), rows, near)

    if threads > 1 and len(bands) > 1:
        with ThreadPoolExecutor(max_workers=threads) as ex:
            parts = list(ex.map(run, bands))
    else:
        parts = [run(b) for b in bands]

    ch6 = torch.cat([p["ch6"] for p in parts]).reshape(H, W, 6)
    nrm = torch.cat([p["nrm"] for p in parts]).reshape(H, W, 3)
    depth_blend = torch.cat([p["depth"] for p in parts]).reshape(H, W)
    alpha = torch.cat([p["alpha"] for p in parts]).reshape(H, W)
    source_mask = torch.cat([p["mask"] for p in parts])

    valid_depth = (alpha.detach() > ALPHA_DEPTH_THRESH)
    depth = torch.where(valid_depth, depth_blend / alpha.clamp(min=1e-12),
                        torch.zeros_like(depth_blend))

    nlen = nrm.norm(dim=-1, keepdim=True)
    has_n = nlen.detach() > 1e-8
    normal_cam = torch.where(has_n, nrm / nlen.clamp(min=1e-12), torch.zeros_like(nrm))
    R, _ = cam.torch_Rt(dtype)
    normal_world = normal_cam @ R  # R^T applied row-wise

    return GBuffer(diffuse=ch6[..., 0:3], albedo=ch6[..., 3], metallic=ch6[..., 4],
                   roughness=ch6[..., 5], depth=depth, normal=normal_world,
                   normal_cam=normal_cam, alpha=alpha, valid_depth=valid_depth,
                   source_mask=source_mask)


def splat_backward(gs: GaussianSet, cam: Camera, upstream: dict, *, threads=1):
    """Per-Gaussian raw-parameter gradients for given per-pixel upstream grads.

    `upstream` maps GBuffer channel names to arrays of the channel's shape;
    missing channels are treated as zero.
    """
    live = gs.detach_clone(requires_grad=True)
    gbuf = splat_forward(live, cam, threads=threads)
    chans = gbuf.channels()
    outputs, grads_out = [], []
    for name, tensor in chans.items():
        if name in upstream and upstream[name] is not None:
            up = torch.as_tensor(upstream[name], dtype=tensor.dtype)
            if up.shape != tensor.shape:
                raise ValueError(f"upstream {name} has shape {tuple(up.shape)}, "
                                 f"expected {tuple(tensor.shape)}")
            if not torch.isfinite(up).all():
                raise ValueError(f"upstream {name} contains non-finite values")
            outputs.append(tensor)
            grads_out.append(up)
    params = live.parameters()
    if not outputs:
        return {k: torch.zeros_like(v) for k, v in params.items()}
    grads = torch.autograd.grad(outputs, list(params.values()), grad_outputs=grads_out,
                                allow_unused=True)
    return {k: (g if g is not None else torch.zeros_like(v))
            for (k, v), g in zip(params.items(), grads)}


def render_normal_from_depth(depth: torch.Tensor, cam: Camera) -> torch.Tensor:
    """Camera-space normals from central differences of back-projected depth.

    Zero where the 3-neighborhood has invalid (<= 0 or non-finite) depth.
    The result faces the camera (negative z for a fronto-parallel plane).
    """
    dtype = depth.dtype
    H, W = depth.shape
    good = torch.isfinite(depth.detach()) & (depth.detach() > 0)
    d = torch.where(good, depth, torch.zeros_like(depth))
    dirs = cam.pixel_dirs_cam(dtype).reshape(H, W, 3)
    X = d[..., None] * dirs

    dXu = torch.zeros_like(X)
    dXv = torch.zeros_like(X)
    dXu[:, 1:-1] = 0.5 * (X[:, 2:] - X[:, :-2])
    dXv[1:-1, :] = 0.5 * (X[2:, :] - X[:-2, :])

    valid = torch.zeros_like(good)
    valid[1:-1, 1:-1] = (good[1:-1, 1:-1] & good[1:-1, 2:] & good[1:-1, :-2]
                         & good[2:, 1:-1] & good[:-2, 1:-1])

    n = -torch.linalg.cross(dXu, dXv)
    ln = n.norm(dim=-1, keepdim=True)
    ok = valid[..., None] & (ln.detach() > 1e-12)
    return torch.where(ok, n / ln.clamp(min=1e-12), torch.zeros_like(n))


def composite_over_background(premult_rgb, alpha, background):
    """Alpha-composite a premultiplied rendering over a constant background."""
    bg = torch.as_tensor(background, dtype=premult_rgb.dtype)
    return premult_rgb + (1.0 - alpha)[..., None] * bg
