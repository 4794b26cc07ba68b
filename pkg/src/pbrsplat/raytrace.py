"""BVH-accelerated ray tracing over Gaussian disks.

Each disk contributes two triangle proxies spanning its +-3 sigma extent;
the BVH stores axis-aligned boxes over those triangles. The actual hit
predicate is the exact ray-plane intersection evaluated in the disk's
local frame (the triangles only bound it), with an elliptical 3 sigma
cutoff and the 1/255 weight cutoff shared with the rasterizer.

Gradients propagate through compositing weights and colors only; the
intersection geometry (t, rho) is treated as constant in backward.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .rasterize import GBuffer, WEIGHT_CUTOFF
from .scene import Camera, GaussianSet

RAY_OFFSET = 1e-3
RHO_MAX_SQ = 9.0


@dataclass
class RayHitList:
    """Hits sorted by ascending ray parameter."""

    t: np.ndarray        # (M,)
    index: np.ndarray    # (M,) gaussian indices
    weight: np.ndarray   # (M,) opacity * exp(-rho^2 / 2)
    rho2: np.ndarray     # (M,)

    def __len__(self):
        return len(self.t)

    @classmethod
    def empty(cls):
        z = np.zeros(0)
        return cls(z, np.zeros(0, dtype=np.int64), z.copy(), z.copy())


def _disk_frames(gs: GaussianSet):
    """Detached numpy snapshot of disk geometry and opacity."""
    with torch.no_grad():
        return {
            "mu": gs.positions.detach().numpy().astype(np.float64),
            "tu": gs.rotations[:, :, 0].detach().numpy().astype(np.float64),
            "tv": gs.rotations[:, :, 1].detach().numpy().astype(np.float64),
            "n": gs.normals.detach().numpy().astype(np.float64),
            "s": gs.scales.detach().numpy().astype(np.float64),
            "o": gs.opacity.detach().numpy().astype(np.float64),
        }


class DiskBVH:
    """Median-split BVH over disk triangle proxies (structure-of-arrays)."""

    LEAF_SIZE = 4

    def __init__(self, gs: GaussianSet):
        f = _disk_frames(gs)
        self.frames = f
        # opacity below the weight cutoff can never produce a reportable hit
        active = np.nonzero(f["o"] >= WEIGHT_CUTOFF)[0]
        self.active = active
        n_tri = 2 * len(active)
        if n_tri == 0:
            self.bmin = np.zeros((1, 3))
            self.bmax = np.zeros((1, 3))
            self.left = np.array([-1])
            self.right = np.array([-1])
            self.leaf_start = np.array([0])
            self.leaf_count = np.array([0])
            self.tri_gaussian = np.zeros(0, dtype=np.int64)
            return

        mu, tu, tv, s = f["mu"][active], f["tu"][active], f["tv"][active], f["s"][active]
        eu = 3.0 * s[:, 0:1] * tu
        ev = 3.0 * s[:, 1:2] * tv
        corners = np.stack([mu - eu - ev, mu + eu - ev, mu + eu + ev, mu - eu + ev], axis=1)
        tris = np.concatenate([corners[:, [0, 1, 2]], corners[:, [0, 2, 3]]])  # (2K,3,3)
        self.tri_gaussian = np.concatenate([active, active])
        tlo = tris.min(axis=1)
        tmax = tris.max(axis=1)
        eps = 1e-9 * (1.0 + np.abs(tmax) + np.abs(tlo))
        tlo -= eps
        tmax += eps
        cent = 0.5 * (tlo + tmax)

        bmin, bmax, left, right, lstart, lcount = [], [], [], [], [], []
        self._tri_order = np.arange(n_tri)

        def build(lo, hi):
            node = len(bmin)
            sel = self._tri_order[lo:hi]
            bmin.append(tlo[sel].min(axis=0))
            bmax.append(tmax[sel].max(axis=0))
            left.append(-1)
            right.append(-1)
            lstart.append(lo)
            lcount.append(hi - lo)
            if hi - lo <= self.LEAF_SIZE:
                return node
            axis = int(np.argmax(bmax[node] - bmin[node]))
            mid = (lo + hi) // 2
            order = np.argsort(cent[sel, axis], kind="stable")
            self._tri_order[lo:hi] = sel[order]
            left[node] = build(lo, mid)
            right[node] = build(mid, hi)
            lcount[node] = 0
            return node

        build(0, n_tri)
        self.bmin = np.asarray(bmin)
        self.bmax = np.asarray(bmax)
        self.left = np.asarray(left)
        self.right = np.asarray(right)
        self.leaf_start = np.asarray(lstart)
        self.leaf_count = np.asarray(lcount)

    @property
    def n_nodes(self):
        return len(self.bmin)


def build_bvh(gs: GaussianSet) -> DiskBVH:
    return DiskBVH(gs)


def _disk_hit(frames, g, origin, direction, t_min):
    """Exact disk predicate; returns (t, weight, rho2) or None.

    Written with the same elementwise-multiply-and-sum arithmetic as the
    vectorized brute-force path so both produce bit-identical values.
    """
    n = frames["n"][g]
    denom = float((direction * n).sum())
    if abs(denom) < 1e-12:
        return None
    t = float(((frames["mu"][g] - origin) * n).sum()) / denom
    if t <= t_min:
        return None
    d = origin + t * direction - frames["mu"][g]
    qu = float((d * frames["tu"][g]).sum()) / frames["s"][g, 0]
    qv = float((d * frames["tv"][g]).sum()) / frames["s"][g, 1]
    rho2 = qu * qu + qv * qv
    if rho2 > RHO_MAX_SQ:
        return None
    w = frames["o"][g] * float(np.exp(np.float64(-0.5 * rho2)))
    if w < WEIGHT_CUTOFF:
        return None
    return t, w, rho2


def intersect_ray(bvh: DiskBVH, origin, direction, t_min=1e-6) -> RayHitList:
    """All disk hits along the ray, sorted ascending by t."""
    origin = np.asarray(origin, dtype=np.float64)
    direction = np.asarray(direction, dtype=np.float64)
    if len(bvh.tri_gaussian) == 0:
        return RayHitList.empty()

    big = 1e300
    with np.errstate(divide="ignore"):
        inv = np.where(np.abs(direction) > 1e-300, 1.0 / direction, big)
    hits = {}
    stack = [0]
    bmin, bmax = bvh.bmin, bvh.bmax
    while stack:
        node = stack.pop()
        t0 = (bmin[node] - origin) * inv
        t1 = (bmax[node] - origin) * inv
        tn = np.minimum(t0, t1).max()
        tf = np.maximum(t0, t1).min()
        if tn > tf or tf < t_min:
            continue
        if bvh.left[node] < 0:
            lo = bvh.leaf_start[node]
            for tri in bvh._tri_order[lo:lo + bvh.leaf_count[node]]:
                g = int(bvh.tri_gaussian[tri])
                if g in hits:
                    continue
                h = _disk_hit(bvh.frames, g, origin, direction, t_min)
                if h is not None:
                    hits[g] = h
        else:
            stack.append(int(bvh.right[node]))
            stack.append(int(bvh.left[node]))

    if not hits:
        return RayHitList.empty()
    idx = np.fromiter(hits.keys(), dtype=np.int64)
    arr = np.array([hits[g] for g in idx])
    order = np.lexsort((idx, arr[:, 0]))
    return RayHitList(t=arr[order, 0], index=idx[order],
                      weight=arr[order, 1], rho2=arr[order, 2])


def brute_force_intersect(gs: GaussianSet, origin, direction, t_min=1e-6) -> RayHitList:
    """Reference enumeration over every disk (no acceleration structure)."""
    f = _disk_frames(gs)
    origin = np.asarray(origin, dtype=np.float64)
    direction = np.asarray(direction, dtype=np.float64)
    denom = (direction[None] * f["n"]).sum(axis=1)
    ok = np.abs(denom) >= 1e-12
    denom_safe = np.where(ok, denom, 1.0)
    t = ((f["mu"] - origin) * f["n"]).sum(axis=1) / denom_safe
    ok &= t > t_min
    d = origin[None] + t[:, None] * direction[None] - f["mu"]
    qu = (d * f["tu"]).sum(1) / f["s"][:, 0]
    qv = (d * f["tv"]).sum(1) / f["s"][:, 1]
    rho2 = qu * qu + qv * qv
    ok &= rho2 <= RHO_MAX_SQ
    w = f["o"] * np.exp(-0.5 * np.where(ok, rho2, 0.0))
    ok &= w >= WEIGHT_CUTOFF
    idx = np.nonzero(ok)[0]
    if len(idx) == 0:
        return RayHitList.empty()
    order = np.lexsort((idx, t[idx]))
    idx = idx[order]
    return RayHitList(t=t[idx], index=idx, weight=w[idx], rho2=rho2[idx])


def trace_indirect(gs: GaussianSet, bvh: DiskBVH, origin, direction, t_min=1e-6):
    """(L_indirect, O) along one ray; differentiable in colors and opacity.

    Empty hit lists return exactly (0, 0); the residual color rides the
    same compositing weights as the diffuse term, so it also vanishes on
    unoccluded rays.
    """
    hits = intersect_ray(bvh, origin, direction, t_min)
    dtype = gs.dtype
    if len(hits) == 0:
        return torch.zeros(3, dtype=dtype), torch.zeros((), dtype=dtype)
    g_fall = torch.as_tensor(np.exp(-0.5 * hits.rho2), dtype=dtype)
    idx = torch.as_tensor(hits.index)
    w = gs.opacity[idx] * g_fall
    color = gs.diffuse[idx] + gs.residual[idx]
    L = torch.zeros(3, dtype=dtype)
    occ = torch.zeros((), dtype=dtype)
    trans = torch.ones((), dtype=dtype)
    for k in range(len(hits)):
        c = w[k] * trans
        L = L + color[k] * c
        occ = occ + c
        trans = trans * (1.0 - w[k])
    return L, occ


def trace_rays_batch(gs: GaussianSet, origins, dirs, t_min=1e-6):
    """Non-differentiable vectorized (L_indirect, O) for many rays (numpy)."""
    f = _disk_frames(gs)
    with torch.no_grad():
        cd = gs.diffuse.detach().numpy().astype(np.float64)
        cr = gs.residual.detach().numpy().astype(np.float64)
    origins = np.asarray(origins, dtype=np.float64)
    dirs = np.asarray(dirs, dtype=np.float64)
    Q = len(origins)
    N = len(f["mu"])
    if N == 0:
        return np.zeros((Q, 3)), np.zeros(Q)
    denom = dirs @ f["n"].T
    ok = np.abs(denom) >= 1e-12
    t = (((f["mu"][None] - origins[:, None]) * f["n"][None]).sum(-1)
         / np.where(ok, denom, 1.0))
    ok &= t > t_min
    p = origins[:, None] + t[..., None] * dirs[:, None]
    d = p - f["mu"][None]
    qu = (d * f["tu"][None]).sum(-1) / f["s"][:, 0][None]
    qv = (d * f["tv"][None]).sum(-1) / f["s"][:, 1][None]
    rho2 = qu * qu + qv * qv
    ok &= rho2 <= RHO_MAX_SQ
    w = f["o"][None] * np.exp(-0.5 * np.where(ok, rho2, 0.0))
    ok &= w >= WEIGHT_CUTOFF
    w = np.where(ok, w, 0.0)
    key = np.where(ok, t, np.inf)
    order = np.argsort(key, axis=1, kind="stable")
    w_s = np.take_along_axis(w, order, axis=1)
    trans = np.cumprod(1.0 - w_s, axis=1)
    t_excl = np.concatenate([np.ones((Q, 1)), trans[:, :-1]], axis=1)
    contrib = w_s * t_excl
    col = cd + cr
    col_s = col[order]
    L = (contrib[..., None] * col_s).sum(axis=1)
    occ = contrib.sum(axis=1)
    return L, occ


def trace_image(gs: GaussianSet, gbuf: GBuffer, cam: Camera, t_min=1e-6,
                ray_offset=RAY_OFFSET):
    """Per-pixel (L_indirect, O) for mirror-reflected rays off the G-buffer.

    Ray geometry comes from detached depth/normals; pixels without valid
    depth get exactly (0, 0). A pixel's own >1% G-buffer contributors are
    masked out of its reflected ray (self-hit exclusion).
    """
    dtype = gs.dtype
    H, W = gbuf.alpha.shape
    L_out = torch.zeros(H, W, 3, dtype=dtype)
    O_out = torch.zeros(H, W, dtype=dtype)
    sel = gbuf.valid_depth.reshape(-1).nonzero(as_tuple=True)[0]
    if len(sel) == 0 or len(gs) == 0:
        return L_out, O_out

    R, t_cam = cam.torch_Rt(dtype)
    with torch.no_grad():
        dirs_cam = cam.pixel_dirs_cam(dtype)[sel]
        depth = gbuf.depth.detach().reshape(-1)[sel]
        n = gbuf.normal.detach().reshape(-1, 3)[sel]
        X_cam = depth[:, None] * dirs_cam
        X_w = (X_cam - t_cam) @ R
        rays_w = dirs_cam @ R
        rays_w = rays_w / rays_w.norm(dim=-1, keepdim=True)
        w_o = -rays_w
        refl = 2.0 * (w_o * n).sum(-1, keepdim=True) * n - w_o
        refl = refl / refl.norm(dim=-1, keepdim=True).clamp(min=1e-12)
        origins = X_w + ray_offset * n

        # conservative scene box; rays that miss it cannot hit any disk
        ext = 3.0 * gs.scales.detach().max()
        box_lo = gs.positions.detach().min(dim=0).values - ext
        box_hi = gs.positions.detach().max(dim=0).values + ext
        inv = torch.where(refl.abs() > 1e-12, 1.0 / refl,
                          torch.full_like(refl, 1e30))
        t0 = (box_lo - origins) * inv
        t1 = (box_hi - origins) * inv
        t_near = torch.minimum(t0, t1).max(dim=1).values
        t_far = torch.maximum(t0, t1).min(dim=1).values
        may_hit = (t_near <= t_far) & (t_far > t_min)
        keep_rays = may_hit.nonzero(as_tuple=True)[0]
        if len(keep_rays) == 0:
            return L_out, O_out
        sel = sel[keep_rays]
        origins = origins[keep_rays]
        refl = refl[keep_rays]

        mu = gs.positions.detach()
        rot = gs.rotations.detach()
        tu, tv, nrm = rot[:, :, 0], rot[:, :, 1], rot[:, :, 2]
        s = gs.scales.detach()
        denom = refl @ nrm.T
        ok = denom.abs() >= 1e-12
        tt = (((mu[None] - origins[:, None]) * nrm[None]).sum(-1)
              / torch.where(ok, denom, torch.ones_like(denom)))
        ok &= tt > t_min
        p = origins[:, None] + tt[..., None] * refl[:, None]
        d = p - mu[None]
        qu = (d * tu[None]).sum(-1) / s[:, 0][None]
        qv = (d * tv[None]).sum(-1) / s[:, 1][None]
        rho2 = qu * qu + qv * qv
        ok &= rho2 <= RHO_MAX_SQ
        falloff = torch.exp(-0.5 * torch.where(ok, rho2, torch.zeros_like(rho2)))
        ok &= ~gbuf.source_mask[sel]  # self-hit exclusion
        o_now = gs.opacity.detach()
        ok &= (o_now[None] * falloff) >= WEIGHT_CUTOFF
        falloff = torch.where(ok, falloff, torch.zeros_like(falloff))
        key = torch.where(ok, tt, torch.full_like(tt, float("inf")))
        order = torch.argsort(key, dim=1, stable=True)
        fall_s = torch.gather(falloff, 1, order)

    w_s = gs.opacity[order] * fall_s
    trans = torch.cumprod(1.0 - w_s, dim=1)
    t_excl = torch.cat([torch.ones_like(trans[:, :1]), trans[:, :-1]], dim=1)
    contrib = w_s * t_excl
    color = gs.diffuse + gs.residual
    L = torch.stack([(contrib * color[:, c][order]).sum(1) for c in range(3)], dim=1)
    occ = contrib.sum(1)

    L_out = L_out.reshape(-1, 3).index_put((sel,), L).reshape(H, W, 3)
    O_out = O_out.reshape(-1).index_put((sel,), occ).reshape(H, W)
    return L_out, O_out
