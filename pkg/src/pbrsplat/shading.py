"""Deferred physically based shading.

Microfacet model: GGX normal distribution with alpha = roughness^2,
height-correlated Smith shadowing-masking, Schlick Fresnel with
F0 = 0.04 * (1 - metallic) + albedo * metallic broadcast to RGB.

The specular integral is split into a pre-integrated BRDF look-up table
(F0-affine: scale and bias) and a prefiltered environment query over a
box-filtered mip chain indexed by roughness.
"""

from __future__ import annotations

import math

import numpy as np
import torch
import torch.nn.functional as F

from .rasterize import GBuffer
from .scene import Camera

ALPHA_MIN = 1e-4


def _alpha_sq(roughness):
    a = roughness * roughness
    if torch.is_tensor(a):
        return a.clamp(min=ALPHA_MIN)
    return max(a, ALPHA_MIN)


def ggx_D(n_dot_h, roughness):
    """GGX normal distribution; integrates to 1 against (n.h) over the hemisphere."""
    alpha = _alpha_sq(roughness)
    a2 = alpha * alpha
    nh2 = n_dot_h * n_dot_h
    denom = nh2 * (a2 - 1.0) + 1.0
    return a2 / (math.pi * denom * denom)


def fresnel_f0(albedo, metallic):
    return 0.04 * (1.0 - metallic) + albedo * metallic


def fresnel_F(cos_theta, F0):
    """Schlick approximation; F(1) = F0, F(0) = 1."""
    if torch.is_tensor(cos_theta) or torch.is_tensor(F0):
        cos_theta = torch.as_tensor(cos_theta)
        return F0 + (1.0 - F0) * (1.0 - cos_theta) ** 5
    return F0 + (1.0 - np.asarray(F0)) * (1.0 - cos_theta) ** 5


def smith_G(n_dot_v, n_dot_l, roughness):
    """Height-correlated Smith term for GGX; symmetric in its cosines."""
    alpha = _alpha_sq(roughness)
    a2 = alpha * alpha
    if torch.is_tensor(n_dot_v) or torch.is_tensor(n_dot_l):
        nv = torch.as_tensor(n_dot_v).clamp(min=ALPHA_MIN)
        nl = torch.as_tensor(n_dot_l).clamp(min=ALPHA_MIN)
        lv = torch.sqrt(nv * nv * (1.0 - a2) + a2)
        ll = torch.sqrt(nl * nl * (1.0 - a2) + a2)
    else:
        nv = max(n_dot_v, ALPHA_MIN)
        nl = max(n_dot_l, ALPHA_MIN)
        lv = math.sqrt(nv * nv * (1.0 - a2) + a2)
        ll = math.sqrt(nl * nl * (1.0 - a2) + a2)
    return 2.0 * nl * nv / (nl * lv + nv * ll)


def brdf_fs(w_i, w_o, n, albedo, metallic, roughness):
    """Microfacet specular BRDF (RGB); zero below the horizon; exactly reciprocal."""
    w_i = np.asarray(w_i, dtype=np.float64)
    w_o = np.asarray(w_o, dtype=np.float64)
    n = np.asarray(n, dtype=np.float64)
    ndi = float(np.dot(n, w_i))
    ndo = float(np.dot(n, w_o))
    if ndi <= 0.0 or ndo <= 0.0:
        return np.zeros(3)
    h = w_i + w_o
    h = h / np.linalg.norm(h)
    ndh = min(max(float(np.dot(n, h)), 0.0), 1.0)
    # symmetric average keeps reciprocity exact in floating point
    cos_h = 0.5 * (float(np.dot(h, w_i)) + float(np.dot(h, w_o)))
    D = ggx_D(ndh, roughness)
    G = smith_G(ndi, ndo, roughness)
    F0 = fresnel_f0(albedo, metallic) * np.ones(3)
    Fr = fresnel_F(min(max(cos_h, 0.0), 1.0), F0)
    return D * G * Fr / (4.0 * ndi * ndo)


def _hammersley(n, seed=0):
    """Deterministic low-discrepancy sample set on [0,1)^2."""
    i = np.arange(n, dtype=np.uint32)
    bits = i.copy()
    bits = ((bits << np.uint32(16)) | (bits >> np.uint32(16)))
    bits = ((bits & np.uint32(0x55555555)) << np.uint32(1)) | ((bits & np.uint32(0xAAAAAAAA)) >> np.uint32(1))
    bits = ((bits & np.uint32(0x33333333)) << np.uint32(2)) | ((bits & np.uint32(0xCCCCCCCC)) >> np.uint32(2))
    bits = ((bits & np.uint32(0x0F0F0F0F)) << np.uint32(4)) | ((bits & np.uint32(0xF0F0F0F0)) >> np.uint32(4))
    bits = ((bits & np.uint32(0x00FF00FF)) << np.uint32(8)) | ((bits & np.uint32(0xFF00FF00)) >> np.uint32(8))
    xi2 = bits.astype(np.float64) * 2.3283064365386963e-10
    xi1 = i.astype(np.float64) / n
    if seed:
        rng = np.random.default_rng(seed)
        shift = rng.uniform(size=2)
        xi1 = (xi1 + shift[0]) % 1.0
        xi2 = (xi2 + shift[1]) % 1.0
    return xi1, xi2


def _ggx_sample_h(xi1, xi2, alpha):
    """Sample half vectors around +z proportional to D(h) (n.h)."""
    phi = 2.0 * math.pi * xi1
    cos_h = np.sqrt((1.0 - xi2) / (1.0 + (alpha * alpha - 1.0) * xi2))
    sin_h = np.sqrt(np.clip(1.0 - cos_h * cos_h, 0.0, 1.0))
    return np.stack([sin_h * np.cos(phi), sin_h * np.sin(phi), cos_h], axis=-1)


def _smith_g_np(nv, nl, alpha):
    a2 = alpha * alpha
    nv = np.clip(nv, ALPHA_MIN, None)
    nl = np.clip(nl, ALPHA_MIN, None)
    return 2.0 * nl * nv / (nl * np.sqrt(nv * nv * (1 - a2) + a2)
                            + nv * np.sqrt(nl * nl * (1 - a2) + a2))


class DFGLut:
    """Pre-integrated BRDF factor over (cos_view, roughness) in [0,1]^2.

    Each entry holds (scale, bias) with specular factor = F0 * scale + bias.
    """

    def __init__(self, table: np.ndarray):
        self.table = np.asarray(table, dtype=np.float64)  # (R, R, 2), [cos, rough]
        self.resolution = self.table.shape[0]
        self._torch = {}

    def lookup(self, cos_v, roughness):
        """Bilinear lookup, differentiable w.r.t. both query coordinates."""
        dtype = cos_v.dtype if torch.is_tensor(cos_v) else torch.float64
        key = dtype
        if key not in self._torch:
            self._torch[key] = torch.as_tensor(self.table, dtype=dtype)
        tab = self._torch[key]
        R = self.resolution
        cos_v = torch.as_tensor(cos_v, dtype=dtype).clamp(0.0, 1.0)
        roughness = torch.as_tensor(roughness, dtype=dtype).clamp(0.0, 1.0)
        x = cos_v * (R - 1)
        y = roughness * (R - 1)
        x0 = x.detach().floor().long().clamp(0, R - 2)
        y0 = y.detach().floor().long().clamp(0, R - 2)
        wx = (x - x0).clamp(0.0, 1.0)
        wy = (y - y0).clamp(0.0, 1.0)
        v00 = tab[x0, y0]
        v10 = tab[x0 + 1, y0]
        v01 = tab[x0, y0 + 1]
        v11 = tab[x0 + 1, y0 + 1]
        wx = wx[..., None]
        wy = wy[..., None]
        out = (v00 * (1 - wx) * (1 - wy) + v10 * wx * (1 - wy)
               + v01 * (1 - wx) * wy + v11 * wx * wy)
        return out[..., 0], out[..., 1]


_DFG_CACHE: dict = {}


def precompute_dfg(resolution=64, samples=4096, seed=0) -> DFGLut:
    """Importance-sampled pre-integration of the BRDF factor (deterministic)."""
    if resolution < 16:
        raise ValueError("resolution must be >= 16")
    key = (resolution, samples, seed)
    if key in _DFG_CACHE:
        return _DFG_CACHE[key]
    xi1, xi2 = _hammersley(samples, seed)
    cos_grid = np.linspace(0.0, 1.0, resolution)
    rough_grid = np.linspace(0.0, 1.0, resolution)
    table = np.zeros((resolution, resolution, 2))
    for j, r in enumerate(rough_grid):
        alpha = max(r * r, ALPHA_MIN)
        h = _ggx_sample_h(xi1, xi2, alpha)             # (S,3)
        cos_v = np.clip(cos_grid, ALPHA_MIN, 1.0)
        sin_v = np.sqrt(np.clip(1.0 - cos_v ** 2, 0.0, 1.0))
        v = np.stack([sin_v, np.zeros_like(cos_v), cos_v], axis=-1)  # (R,3)
        vdh = v @ h.T                                   # (R,S)
        l = 2.0 * vdh[..., None] * h[None] - v[:, None, :]
        ndl = l[..., 2]
        ndh = np.clip(h[:, 2], 0.0, 1.0)
        good = (ndl > 0) & (vdh > 0)
        G = _smith_g_np(cos_v[:, None], ndl, alpha)
        g_vis = np.where(good, G * vdh / (np.clip(ndh, ALPHA_MIN, None)[None] * cos_v[:, None]), 0.0)
        fc = np.where(good, (1.0 - np.clip(vdh, 0.0, 1.0)) ** 5, 0.0)
        table[:, j, 0] = np.mean((1.0 - fc) * g_vis, axis=1)
        table[:, j, 1] = np.mean(fc * g_vis, axis=1)
    # project MC noise back onto the physically feasible range
    np.clip(table, 0.0, 1.0, out=table)
    lut = DFGLut(table)
    _DFG_CACHE[key] = lut
    return lut


# cubemap face order: +x, -x, +y, -y, +z, -z
def direction_to_face_uv(dirs: torch.Tensor):
    """Unit directions -> (face index, u, v) with u, v in [0,1]."""
    x, y, z = dirs.unbind(-1)
    ax, ay, az = x.abs(), y.abs(), z.abs()
    pick_x = (ax >= ay) & (ax >= az)
    pick_y = (~pick_x) & (ay >= az)
    pick_z = ~(pick_x | pick_y)

    face = torch.where(pick_x, torch.where(x >= 0, 0, 1),
                       torch.where(pick_y, torch.where(y >= 0, 2, 3),
                                   torch.where(z >= 0, 4, 5)))
    ma = torch.where(pick_x, ax, torch.where(pick_y, ay, az)).clamp(min=1e-12)
    sc = torch.where(face == 0, -z, torch.zeros_like(x))
    sc = torch.where(face == 1, z, sc)
    sc = torch.where((face == 2) | (face == 3), x, sc)
    sc = torch.where(face == 4, x, sc)
    sc = torch.where(face == 5, -x, sc)
    tc = torch.where((face == 0) | (face == 1), -y, torch.zeros_like(x))
    tc = torch.where(face == 2, z, tc)
    tc = torch.where(face == 3, -z, tc)
    tc = torch.where((face == 4) | (face == 5), -y, tc)
    u = 0.5 * (sc / ma + 1.0)
    v = 0.5 * (tc / ma + 1.0)
    return face, u, v


def face_uv_to_direction(face, u, v):
    """Inverse of direction_to_face_uv at face texel coordinates (numpy)."""
    face = np.asarray(face)[..., None]
    sc = 2.0 * np.asarray(u) - 1.0
    tc = 2.0 * np.asarray(v) - 1.0
    one = np.ones_like(sc)
    dirs = np.select(
        [face == 0, face == 1, face == 2, face == 3, face == 4, face == 5],
        [np.stack([one, -tc, -sc], -1), np.stack([-one, -tc, sc], -1),
         np.stack([sc, one, tc], -1), np.stack([sc, -one, -tc], -1),
         np.stack([sc, -tc, one], -1), np.stack([-sc, -tc, -one], -1)])
    return dirs / np.linalg.norm(dirs, axis=-1, keepdims=True)


def cubemap_texel_directions(size):
    """(6,S,S,3) unit directions of texel centers."""
    uv = (np.arange(size) + 0.5) / size
    u, v = np.meshgrid(uv, uv, indexing="xy")
    faces = []
    for f in range(6):
        faces.append(face_uv_to_direction(np.full_like(u, f, dtype=np.int64), u, v))
    return np.stack(faces)


class EnvironmentCubemap:
    """Learnable radiance cubemap with a box-filtered mip chain.

    The mip chain is rebuilt (through the autograd graph) after every
    change to the base level; roughness selects the mip via
    lod = roughness * (levels - 1).
    """

    def __init__(self, base: torch.Tensor):
        if base.ndim != 4 or base.shape[0] != 6 or base.shape[1] != base.shape[2]:
            raise ValueError("base must be (6,S,S,3)")
        if (base.shape[1] & (base.shape[1] - 1)) != 0:
            raise ValueError("face resolution must be a power of two")
        self.base = base
        self.mips: list[torch.Tensor] = []
        self.rebuild_mips()

    @classmethod
    def constant(cls, size, value=(0.5, 0.5, 0.5), dtype=torch.float64, requires_grad=False):
        base = torch.zeros(6, size, size, 3, dtype=dtype)
        base[:] = torch.as_tensor(value, dtype=dtype)
        return cls(base.requires_grad_(requires_grad))

    @property
    def size(self):
        return self.base.shape[1]

    @property
    def levels(self):
        return int(math.log2(self.size)) + 1

    def rebuild_mips(self):
        mips = [self.base]
        cur = self.base
        while cur.shape[1] > 1:
            cur = F.avg_pool2d(cur.permute(0, 3, 1, 2), 2).permute(0, 2, 3, 1)
            mips.append(cur)
        self.mips = mips

    def clamp_nonnegative_(self):
        with torch.no_grad():
            self.base.clamp_(min=0.0)
        self.rebuild_mips()

    def _bilinear(self, level, face, u, v):
        tex = self.mips[level]
        S = tex.shape[1]
        flat = tex.reshape(-1, 3)
        x = (u * S - 0.5).clamp(0.0, S - 1)
        y = (v * S - 0.5).clamp(0.0, S - 1)
        x0 = x.detach().floor().long().clamp(0, max(S - 2, 0))
        y0 = y.detach().floor().long().clamp(0, max(S - 2, 0))
        wx = (x - x0).clamp(0.0, 1.0)[..., None]
        wy = (y - y0).clamp(0.0, 1.0)[..., None]
        x1 = (x0 + 1).clamp(max=S - 1)
        y1 = (y0 + 1).clamp(max=S - 1)
        base = face * (S * S)
        v00 = flat[base + y0 * S + x0]
        v10 = flat[base + y0 * S + x1]
        v01 = flat[base + y1 * S + x0]
        v11 = flat[base + y1 * S + x1]
        return (v00 * (1 - wx) * (1 - wy) + v10 * wx * (1 - wy)
                + v01 * (1 - wx) * wy + v11 * wx * wy)

    def query(self, dirs: torch.Tensor, roughness) -> torch.Tensor:
        """Trilinear radiance lookup (bilinear in-face, linear across mips)."""
        dirs = dirs / dirs.norm(dim=-1, keepdim=True).clamp(min=1e-12)
        face, u, v = direction_to_face_uv(dirs)
        roughness = torch.as_tensor(roughness, dtype=dirs.dtype).clamp(0.0, 1.0)
        if roughness.ndim == 0:
            roughness = roughness.expand(dirs.shape[:-1])
        lod = roughness * (self.levels - 1)
        l0 = lod.detach().floor().long().clamp(0, self.levels - 1)
        frac = (lod - l0).clamp(0.0, 1.0)[..., None]
        out = torch.zeros(dirs.shape[:-1] + (3,), dtype=dirs.dtype)
        for lev in range(self.levels):
            sel = (l0 == lev).nonzero(as_tuple=True)[0]
            if len(sel) == 0:
                continue
            lo = self._bilinear(lev, face[sel], u[sel], v[sel])
            if lev + 1 < self.levels:
                hi = self._bilinear(lev + 1, face[sel], u[sel], v[sel])
            else:
                hi = lo
            out = out.index_put((sel,), lo * (1 - frac[sel]) + hi * frac[sel])
        return out

    def mip_consistency_error(self):
        err = 0.0
        for lev in range(1, self.levels):
            down = F.avg_pool2d(self.mips[lev - 1].permute(0, 3, 1, 2), 2).permute(0, 2, 3, 1)
            err = max(err, float((down - self.mips[lev]).abs().max()))
        return err


def deferred_shade(gbuf: GBuffer, cam: Camera, env: EnvironmentCubemap, dfg: DFGLut,
                   incident=None, background=(0.0, 0.0, 0.0), return_parts=False):
    """Final color from G-buffers: c = (1-m) c_d + (F0 scale + bias) L_i.

    `incident` is the per-pixel (L_indirect, occlusion) pair from ray
    tracing; None means fully unoccluded direct lighting.
    """
    dtype = gbuf.alpha.dtype
    H, W = gbuf.alpha.shape
    alpha = gbuf.alpha
    a_safe = alpha.clamp(min=1e-12)

    cd = gbuf.diffuse / a_safe[..., None]
    m = gbuf.metallic / a_safe
    alb = gbuf.albedo / a_safe
    rough = (gbuf.roughness / a_safe).clamp(0.0, 1.0)
    n = gbuf.normal

    R, t = cam.torch_Rt(dtype)
    rays_cam = cam.pixel_dirs_cam(dtype).reshape(H, W, 3)
    rays_w = rays_cam @ R
    rays_w = rays_w / rays_w.norm(dim=-1, keepdim=True)
    w_o = -rays_w

    ndv_raw = (n * w_o).sum(-1)
    refl = 2.0 * ndv_raw[..., None] * n - w_o
    ndv = ndv_raw.clamp(ALPHA_MIN, 1.0)

    scale, bias = dfg.lookup(ndv, rough)
    F0 = fresnel_f0(alb, m)

    L_direct = env.query(refl.reshape(-1, 3), rough.reshape(-1)).reshape(H, W, 3)
    if incident is None:
        L_ind = torch.zeros_like(L_direct)
        occ = torch.zeros_like(alpha)
    else:
        L_ind, occ = incident
    L_i = L_ind + (1.0 - occ)[..., None] * L_direct

    L_s = (F0 * scale + bias)[..., None] * L_i
    surf = (1.0 - m)[..., None] * cd + L_s
    bg = torch.as_tensor(background, dtype=dtype)
    img = surf * alpha[..., None] + (1.0 - alpha)[..., None] * bg
    if not return_parts:
        return img
    parts = {"final": img, "specular": L_s * alpha[..., None],
             "diffuse_term": (1.0 - m)[..., None] * cd * alpha[..., None],
             "direct": L_direct, "indirect": L_ind, "occlusion": occ}
    return img, parts


def mc_reference_specular(n, w_o, albedo, metallic, roughness, env,
                          scene=None, n_samples=200_000, seed=0):
    """Monte Carlo estimate of the specular hemisphere integral (test oracle).

    GGX half-vector importance sampling; `scene` optionally supplies
    (gaussians, bvh, origin) so incident radiance includes traced
    occlusion per the incident-light decomposition.
    """
    if n_samples < 100_000:
        raise ValueError("need at least 1e5 samples")
    n = np.asarray(n, dtype=np.float64)
    w_o = np.asarray(w_o, dtype=np.float64)
    alpha = max(roughness * roughness, ALPHA_MIN)
    rng = np.random.default_rng(seed)
    xi1 = rng.uniform(size=n_samples)
    xi2 = rng.uniform(size=n_samples)
    h_local = _ggx_sample_h(xi1, xi2, alpha)

    # tangent frame around n
    up = np.array([0.0, 0.0, 1.0]) if abs(n[2]) < 0.999 else np.array([1.0, 0.0, 0.0])
    tx = np.cross(up, n)
    tx /= np.linalg.norm(tx)
    ty = np.cross(n, tx)
    h = h_local @ np.stack([tx, ty, n])

    vdh = h @ w_o
    l = 2.0 * vdh[:, None] * h - w_o
    ndl = l @ n
    ndv = float(n @ w_o)
    ndh = np.clip(h @ n, 0.0, 1.0)
    good = (ndl > 0) & (vdh > 0)

    F0 = fresnel_f0(albedo, metallic) * np.ones(3)
    Fr = F0 + (1.0 - F0) * (1.0 - np.clip(vdh, 0.0, 1.0))[:, None] ** 5
    G = _smith_g_np(ndv, np.clip(ndl, 0.0, None), alpha)
    weight = np.where(good, G * vdh / (np.clip(ndh, ALPHA_MIN, None) * max(ndv, ALPHA_MIN)), 0.0)

    dirs = torch.as_tensor(l, dtype=torch.float64)
    with torch.no_grad():
        li = env.query(dirs, torch.zeros(len(l), dtype=torch.float64)).numpy()
    if scene is not None:
        from .raytrace import trace_rays_batch
        gaussians, bvh, origin = scene
        l_ind, occ = trace_rays_batch(gaussians, np.broadcast_to(origin, l.shape), l)
        li = l_ind + (1.0 - occ)[:, None] * li
    return np.mean(weight[:, None] * Fr * li, axis=0)
