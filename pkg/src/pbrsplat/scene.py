"""Scene primitives: Gaussian disk sets, cameras, and image buffers.

All learnable per-Gaussian attributes are stored pre-activation so that
optimizer steps are unconstrained:

* opacity / diffuse / albedo / metallic / roughness -> sigmoid
* in-plane scales -> exp of log-scales
* residual color (>= 0, unbounded above) -> softplus
* orientation -> quaternion, normalized on use and after every step
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch


def logit(p, eps=1e-7):
    p = np.clip(np.asarray(p, dtype=np.float64), eps, 1.0 - eps)
    return np.log(p / (1.0 - p))


# Torch's vectorized transcendentals can round an element differently
# depending on its SIMD chunk-mates, so a permuted Gaussian list would
# produce 1-ulp-different attribute activations and break the bit-exact
# order-invariance of rendering. numpy's elementwise loops round each
# contiguous-array element independently of position, so the stable_*
# functions evaluate forward passes through numpy and use the exact
# closed-form derivatives in backward.


class _NumpyUnary(torch.autograd.Function):
    @staticmethod
    def forward(ctx, x, np_fn, grad_fn):
        y = torch.from_numpy(np_fn(x.detach().contiguous().numpy()))
        ctx.save_for_backward(x, y)
        ctx.grad_fn = grad_fn
        return y

    @staticmethod
    def backward(ctx, grad_out):
        x, y = ctx.saved_tensors
        return grad_out * ctx.grad_fn(x, y), None, None


def stable_exp(x):
    return _NumpyUnary.apply(x, np.exp, lambda x_, y: y)


def stable_sigmoid(x):
    def fwd(a):
        return 1.0 / (1.0 + np.exp(-a))

    return _NumpyUnary.apply(x, fwd, lambda x_, y: y * (1.0 - y))


def stable_softplus(x):
    def fwd(a):
        return np.maximum(a, 0.0) + np.log1p(np.exp(-np.abs(a)))

    return _NumpyUnary.apply(x, fwd, lambda x_, y: torch.sigmoid(x_))


def softplus_inv(y, eps=1e-8):
    y = np.clip(np.asarray(y, dtype=np.float64), eps, None)
    return np.log(np.expm1(y))


def quat_to_rotmat(q: torch.Tensor) -> torch.Tensor:
    """(N,4) unit quaternions (w,x,y,z) -> (N,3,3) rotation matrices."""
    q = q / q.norm(dim=-1, keepdim=True)
    w, x, y, z = q.unbind(-1)
    R = torch.stack(
        [
            1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y),
            2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x),
            2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y),
        ],
        dim=-1,
    )
    return R.reshape(q.shape[:-1] + (3, 3))


def quat_from_normal(normals: np.ndarray) -> np.ndarray:
    """Quaternions whose rotation maps local +z onto the given unit normals.

    The in-plane tangent frame is chosen deterministically (no RNG).
    """
    n = np.asarray(normals, dtype=np.float64)
    if n.ndim == 1:
        n = n[None]
    quats = np.empty((len(n), 4))
    for i, nz in enumerate(n):
        norm = np.linalg.norm(nz)
        if norm < 1e-12:
            raise ValueError("zero-length normal")
        nz = nz / norm
        # rotation from +z to nz about their mutual perpendicular
        c = nz[2]
        if c > 1.0 - 1e-12:
            quats[i] = (1.0, 0.0, 0.0, 0.0)
        elif c < -1.0 + 1e-12:
            quats[i] = (0.0, 1.0, 0.0, 0.0)  # 180 deg about x
        else:
            axis = np.cross([0.0, 0.0, 1.0], nz)
            axis = axis / np.linalg.norm(axis)
            half = 0.5 * math.acos(max(-1.0, min(1.0, c)))
            quats[i] = (math.cos(half), *(math.sin(half) * axis))
    return quats


class GaussianSet:
    """Learnable set of 2D Gaussian disks with material attributes.

    Raw attribute tensors are the optimizer-facing leaves; constrained
    values are exposed through properties.
    """

    PARAM_NAMES = (
        "positions", "quats", "log_scales", "opacity_raw", "diffuse_raw",
        "albedo_raw", "metallic_raw", "roughness_raw", "residual_raw",
    )

    def __init__(self, positions, quats, log_scales, opacity_raw, diffuse_raw,
                 albedo_raw, metallic_raw, roughness_raw, residual_raw):
        self.positions = positions      # (N,3)
        self.quats = quats              # (N,4) w,x,y,z
        self.log_scales = log_scales    # (N,2)
        self.opacity_raw = opacity_raw  # (N,)
        self.diffuse_raw = diffuse_raw  # (N,3)
        self.albedo_raw = albedo_raw    # (N,)
        self.metallic_raw = metallic_raw
        self.roughness_raw = roughness_raw
        self.residual_raw = residual_raw  # (N,3)
        n = len(positions)
        for name in self.PARAM_NAMES:
            t = getattr(self, name)
            if len(t) != n:
                raise ValueError(f"{name} has {len(t)} rows, expected {n}")

    @classmethod
    def create(cls, positions, normals, scales, opacity=0.5, diffuse=(0.5, 0.5, 0.5),
               albedo=1.0, metallic=0.0, roughness=0.5, residual=0.0,
               dtype=torch.float64, requires_grad=False):
        """Build a set from constrained values (one disk per input point)."""
        positions = np.atleast_2d(np.asarray(positions, dtype=np.float64))
        n = len(positions)
        if n < 1:
            raise ValueError("need at least one point")
        quats = quat_from_normal(normals)
        scales = np.broadcast_to(np.asarray(scales, dtype=np.float64), (n, 2))
        if np.any(scales <= 0):
            raise ValueError("scales must be strictly positive")

        def t(arr, shape):
            out = torch.as_tensor(np.broadcast_to(np.asarray(arr, dtype=np.float64), shape).copy(), dtype=dtype)
            return out.requires_grad_(requires_grad)

        return cls(
            positions=t(positions, (n, 3)),
            quats=t(quats, (n, 4)),
            log_scales=t(np.log(scales), (n, 2)),
            opacity_raw=t(logit(opacity), (n,)),
            diffuse_raw=t(logit(diffuse), (n, 3)),
            albedo_raw=t(logit(albedo), (n,)),
            metallic_raw=t(logit(metallic), (n,)),
            roughness_raw=t(logit(roughness), (n,)),
            residual_raw=t(softplus_inv(residual), (n, 3)),
        )

    def __len__(self):
        return len(self.positions)

    @property
    def dtype(self):
        return self.positions.dtype

    @property
    def opacity(self):
        return stable_sigmoid(self.opacity_raw)

    @property
    def diffuse(self):
        return stable_sigmoid(self.diffuse_raw)

    @property
    def albedo(self):
        return stable_sigmoid(self.albedo_raw)

    @property
    def metallic(self):
        return stable_sigmoid(self.metallic_raw)

    @property
    def roughness(self):
        return stable_sigmoid(self.roughness_raw)

    @property
    def residual(self):
        return stable_softplus(self.residual_raw)

    @property
    def scales(self):
        return stable_exp(self.log_scales)

    @property
    def rotations(self):
        return quat_to_rotmat(self.quats)

    @property
    def normals(self):
        return self.rotations[..., :, 2]

    def parameters(self):
        return {name: getattr(self, name) for name in self.PARAM_NAMES}

    def requires_grad_(self, flag=True):
        for p in self.parameters().values():
            p.requires_grad_(flag)
        return self

    def detach_clone(self, requires_grad=False):
        return GaussianSet(**{k: v.detach().clone().requires_grad_(requires_grad)
                              for k, v in self.parameters().items()})

    def prune(self, keep: torch.Tensor):
        """New set containing rows where `keep` is True."""
        return GaussianSet(**{k: v.detach()[keep].clone().requires_grad_(v.requires_grad)
                              for k, v in self.parameters().items()})

    def renormalize_quats_(self):
        with torch.no_grad():
            self.quats /= self.quats.norm(dim=-1, keepdim=True)

    def state_arrays(self):
        return {k: v.detach().cpu().numpy() for k, v in self.parameters().items()}

    @classmethod
    def from_state_arrays(cls, arrays, dtype=torch.float64, requires_grad=False):
        return cls(**{k: torch.as_tensor(arrays[k], dtype=dtype).requires_grad_(requires_grad)
                      for k in cls.PARAM_NAMES})


def init_gaussians(points, normals, scale, opacity=0.5, metallic=0.0, roughness=0.5,
                   albedo=1.0, diffuse=(0.5, 0.5, 0.5), residual=0.0,
                   dtype=torch.float64) -> GaussianSet:
    """One disk per (position, normal) pair with shared material defaults."""
    return GaussianSet.create(points, normals, scale, opacity=opacity,
                              diffuse=diffuse, albedo=albedo, metallic=metallic,
                              roughness=roughness, residual=residual, dtype=dtype)


@dataclass
class Camera:
    """Pinhole camera with world->camera rigid transform X_c = R X_w + t."""

    fx: float
    fy: float
    cx: float
    cy: float
    R: np.ndarray
    t: np.ndarray
    width: int
    height: int
    name: str = ""
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        self.R = np.asarray(self.R, dtype=np.float64).reshape(3, 3)
        self.t = np.asarray(self.t, dtype=np.float64).reshape(3)
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError("principal point outside image")
        err = np.abs(self.R @ self.R.T - np.eye(3)).max()
        if err > 1e-3:
            raise ValueError(f"rotation not orthonormal (drift {err:.2e})")
        if np.linalg.det(self.R) < 0:
            raise ValueError("improper rotation (determinant -1)")
        if err > 1e-6:
            u, _, vt = np.linalg.svd(self.R)
            self.R = u @ vt

    @property
    def K(self) -> np.ndarray:
        return np.array([[self.fx, 0, self.cx], [0, self.fy, self.cy], [0, 0, 1.0]])

    @property
    def center(self) -> np.ndarray:
        return -self.R.T @ self.t

    def world_to_cam(self, X):
        return np.asarray(X) @ self.R.T + self.t

    def cam_to_world(self, Xc):
        return (np.asarray(Xc) - self.t) @ self.R

    def project(self, X):
        """World point(s) -> pixel coordinates (u, v); pixel centers at integers."""
        Xc = self.world_to_cam(X)
        z = Xc[..., 2]
        return np.stack([self.fx * Xc[..., 0] / z + self.cx,
                         self.fy * Xc[..., 1] / z + self.cy], axis=-1)

    def pixel_grid(self, dtype=torch.float64):
        """(H*W,) u and v coordinates of pixel centers, row-major."""
        key = ("grid", dtype)
        if key not in self._cache:
            v, u = torch.meshgrid(torch.arange(self.height, dtype=dtype),
                                  torch.arange(self.width, dtype=dtype), indexing="ij")
            self._cache[key] = (u.reshape(-1), v.reshape(-1))
        return self._cache[key]

    def pixel_dirs_cam(self, dtype=torch.float64):
        """(H*W,3) camera-space ray directions with z=1 through pixel centers."""
        key = ("dirs", dtype)
        if key not in self._cache:
            u, v = self.pixel_grid(dtype)
            d = torch.stack([(u - self.cx) / self.fx, (v - self.cy) / self.fy,
                             torch.ones_like(u)], dim=-1)
            self._cache[key] = d
        return self._cache[key]

    def torch_Rt(self, dtype=torch.float64):
        key = ("Rt", dtype)
        if key not in self._cache:
            self._cache[key] = (torch.as_tensor(self.R, dtype=dtype),
                                torch.as_tensor(self.t, dtype=dtype))
        return self._cache[key]


@dataclass
class ImageBuffer:
    """Linear-radiance image; display conversion happens only at I/O time."""

    data: np.ndarray  # (H, W, C) float

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.ndim == 2:
            self.data = self.data[..., None]
        if not np.isfinite(self.data).all():
            raise ValueError("image contains NaN/Inf")
        if self.data.min() < 0:
            raise ValueError("linear radiance must be >= 0")

    @property
    def height(self):
        return self.data.shape[0]

    @property
    def width(self):
        return self.data.shape[1]

    @property
    def channels(self):
        return self.data.shape[2]
