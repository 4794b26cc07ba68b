"""Training losses and evaluation metrics."""

from __future__ import annotations

import math

import numpy as np
import torch
import torch.nn.functional as F

from .rasterize import GBuffer, render_normal_from_depth
from .scene import Camera

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2


def _gaussian_kernel(size, sigma, dtype):
    x = torch.arange(size, dtype=dtype) - (size - 1) / 2.0
    g = torch.exp(-0.5 * (x / sigma) ** 2)
    g = g / g.sum()
    return torch.outer(g, g)


def ssim(img1: torch.Tensor, img2: torch.Tensor, window=SSIM_WINDOW, sigma=SSIM_SIGMA):
    """Mean SSIM over valid window positions; images are (H,W,C) in [0,1]."""
    if img1.ndim == 2:
        img1 = img1[..., None]
        img2 = img2[..., None]
    dtype = img1.dtype
    C = img1.shape[-1]
    k = _gaussian_kernel(window, sigma, dtype).expand(C, 1, window, window)
    a = img1.permute(2, 0, 1)[None]
    b = img2.permute(2, 0, 1)[None]

    def filt(x):
        return F.conv2d(x, k, groups=C)

    mu1, mu2 = filt(a), filt(b)
    mu1_sq, mu2_sq, mu12 = mu1 * mu1, mu2 * mu2, mu1 * mu2
    s1 = filt(a * a) - mu1_sq
    s2 = filt(b * b) - mu2_sq
    s12 = filt(a * b) - mu12
    num = (2 * mu12 + SSIM_C1) * (2 * s12 + SSIM_C2)
    den = (mu1_sq + mu2_sq + SSIM_C1) * (s1 + s2 + SSIM_C2)
    return (num / den).mean()


def photometric_loss(render: torch.Tensor, gt: torch.Tensor, return_parts=False):
    """0.8 * L1 + 0.2 * D-SSIM, the usual splatting photometric composite."""
    if render.shape != gt.shape:
        raise ValueError("image shapes differ")
    l_rgb = (render - gt).abs().mean()
    l_dssim = (1.0 - ssim(render, gt)) / 2.0
    loss = 0.8 * l_rgb + 0.2 * l_dssim
    if return_parts:
        return loss, {"l_rgb": l_rgb, "l_dssim": l_dssim}
    return loss


def depth_normal_loss(gbuf: GBuffer, cam: Camera) -> torch.Tensor:
    """Mean 1 - <splat normal, depth-derived normal> over valid pixels."""
    n_depth = render_normal_from_depth(gbuf.depth, cam)
    has_depth_n = n_depth.detach().norm(dim=-1) > 0.5
    has_splat_n = gbuf.normal_cam.detach().norm(dim=-1) > 0.5
    valid = gbuf.valid_depth & has_depth_n & has_splat_n
    if not bool(valid.any()):
        return torch.zeros((), dtype=gbuf.alpha.dtype)
    dot = (gbuf.normal_cam * n_depth).sum(-1)
    return (1.0 - dot[valid]).mean()


def normal_prior_loss(n_render_cam: torch.Tensor, n_prior) -> torch.Tensor:
    """Mean |1 - N^T N_hat| where both normals are valid; 0 without a prior."""
    if n_prior is None:
        return torch.zeros((), dtype=n_render_cam.dtype)
    prior = torch.as_tensor(np.asarray(n_prior), dtype=n_render_cam.dtype)
    valid = (n_render_cam.detach().norm(dim=-1) > 0.5) & (prior.norm(dim=-1) > 0.5)
    if not bool(valid.any()):
        return torch.zeros((), dtype=n_render_cam.dtype)
    dot = (n_render_cam * prior).sum(-1)
    return (1.0 - dot[valid]).abs().mean()


def psnr(render, gt) -> float:
    """10 log10(1/MSE) on [0,1]-clipped images; 100 dB cap for MSE=0."""
    r = np.clip(np.asarray(render, dtype=np.float64), 0.0, 1.0)
    g = np.clip(np.asarray(gt, dtype=np.float64), 0.0, 1.0)
    mse = float(np.mean((r - g) ** 2))
    if mse <= 0.0:
        return 100.0
    return min(10.0 * math.log10(1.0 / mse), 100.0)


def normal_mae_degrees(normals, gt_normals) -> float:
    """Mean angular error (degrees) over pixels where both normals are valid."""
    n = np.asarray(normals, dtype=np.float64)
    g = np.asarray(gt_normals, dtype=np.float64)
    valid = (np.linalg.norm(n, axis=-1) > 0.5) & (np.linalg.norm(g, axis=-1) > 0.5)
    if not valid.any():
        return 0.0
    dot = np.clip((n[valid] * g[valid]).sum(-1), -1.0, 1.0)
    return float(np.degrees(np.arccos(dot)).mean())


def eval_metrics(renders, gts, normals=None, gt_normals=None):
    """Aggregate (PSNR, SSIM, MAE degrees) over a matched image set."""
    renders = list(renders)
    gts = list(gts)
    if len(renders) == 0 or len(renders) != len(gts):
        raise ValueError("empty or mismatched evaluation sets")
    psnrs, ssims = [], []
    for r, g in zip(renders, gts):
        psnrs.append(psnr(r, g))
        rt = torch.as_tensor(np.clip(np.asarray(r, dtype=np.float64), 0, 1))
        gt = torch.as_tensor(np.clip(np.asarray(g, dtype=np.float64), 0, 1))
        ssims.append(float(ssim(rt, gt)))
    mae = None
    if normals is not None and gt_normals is not None:
        maes = [normal_mae_degrees(n, g) for n, g in zip(normals, gt_normals)]
        mae = float(np.mean(maes))
    return {"psnr": float(np.mean(psnrs)), "ssim": float(np.mean(ssims)), "mae_deg": mae,
            "per_image_psnr": psnrs, "per_image_ssim": ssims}
