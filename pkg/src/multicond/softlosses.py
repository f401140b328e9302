"""Differentiable torch surrogates of the exact condition losses.

These exist solely to carry gradients from cycle-consistency losses into the
generator during joint training.  Reported scores and metrics always use the
exact numpy implementations; nothing here feeds a reported number.
"""

from __future__ import annotations

import torch
import torch.nn.functional as F

from .scenes import (
    EDGE_THRESHOLD,
    FULL_PALETTE,
    LUMA_WEIGHTS,
    NUM_SEG_CLASSES,
    _GAUSS3,
    _SOBEL_X,
)
from .metrics import SSIM_C1, SSIM_C2, SSIM_WINDOW, _SSIM_W

_EPS = 1e-8
EDGE_TEMP = 0.05
SEG_TEMP = 0.05


def _kernel(arr, dtype):
    return torch.as_tensor(arr, dtype=dtype).unsqueeze(0).unsqueeze(0)


def sobel_magnitude_t(img: torch.Tensor) -> torch.Tensor:
    """(B,3,H,W) -> (B,H,W) channel-max Sobel magnitude, replicate padding."""
    b, c, h, w = img.shape
    flat = img.reshape(b * c, 1, h, w)
    flat = F.pad(flat, (1, 1, 1, 1), mode="replicate")
    kx = _kernel(_SOBEL_X, img.dtype)
    ky = _kernel(_SOBEL_X.T, img.dtype)
    gx = F.conv2d(flat, kx)
    gy = F.conv2d(flat, ky)
    mag = torch.sqrt(gx**2 + gy**2 + _EPS**2)
    return mag.reshape(b, c, h, w).max(dim=1).values


def gaussian3_t(x: torch.Tensor) -> torch.Tensor:
    """(B,H,W) -> (B,H,W) 3x3 Gaussian smoothing, replicate padding."""
    k = _kernel(_GAUSS3, x.dtype)
    padded = F.pad(x.unsqueeze(1), (1, 1, 1, 1), mode="replicate")
    return F.conv2d(padded, k).squeeze(1)


def luma_t(img: torch.Tensor) -> torch.Tensor:
    w = torch.as_tensor(LUMA_WEIGHTS, dtype=img.dtype)
    return (img * w[None, :, None, None]).sum(dim=1)


def box_down_up_t(grid: torch.Tensor) -> torch.Tensor:
    down = F.avg_pool2d(grid.unsqueeze(1), 2)
    return F.interpolate(down, scale_factor=2, mode="nearest").squeeze(1)


def ssim_t(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """(B,H,W) pair -> (B,) SSIM with the same window/constants as metrics.ssim."""
    w = torch.as_tensor(_SSIM_W, dtype=a.dtype).reshape(1, 1, SSIM_WINDOW, SSIM_WINDOW)
    a4 = a.unsqueeze(1)
    b4 = b.unsqueeze(1)
    mu_a = F.conv2d(a4, w)
    mu_b = F.conv2d(b4, w)
    var_a = F.conv2d(a4**2, w) - mu_a**2
    var_b = F.conv2d(b4**2, w) - mu_b**2
    cov = F.conv2d(a4 * b4, w) - mu_a * mu_b
    num = (2 * mu_a * mu_b + SSIM_C1) * (2 * cov + SSIM_C2)
    den = (mu_a**2 + mu_b**2 + SSIM_C1) * (var_a + var_b + SSIM_C2)
    return (num / den).mean(dim=(1, 2, 3))


def soft_seg_probs(img: torch.Tensor, temp: float = SEG_TEMP) -> torch.Tensor:
    """(B,3,H,W) -> (B,K,H,W) soft nearest-palette assignment."""
    palette = torch.as_tensor(FULL_PALETTE, dtype=img.dtype)  # (K,3)
    diff = img.unsqueeze(1) - palette[None, :, :, None, None]
    dist2 = (diff**2).sum(dim=2)
    return F.softmax(-dist2 / temp, dim=1)


def soft_condition_loss(kind: str, x0_img: torch.Tensor, gt: torch.Tensor) -> torch.Tensor:
    """Per-sample surrogate condition loss; x0_img is the unclipped [0,1]-domain estimate.

    gt encodings: edge/softedge/luma (B,H,W) floats; seg (B,H,W) long ids.
    """
    if kind != "seg":
        gt = gt.to(x0_img.dtype)
    if kind == "edge":
        mag = sobel_magnitude_t(x0_img)
        p = torch.sigmoid((mag - EDGE_THRESHOLD) / EDGE_TEMP)
        g = gt
        inter = (p * g).sum(dim=(1, 2))
        f1 = (2 * inter + _EPS) / (p.sum(dim=(1, 2)) + g.sum(dim=(1, 2)) + _EPS)
        return 1.0 - f1
    if kind == "softedge":
        pred = gaussian3_t(sobel_magnitude_t(x0_img)).clamp(0.0, 1.0)
        return (1.0 - ssim_t(pred, gt)).clamp(0.0, 1.0)
    if kind == "seg":
        probs = soft_seg_probs(x0_img)
        g = F.one_hot(gt, NUM_SEG_CLASSES).permute(0, 3, 1, 2).to(probs.dtype)
        present = g.amax(dim=(2, 3))  # (B,K) constant w.r.t. the image
        inter = (probs * g).sum(dim=(2, 3))
        union = (probs + g - probs * g).sum(dim=(2, 3))
        iou = (inter + _EPS) / (union + _EPS)
        miou = (iou * present).sum(dim=1) / present.sum(dim=1)
        return 1.0 - miou
    if kind == "luma":
        pred = box_down_up_t(luma_t(x0_img))
        return torch.sqrt(((pred - gt) ** 2).mean(dim=(1, 2)) + _EPS**2)
    raise ValueError(f"unknown condition kind {kind!r}")
