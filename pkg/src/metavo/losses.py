"""Self-supervised loss stack: masked photometric + SSIM appearance loss, mask
regularisation, edge-aware depth smoothness and their weighted total.

All functions take batched channel-first tensors and return the mean over the
batch of per-sample losses.
"""
from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F

from .errors import DomainError

SSIM_C1 = 0.01**2
SSIM_C2 = 0.03**2
_BCE_EPS = 1e-7


@dataclass(frozen=True)
class LossWeights:
    lambda_m: float = 0.01
    lambda_a: float = 1.0
    lambda_r: float = 0.5
    alpha_s: float = 0.85
    ssim_window: int = 5

    def __post_init__(self):
        if min(self.lambda_m, self.lambda_a, self.lambda_r) < 0:
            raise DomainError("loss weights must be nonnegative")
        if not 0.0 <= self.alpha_s <= 1.0:
            raise DomainError("alpha_s must lie in [0, 1]")
        if self.ssim_window < 1 or self.ssim_window % 2 == 0:
            raise DomainError("ssim_window must be a positive odd integer")


def _box_mean(x: torch.Tensor, window: int) -> torch.Tensor:
    """Uniform ``window x window`` mean with reflection padding, via cumulative sums."""
    pad = window // 2
    x = F.pad(x, (pad, pad, pad, pad), mode="reflect")
    c = x.cumsum(-1)
    c = torch.cat([c[..., window - 1 : window], c[..., window:] - c[..., :-window]], dim=-1)
    c = c.cumsum(-2)
    c = torch.cat([c[..., window - 1 : window, :], c[..., window:, :] - c[..., :-window, :]], dim=-2)
    return c / (window * window)


def ssim_map(a: torch.Tensor, b: torch.Tensor, window: int = 5, validity=None) -> torch.Tensor:
    """Per-pixel SSIM ``(B, H, W)`` with a uniform window, averaged over channels.

    Borders use reflection padding so the map has the input's size. With
    ``validity`` ``(B, H, W)`` the local statistics average over valid pixels
    only, so invalid neighbours do not leak into a window.
    """
    if a.shape != b.shape:
        raise DomainError(f"shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")
    H, W = a.shape[-2:]
    if window > H or window > W:
        raise DomainError(f"SSIM window {window} larger than image {H}x{W}")
    C = a.shape[1]
    stack = torch.cat([a, b, a * a, b * b, a * b], dim=1)
    if validity is None:
        pooled = _box_mean(stack, window)
    else:
        v = validity.to(a.dtype).unsqueeze(1)
        weight = _box_mean(v, window).clamp(min=1e-12)
        pooled = _box_mean(stack * v, window) / weight
    mu_a, mu_b, s_aa, s_bb, s_ab = torch.split(pooled, C, dim=1)
    var_a = s_aa - mu_a**2
    var_b = s_bb - mu_b**2
    cov = s_ab - mu_a * mu_b
    num = (2 * mu_a * mu_b + SSIM_C1) * (2 * cov + SSIM_C2)
    den = (mu_a**2 + mu_b**2 + SSIM_C1) * (var_a + var_b + SSIM_C2)
    return (num / den).mean(dim=1)


def mask_regularization(mask: torch.Tensor) -> torch.Tensor:
    """Per-sample mean binary cross-entropy of the mask against all ones."""
    return -torch.log(mask.clamp(min=_BCE_EPS)).flatten(1).mean(dim=1)


def _appearance_terms(I_hat, I, mask, validity, w: LossWeights):
    """Per-sample (regulariser, masked L1, SSIM term, valid count)."""
    n_valid = validity.flatten(1).sum(dim=1)
    denom = n_valid.clamp(min=1)
    l1 = (I_hat - I).abs().mean(dim=1)
    l1_term = (1 - w.alpha_s) * (mask * validity * l1).flatten(1).sum(dim=1) / denom
    ssim_term = w.alpha_s * ((1 - ssim_map(I_hat, I, w.ssim_window, validity)) / 2 * validity).flatten(1).sum(dim=1) / denom
    return mask_regularization(mask), l1_term, ssim_term, n_valid


def appearance_loss(I_hat, I, mask, validity, w: LossWeights = LossWeights()) -> torch.Tensor:
    """``lambda_m * L_m + (1 - alpha_s) mean(M |I_hat - I|) + alpha_s mean((1 - SSIM) / 2)``.

    ``mask`` and ``validity`` are ``(B, H, W)``. Means run over valid pixels
    only. A sample with no valid pixel contributes only its mask regulariser;
    use :func:`degenerate` to detect that case.
    """
    reg, l1_term, ssim_term, _ = _appearance_terms(I_hat, I, mask, validity, w)
    return (w.lambda_m * reg + l1_term + ssim_term).mean()


def degenerate(validity: torch.Tensor) -> torch.Tensor:
    """Per-sample flag: True where no pixel is valid."""
    return validity.flatten(1).sum(dim=1) == 0


def photometric_error(I_hat, I, validity, w: LossWeights = LossWeights()) -> torch.Tensor:
    """Unmasked photometric error over valid pixels (mask-independent quality measure)."""
    denom = validity.flatten(1).sum(dim=1).clamp(min=1)
    l1 = ((I_hat - I).abs().mean(dim=1) * validity).flatten(1).sum(dim=1) / denom
    ss = ((1 - ssim_map(I_hat, I, w.ssim_window, validity)) / 2 * validity).flatten(1).sum(dim=1) / denom
    return ((1 - w.alpha_s) * l1 + w.alpha_s * ss).mean()


def smoothness_loss(depth: torch.Tensor, image: torch.Tensor) -> torch.Tensor:
    """Edge-aware smoothness ``mean |d_x D| e^{-|d_x I|} + |d_y D| e^{-|d_y I|}``.

    ``D`` is the depth divided by its per-sample mean, which removes the
    incentive to shrink the depth scale. Forward differences; the image
    gradient magnitude is the L1 norm over channels. Each term averages over
    the pixels where its difference exists.
    """
    depth = depth / depth.flatten(1).mean(dim=1).clamp(min=1e-12).view(-1, *([1] * (depth.dim() - 1)))
    dx_d = (depth[..., :, 1:] - depth[..., :, :-1]).abs()
    dy_d = (depth[..., 1:, :] - depth[..., :-1, :]).abs()
    dx_i = (image[..., :, 1:] - image[..., :, :-1]).abs().sum(dim=1)
    dy_i = (image[..., 1:, :] - image[..., :-1, :]).abs().sum(dim=1)
    sx = (dx_d * torch.exp(-dx_i)).flatten(1).mean(dim=1)
    sy = (dy_d * torch.exp(-dy_i)).flatten(1).mean(dim=1)
    return (sx + sy).mean()


def total_loss(I_hat, I, mask, validity, depth, w: LossWeights = LossWeights()) -> torch.Tensor:
    """``lambda_a * L_a + lambda_r * L_r`` for one frame pair (batched)."""
    return w.lambda_a * appearance_loss(I_hat, I, mask, validity, w) + w.lambda_r * smoothness_loss(depth, I)
