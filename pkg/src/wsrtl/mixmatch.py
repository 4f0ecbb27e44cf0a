"""Multi-label MixMatch with sigmoid sharpening."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from torch import Tensor

from .roii import bce


def sharpen(logits: Tensor, temperature: float) -> Tensor:
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    return torch.sigmoid(logits / temperature)


@torch.no_grad()
def guess_labels(backbone, images: Tensor, centers: Tensor, temperature: float, passes: int = 1) -> Tensor:
    """Sharpened pseudo labels from the backbone in evaluation mode.

    With ``passes > 1`` the fused logits of the image and its horizontal
    mirror (alternating) are averaged before sharpening.
    """
    was_training = backbone.training
    backbone.eval()
    try:
        logits = backbone(images, centers).logits
        if passes > 1:
            width = images.shape[-1]
            flipped_centers = centers.flip(2).clone()
            flipped_centers[..., 0] = width - 1 - flipped_centers[..., 0]
            flipped = backbone(images.flip(-1), flipped_centers).logits
            views = [logits if i % 2 == 0 else flipped for i in range(passes)]
            logits = torch.stack(views).mean(0)
    finally:
        backbone.train(was_training)
    return sharpen(logits, temperature).detach()


@dataclass
class MixedBatch:
    l_images: Tensor
    l_targets: Tensor
    l_centers: Tensor
    u_images: Tensor
    u_targets: Tensor
    u_centers: Tensor
    # per-sample coefficient of the sample's own input, always >= 0.5
    l_coeffs: Tensor
    u_coeffs: Tensor


def mixup(x1: Tensor, y1: Tensor, x2: Tensor, y2: Tensor, lam: Tensor) -> tuple[Tensor, Tensor]:
    """Convex combination of inputs and targets with per-sample ``lam``."""
    lx = lam.view(-1, *([1] * (x1.dim() - 1))).to(x1.dtype)
    ly = lam.view(-1, *([1] * (y1.dim() - 1))).to(y1.dtype)
    return lx * x1 + (1 - lx) * x2, ly * y1 + (1 - ly) * y2


def mixmatch(l_images: Tensor, l_targets: Tensor, l_centers: Tensor,
             u_images: Tensor, u_targets: Tensor, u_centers: Tensor,
             alpha: float, rng: np.random.Generator,
             lam: np.ndarray | None = None, perm: np.ndarray | None = None) -> MixedBatch:
    """Mix every sample with a random partner from the joint L+U pool.

    Coefficients are drawn from Beta(alpha, alpha) and folded to
    ``max(lam, 1 - lam)`` so each mixed sample stays closest to its own
    source; it also keeps its own RoI centers.
    """
    n_l = l_images.shape[0]
    x = torch.cat([l_images, u_images])
    y = torch.cat([l_targets.to(u_targets.dtype), u_targets])
    c = torch.cat([l_centers, u_centers])
    total = x.shape[0]
    if perm is None:
        perm = rng.permutation(total)
    if lam is None:
        lam = rng.beta(alpha, alpha, size=total)
    lam = np.maximum(lam, 1 - lam)
    lam_t = torch.as_tensor(lam, dtype=x.dtype)
    perm_t = torch.as_tensor(perm, dtype=torch.long)
    mx, my = mixup(x, y, x[perm_t], y[perm_t], lam_t)
    return MixedBatch(mx[:n_l], my[:n_l], c[:n_l], mx[n_l:], my[n_l:], c[n_l:], lam_t[:n_l], lam_t[n_l:])


def semi_loss(probs_l: Tensor, targets_l: Tensor, probs_u: Tensor, targets_u: Tensor,
              lambda_u: float = 1.0) -> tuple[Tensor, Tensor, Tensor]:
    """``(L_semi, L_L', L_U')``: soft-target BCE plus weighted squared error."""
    l_l = bce(probs_l, targets_l)
    l_u = ((targets_u - probs_u) ** 2).mean()
    return l_l + lambda_u * l_u, l_l, l_u
