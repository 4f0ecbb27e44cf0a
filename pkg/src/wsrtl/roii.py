"""RoI inpainting: crop a random AU's patches and recover them with G/D/C."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from torch import Tensor, nn

from .config import ModelConfig

EPS = 1e-7


@dataclass
class CropOutcome:
    cropped_image: np.ndarray
    # (2, 3, s, s): left then right patch, original pixels
    patches: np.ndarray
    # (2, 2) top-left (x, y) of each box
    corners: np.ndarray
    au_index: int
    label: int | None = None


def patch_corner(center: tuple[int, int], size: int, shape: tuple[int, int]) -> tuple[int, int]:
    """Top-left corner of the ``size`` box around ``center``, clamped inside ``shape``."""
    h, w = shape
    x0 = min(max(int(center[0]) - size // 2, 0), w - size)
    y0 = min(max(int(center[1]) - size // 2, 0), h - size)
    return x0, y0


def crop_random_au(image: np.ndarray, centers: np.ndarray, rng: np.random.Generator,
                   size: int = 48, au_index: int | None = None) -> CropOutcome:
    """Whiten both symmetric boxes of one AU.

    ``image`` is ``(3, H, W)``; ``centers`` is ``(N, 2, 2)`` pixels.
    """
    n = centers.shape[0]
    if au_index is None:
        au_index = int(rng.integers(n))
    out = image.copy()
    patches = np.empty((2, image.shape[0], size, size), dtype=image.dtype)
    corners = np.empty((2, 2), dtype=np.int64)
    for side in range(2):
        x0, y0 = patch_corner(centers[au_index, side], size, image.shape[-2:])
        patches[side] = image[:, y0:y0 + size, x0:x0 + size]
        corners[side] = (x0, y0)
    for x0, y0 in corners:
        out[:, y0:y0 + size, x0:x0 + size] = 1.0
    return CropOutcome(out, patches, corners, au_index)


def paste_patches(outcome: CropOutcome, patches: np.ndarray | None = None) -> np.ndarray:
    """Write ``patches`` (default: the originals) back into the cropped image.

    The right patch is pasted last, so where boxes overlap it wins; the
    original pixels agree there anyway.
    """
    patches = outcome.patches if patches is None else patches
    img = outcome.cropped_image.copy()
    size = patches.shape[-1]
    for side, (x0, y0) in enumerate(outcome.corners):
        img[:, y0:y0 + size, x0:x0 + size] = patches[side]
    return img


class Generator(nn.Module):
    """128-d RoI vector -> 3x48x48 patch in [0, 1] via 5 transposed convs."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        c = [cfg.scaled(cfg.gen_channels // 2 ** i) for i in range(4)]
        self.net = nn.Sequential(
            nn.ConvTranspose2d(cfg.d_model, c[0], 3, 1, 0),   # 1 -> 3
            nn.ReLU(inplace=True),
            nn.ConvTranspose2d(c[0], c[1], 4, 2, 1),          # 3 -> 6
            nn.ReLU(inplace=True),
            nn.ConvTranspose2d(c[1], c[2], 4, 2, 1),          # 6 -> 12
            nn.ReLU(inplace=True),
            nn.ConvTranspose2d(c[2], c[3], 4, 2, 1),          # 12 -> 24
            nn.ReLU(inplace=True),
            nn.ConvTranspose2d(c[3], 3, 4, 2, 1),             # 24 -> 48
            nn.Sigmoid(),
        )

    def forward(self, x: Tensor) -> Tensor:
        return self.net(x.view(x.shape[0], -1, 1, 1))


class PatchCritic(nn.Module):
    """Five convs from a 3x48x48 patch to one probability (D and C share it)."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        c = [cfg.scaled(cfg.disc_channels // 2 ** i) for i in (3, 2, 1, 0)]
        self.net = nn.Sequential(
            nn.Conv2d(3, c[0], 4, 2, 1),       # 48 -> 24
            nn.LeakyReLU(0.2, inplace=True),
            nn.Conv2d(c[0], c[1], 4, 2, 1),    # 24 -> 12
            nn.LeakyReLU(0.2, inplace=True),
            nn.Conv2d(c[1], c[2], 4, 2, 1),    # 12 -> 6
            nn.LeakyReLU(0.2, inplace=True),
            nn.Conv2d(c[2], c[3], 4, 2, 1),    # 6 -> 3
            nn.LeakyReLU(0.2, inplace=True),
            nn.Conv2d(c[3], 1, 3, 1, 0),       # 3 -> 1
        )

    def forward(self, patches: Tensor) -> Tensor:
        return torch.sigmoid(self.net(patches).flatten())


def _clip(p: Tensor) -> Tensor:
    return p.clamp(EPS, 1 - EPS)


def adversarial_losses(d_real: Tensor, d_fake: Tensor) -> tuple[Tensor, Tensor]:
    """Returns ``(L_adv, L_adv_g)``; D maximises the first, G minimises the second."""
    d_real, d_fake = _clip(d_real), _clip(d_fake)
    l_adv = torch.log(d_real).mean() + torch.log(1 - d_fake).mean()
    l_adv_g = -torch.log(d_fake).mean()
    return l_adv, l_adv_g


def reconstruction_loss(p: Tensor, p_hat: Tensor) -> Tensor:
    return (p - p_hat).abs().mean()


def bce(probs: Tensor, targets: Tensor) -> Tensor:
    probs = _clip(probs)
    return -(targets * torch.log(probs) + (1 - targets) * torch.log(1 - probs)).mean()


def semantic_losses(c_real: Tensor, c_fake: Tensor, y_hat: Tensor) -> tuple[Tensor, Tensor]:
    """``(L_C, L_c_g)``: cross-entropy of C on real and generated patches."""
    y_hat = y_hat.to(c_real.dtype)
    return bce(c_real, y_hat), bce(c_fake, y_hat)


def discriminator_loss(l_adv: Tensor) -> Tensor:
    return -l_adv


def generator_loss(l_adv_g: Tensor, l_rec: Tensor, l_c_g: Tensor,
                   lambda1: float = 0.1, lambda2: float = 0.1) -> Tensor:
    return lambda1 * l_adv_g + (1 - lambda1) * l_rec + lambda2 * l_c_g


def roii_losses(d_real: Tensor, d_fake: Tensor, real: Tensor, fake: Tensor,
                c_fake: Tensor, y_hat: Tensor, lambda1: float = 0.1,
                lambda2: float = 0.1) -> tuple[Tensor, Tensor]:
    """``(L_D, L_G)`` from critic outputs and patches of one batch."""
    l_adv, l_adv_g = adversarial_losses(d_real, d_fake)
    l_rec = reconstruction_loss(real, fake)
    l_c_g = bce(c_fake, y_hat.to(c_fake.dtype))
    return discriminator_loss(l_adv), generator_loss(l_adv_g, l_rec, l_c_g, lambda1, lambda2)
