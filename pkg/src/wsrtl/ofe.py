"""Single-image optical flow head and its L1 loss."""
from __future__ import annotations

import torch
import torch.nn.functional as F
from torch import Tensor, nn


class FlowHead(nn.Module):
    """Two stride-2 transposed convolutions on the deepest trunk map.

    A 6x6 map from a 192 input becomes a 24x24x2 flow grid (stride 8).
    """

    def __init__(self, in_channels: int, hidden: int):
        super().__init__()
        self.up1 = nn.ConvTranspose2d(in_channels, hidden, 4, 2, 1)
        self.up2 = nn.ConvTranspose2d(hidden, 2, 4, 2, 1)

    def forward(self, features: Tensor) -> Tensor:
        return self.up2(F.leaky_relu(self.up1(features), 0.2))


def estimate_flow(head: FlowHead, feature_maps: Tensor) -> Tensor:
    return head(feature_maps)


def pool_flow(flow: Tensor, grid: tuple[int, int]) -> Tensor:
    """Average-pool ``(B, 2, H, W)`` pixel flow onto a coarser ``grid``.

    Values stay in input-pixel units.
    """
    h, w = flow.shape[-2:]
    if h % grid[0] or w % grid[1]:
        raise ValueError(f"flow of size {h}x{w} does not tile onto {grid}")
    return F.avg_pool2d(flow, (h // grid[0], w // grid[1]))


def flow_loss(pred: Tensor, target: Tensor, mask: Tensor | None = None) -> Tensor:
    """Mean absolute difference over all flow components.

    ``mask`` (shape ``(B,)``) drops samples without ground truth; an all-zero
    mask yields 0.
    """
    if pred.shape != target.shape:
        raise ValueError(f"flow shapes differ: {tuple(pred.shape)} vs {tuple(target.shape)}")
    err = (pred - target).abs()
    if mask is None:
        return err.mean()
    mask = mask.to(err.dtype)
    per_sample = err.flatten(1).mean(1)
    denom = mask.sum()
    if denom == 0:
        return per_sample.sum() * 0
    return (per_sample * mask).sum() / denom


def flow_mass_ratio(pred: Tensor, region: Tensor) -> float:
    """Mean ``|flow|`` inside ``region`` over the mean outside it.

    ``pred`` is ``(B, 2, h, w)``, ``region`` a ``(B, h, w)`` boolean mask.
    Comparing means is the same as comparing the mass of equal-area regions.
    """
    mag = torch.linalg.vector_norm(pred, dim=1)
    region = region.bool()
    if not region.any() or region.all():
        raise ValueError("region must be a proper, nonempty subset of the grid")
    return float(mag[region].mean() / mag[~region].mean().clamp_min(1e-12))
