"""CNN trunk, multi-scale fusion, per-AU RoI features and the prediction heads.

Centers are integer pixel coordinates ``(x, y)`` on the network input; the
RoI window on the fused map is the one centered nearest to the pixel center
(see :func:`image_to_map_centers`), clamped to stay inside the map.
"""
from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import Tensor, nn

from .config import ModelConfig
from .transformer import RelationTransformer


class BasicBlock(nn.Module):
    expansion = 1

    def __init__(self, inplanes: int, planes: int, stride: int = 1):
        super().__init__()
        self.conv1 = nn.Conv2d(inplanes, planes, 3, stride, 1, bias=False)
        self.bn1 = nn.BatchNorm2d(planes)
        self.relu = nn.ReLU(inplace=True)
        self.conv2 = nn.Conv2d(planes, planes, 3, 1, 1, bias=False)
        self.bn2 = nn.BatchNorm2d(planes)
        self.downsample = None
        if stride != 1 or inplanes != planes:
            self.downsample = nn.Sequential(
                nn.Conv2d(inplanes, planes, 1, stride, bias=False),
                nn.BatchNorm2d(planes),
            )

    def forward(self, x: Tensor) -> Tensor:
        identity = x if self.downsample is None else self.downsample(x)
        out = self.relu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        return self.relu(out + identity)


class ResNetTrunk(nn.Module):
    """ResNet-18 without the classifier; returns the four stage maps.

    Attribute names follow torchvision so a width-1 ImageNet state dict can be
    loaded with :meth:`load_pretrained`.
    """

    def __init__(self, width: float = 1.0):
        super().__init__()
        chans = [max(1, int(round(c * width))) for c in (64, 128, 256, 512)]
        self.channels = chans
        self.conv1 = nn.Conv2d(3, chans[0], 7, 2, 3, bias=False)
        self.bn1 = nn.BatchNorm2d(chans[0])
        self.relu = nn.ReLU(inplace=True)
        self.maxpool = nn.MaxPool2d(3, 2, 1)
        layers = []
        inplanes = chans[0]
        for i, planes in enumerate(chans):
            stride = 1 if i == 0 else 2
            layers.append(nn.Sequential(BasicBlock(inplanes, planes, stride), BasicBlock(planes, planes)))
            inplanes = planes
        self.layer1, self.layer2, self.layer3, self.layer4 = layers
        for m in self.modules():
            if isinstance(m, nn.Conv2d):
                nn.init.kaiming_normal_(m.weight, mode="fan_out", nonlinearity="relu")

    def forward(self, x: Tensor) -> list[Tensor]:
        x = self.maxpool(self.relu(self.bn1(self.conv1(x))))
        c1 = self.layer1(x)
        c2 = self.layer2(c1)
        c3 = self.layer3(c2)
        c4 = self.layer4(c3)
        return [c1, c2, c3, c4]

    def load_pretrained(self, state_dict: dict[str, Tensor]) -> None:
        """Load a compatible (same-width) trunk checkpoint, ignoring ``fc.*``."""
        trunk = {k: v for k, v in state_dict.items() if not k.startswith("fc.")}
        own = self.state_dict()
        bad = [k for k, v in trunk.items() if k not in own or own[k].shape != v.shape]
        missing = [k for k in own if k not in trunk]
        if bad or missing:
            raise ValueError(f"incompatible trunk checkpoint: {len(bad)} mismatched, {len(missing)} missing keys")
        self.load_state_dict(trunk)


class FusionNeck(nn.Module):
    """Top-down fusion: 1x1 projections, bilinear upsampling and addition."""

    def __init__(self, in_channels: list[int], out_channels: int):
        super().__init__()
        self.lateral = nn.ModuleList(nn.Conv2d(c, out_channels, 1) for c in in_channels)

    def forward(self, stages: list[Tensor]) -> Tensor:
        out = self.lateral[-1](stages[-1])
        for lateral, stage in zip(reversed(self.lateral[:-1]), reversed(stages[:-1])):
            out = F.interpolate(out, size=stage.shape[-2:], mode="bilinear", align_corners=False)
            out = out + lateral(stage)
        return out


@dataclass
class FeaturePyramid:
    stages: list[Tensor]
    fused: Tensor


def crop_roi(fused_map: Tensor, center: tuple[int, int], size: int = 6) -> Tensor:
    """Cut a ``size x size`` window around a map-coordinate center ``(x, y)``.

    Works on ``(C, H, W)`` or ``(B, C, H, W)`` maps.
    """
    h, w = fused_map.shape[-2:]
    x0 = min(max(int(center[0]) - size // 2, 0), w - size)
    y0 = min(max(int(center[1]) - size // 2, 0), h - size)
    return fused_map[..., y0:y0 + size, x0:x0 + size]


def crop_rois(fused_map: Tensor, centers: Tensor, size: int = 6) -> Tensor:
    """Batched :func:`crop_roi`.

    ``centers`` is ``(B, K, 2)`` map coordinates; returns ``(B, K, C, size, size)``.
    """
    b, c, h, w = fused_map.shape
    k = centers.shape[1]
    x0 = (centers[..., 0].long() - size // 2).clamp(0, w - size)
    y0 = (centers[..., 1].long() - size // 2).clamp(0, h - size)
    offs = torch.arange(size, device=fused_map.device)
    rows = (y0[..., None] + offs).view(b, k, size, 1)
    cols = (x0[..., None] + offs).view(b, k, 1, size)
    bidx = torch.arange(b, device=fused_map.device).view(b, 1, 1, 1)
    # advanced indexing puts the indexed dims first: (B, K, size, size, C)
    patches = fused_map.permute(0, 2, 3, 1)[bidx, rows, cols]
    return patches.permute(0, 1, 4, 2, 3)


def image_to_map_centers(centers: Tensor, stride: int, size: int) -> Tensor:
    """Map-coordinate centers for :func:`crop_rois` from image pixel centers.

    The window is the one whose continuous center lies closest to the
    continuous pixel center ``x + 0.5``. This never ties for integer ``x``,
    so mirroring a center (``x -> W - 1 - x``) mirrors the window exactly.
    """
    start = torch.floor((centers.to(torch.float64) + 0.5) / stride - size / 2 + 0.5).long()
    return start + size // 2


class RoIFeatureLearning(nn.Module):
    """Two 3x3 convs and average pooling per AU, with private weights.

    The per-AU branches run as one grouped convolution: AU ``i`` owns group
    ``i`` of both convs.
    """

    def __init__(self, n_aus: int, in_channels: int, out_dim: int = 128):
        super().__init__()
        self.n_aus = n_aus
        self.in_channels = in_channels
        self.out_dim = out_dim
        self.conv1 = nn.Conv2d(n_aus * in_channels, n_aus * out_dim, 3, 1, 1, groups=n_aus)
        self.conv2 = nn.Conv2d(n_aus * out_dim, n_aus * out_dim, 3, 1, 1, groups=n_aus)

    def forward(self, patches: Tensor) -> Tensor:
        """``(B, N, C, s, s)`` patches -> ``(B, N, out_dim)`` vectors."""
        b, n, c, s, _ = patches.shape
        x = patches.reshape(b, n * c, s, s)
        x = F.relu(self.conv1(x))
        x = F.relu(self.conv2(x))
        return x.mean(dim=(-2, -1)).view(b, n, self.out_dim)

    def single(self, patch: Tensor, au_index: int) -> Tensor:
        """Run one ``(C, s, s)`` patch through AU ``au_index``'s branch only."""
        c, o = self.in_channels, self.out_dim
        w1 = self.conv1.weight[au_index * o:(au_index + 1) * o]
        b1 = self.conv1.bias[au_index * o:(au_index + 1) * o]
        w2 = self.conv2.weight[au_index * o:(au_index + 1) * o]
        b2 = self.conv2.bias[au_index * o:(au_index + 1) * o]
        x = F.relu(F.conv2d(patch.view(1, c, *patch.shape[-2:]), w1, b1, padding=1))
        x = F.relu(F.conv2d(x, w2, b2, padding=1))
        return x.mean(dim=(-2, -1))[0]


def roi_feature_learning(module: RoIFeatureLearning, patch: Tensor, au_index: int) -> Tensor:
    return module.single(patch, au_index)


@dataclass
class Prediction:
    regional_logits: Tensor
    global_logits: Tensor
    fused_logits: Tensor
    fused_probs: Tensor


def fuse_logits(regional_logits: Tensor, global_logits: Tensor) -> Prediction:
    fused = torch.maximum(regional_logits, global_logits)
    return Prediction(regional_logits, global_logits, fused, torch.sigmoid(fused))


@dataclass
class BackboneOutput:
    pyramid: FeaturePyramid
    left_tokens: Tensor
    right_tokens: Tensor
    left_decoded: Tensor
    right_decoded: Tensor
    prediction: Prediction

    @property
    def probs(self) -> Tensor:
        return self.prediction.fused_probs

    @property
    def logits(self) -> Tensor:
        return self.prediction.fused_logits


class Backbone(nn.Module):
    """Everything used at inference: trunk, fusion, RoIs, transformer, heads."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        n = cfg.n_aus
        self.trunk = ResNetTrunk(cfg.width)
        self.fused_channels = cfg.scaled(cfg.fused_channels)
        self.neck = FusionNeck(self.trunk.channels, self.fused_channels)
        self.roi = RoIFeatureLearning(n, self.fused_channels, cfg.d_model)
        self.transformer = RelationTransformer(n, cfg.d_model, cfg.n_heads, cfg.ffn_dim)
        # one linear unit per AU on its own regional vector
        self.regional_weight = nn.Parameter(torch.empty(n, cfg.d_model))
        self.regional_bias = nn.Parameter(torch.zeros(n))
        nn.init.normal_(self.regional_weight, std=cfg.d_model ** -0.5)
        self.global_head = nn.Linear(self.trunk.channels[-1], n)

    @property
    def stride(self) -> int:
        return 4

    def features(self, images: Tensor) -> FeaturePyramid:
        size = self.cfg.input_size
        if images.dim() != 4 or images.shape[1] != 3 or tuple(images.shape[-2:]) != (size, size):
            raise ValueError(f"expected (B, 3, {size}, {size}) input, got {tuple(images.shape)}")
        stages = self.trunk(images)
        return FeaturePyramid(stages, self.neck(stages))

    def roi_tokens(self, fused: Tensor, centers: Tensor) -> tuple[Tensor, Tensor]:
        """``centers``: ``(B, N, 2, 2)`` image pixels, side 0 = left."""
        size = self.cfg.roi_size
        map_centers = image_to_map_centers(centers, self.stride, size)
        left = self.roi(crop_rois(fused, map_centers[:, :, 0], size))
        right = self.roi(crop_rois(fused, map_centers[:, :, 1], size))
        return left, right

    def forward(self, images: Tensor, centers: Tensor) -> BackboneOutput:
        pyramid = self.features(images)
        left, right = self.roi_tokens(pyramid.fused, centers)
        dl, dr = self.transformer.sides(left, right)
        regional = (dl + dr) / 2
        regional_logits = (regional * self.regional_weight).sum(-1) + self.regional_bias
        global_logits = self.global_head(pyramid.stages[-1].mean(dim=(-2, -1)))
        pred = fuse_logits(regional_logits, global_logits)
        return BackboneOutput(pyramid, left, right, dl, dr, pred)

    @torch.no_grad()
    def predict(self, images: Tensor, centers: Tensor) -> Prediction:
        was_training = self.training
        self.eval()
        try:
            return self(images, centers).prediction
        finally:
            self.train(was_training)
