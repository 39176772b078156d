"""Segmentation input construction and the segmentation head."""
from __future__ import annotations

from typing import Sequence

import torch
import torch.nn.functional as F
from torch import Tensor, nn

from .losses import EPS, distance_map, similarity_map

FUSION_MODES = ("product-similarity", "concat-ST", "cosine-distance")


def _upsample_to(x: Tensor, size: tuple[int, int]) -> Tensor:
    if tuple(x.shape[-2:]) == tuple(size):
        return x
    return F.interpolate(x, size=size, mode="bilinear", align_corners=False)


def fused_channels(mode: str, channels: Sequence[int] = (64, 128, 256)) -> int:
    if mode == "product-similarity":
        return sum(channels)
    if mode == "concat-ST":
        return 2 * sum(channels)
    if mode == "cosine-distance":
        return len(channels)
    raise ValueError(f"unknown fusion mode {mode!r}; expected one of {FUSION_MODES}")


def build_fused_input(
    teacher_pyr: Sequence[Tensor], student_pyr: Sequence[Tensor], mode: str = "product-similarity", eps: float = EPS
) -> Tensor:
    """Bring every level to the stride-4 grid and concatenate along channels.

    ``product-similarity`` stacks the normalized feature products, ``concat-ST``
    stacks raw student then teacher features, ``cosine-distance`` stacks the
    per-level distance maps (one channel each).
    """
    if mode not in FUSION_MODES:
        raise ValueError(f"unknown fusion mode {mode!r}; expected one of {FUSION_MODES}")
    if len(teacher_pyr) != len(student_pyr):
        raise ValueError("teacher and student pyramids differ in depth")
    size = tuple(teacher_pyr[0].shape[-2:])
    parts = []
    for f_t, f_s in zip(teacher_pyr, student_pyr):
        if f_t.shape != f_s.shape:
            raise ValueError(f"level shape mismatch: {tuple(f_t.shape)} vs {tuple(f_s.shape)}")
        if mode == "product-similarity":
            parts.append(_upsample_to(similarity_map(f_t, f_s, eps), size))
        elif mode == "cosine-distance":
            parts.append(_upsample_to(distance_map(similarity_map(f_t, f_s, eps)).unsqueeze(1), size))
        else:
            parts.append(_upsample_to(f_s, size))
    if mode == "concat-ST":
        parts += [_upsample_to(f_t, size) for f_t in teacher_pyr]
    return torch.cat(parts, dim=1)


class ResidualBlock(nn.Module):
    def __init__(self, cin: int, cout: int):
        super().__init__()
        self.conv1 = nn.Conv2d(cin, cout, 3, padding=1, bias=False)
        self.bn1 = nn.BatchNorm2d(cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, padding=1, bias=False)
        self.bn2 = nn.BatchNorm2d(cout)
        self.proj = None
        if cin != cout:
            self.proj = nn.Sequential(nn.Conv2d(cin, cout, 1, bias=False), nn.BatchNorm2d(cout))

    def forward(self, x: Tensor) -> Tensor:
        identity = x if self.proj is None else self.proj(x)
        out = F.relu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        return F.relu(out + identity)


class ASPP(nn.Module):
    """Atrous spatial pyramid pooling: a 1x1 branch, three dilated 3x3 branches and image pooling."""

    def __init__(self, cin: int, width: int = 256, rates: Sequence[int] = (6, 12, 18)):
        super().__init__()

        def branch(kernel: int, dilation: int) -> nn.Sequential:
            pad = 0 if kernel == 1 else dilation
            return nn.Sequential(
                nn.Conv2d(cin, width, kernel, padding=pad, dilation=dilation, bias=False),
                nn.BatchNorm2d(width),
                nn.ReLU(inplace=True),
            )

        self.branches = nn.ModuleList([branch(1, 1)] + [branch(3, r) for r in rates])
        # no batch norm on the pooled branch: a 1x1 map with batch size 1 has no variance
        self.pool = nn.Sequential(nn.AdaptiveAvgPool2d(1), nn.Conv2d(cin, width, 1), nn.ReLU(inplace=True))
        n = len(self.branches) + 1
        self.project = nn.Sequential(nn.Conv2d(n * width, width, 1, bias=False), nn.BatchNorm2d(width), nn.ReLU(inplace=True))

    def forward(self, x: Tensor) -> Tensor:
        outs = [b(x) for b in self.branches]
        outs.append(self.pool(x).expand(-1, -1, *x.shape[-2:]))
        return self.project(torch.cat(outs, dim=1))


class SegmentationHead(nn.Module):
    """Two residual blocks, ASPP, and a 1x1 logit; no resampling, so output size equals input size."""

    def __init__(self, in_channels: int = 448, width: int = 256, rates: Sequence[int] = (6, 12, 18)):
        super().__init__()
        self.in_channels = in_channels
        self.res1 = ResidualBlock(in_channels, width)
        self.res2 = ResidualBlock(width, width)
        self.aspp = ASPP(width, width, rates)
        self.logit = nn.Conv2d(width, 1, 1)

    def forward(self, x: Tensor) -> Tensor:
        """Return anomaly probabilities of shape (N, 1, H, W)."""
        return torch.sigmoid(self.logit(self.aspp(self.res2(self.res1(x)))))


def segment(head: SegmentationHead, x_hat: Tensor) -> Tensor:
    return head(x_hat)
