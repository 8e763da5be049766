from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Tuple

import torch
from torch import Tensor, nn
import torch.nn.functional as F

from ..numerics import EqualizedConv2d, EqualizedLinear, lr_equalized_init


@dataclass
class EncoderConfig:
    image_size: int = 64
    in_channels: int = 3
    stem_channels: int = 16
    stage_channels: Tuple[int, ...] = (16, 32, 64, 128)
    blocks_per_stage: int = 1
    groups: int = 8
    latent_dim: int = 128
    pose_channels: int = 0
    lr_ratio: float = 2.0

    def __post_init__(self):
        self.stage_channels = tuple(self.stage_channels)


def _gn(ch, groups):
    g = min(groups, ch)
    while ch % g:
        g -= 1
    return nn.GroupNorm(g, ch)


class PreActBlock(nn.Module):
    """Pre-activation residual block (norm, ReLU, conv) x 2."""

    def __init__(self, in_ch, out_ch, stride, groups):
        super().__init__()
        self.norm1 = _gn(in_ch, groups)
        self.conv1 = EqualizedConv2d(in_ch, out_ch, 3, stride=stride, padding=1)
        self.norm2 = _gn(out_ch, groups)
        self.conv2 = EqualizedConv2d(out_ch, out_ch, 3, padding=1)
        self.shortcut = None
        if stride != 1 or in_ch != out_ch:
            self.shortcut = EqualizedConv2d(in_ch, out_ch, 1, stride=stride)

    def forward(self, x):
        pre = F.relu(self.norm1(x))
        skip = x if self.shortcut is None else self.shortcut(pre)
        h = self.conv1(pre)
        h = self.conv2(F.relu(self.norm2(h)))
        return skip + h


class Encoder(nn.Module):
    """Small residual conv net: stem, strided stages, mean pooling, linear head.

    An encoded pose grid, when given, is concatenated to the stem output.
    """

    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        self.cfg = cfg
        self.stem = EqualizedConv2d(cfg.in_channels, cfg.stem_channels, 3, padding=1)
        cur = cfg.stem_channels + cfg.pose_channels
        blocks = []
        for i, out in enumerate(cfg.stage_channels):
            for j in range(cfg.blocks_per_stage):
                blocks.append(PreActBlock(cur, out, 2 if j == 0 else 1, cfg.groups))
                cur = out
        self.blocks = nn.Sequential(*blocks)
        self.norm = _gn(cur, cfg.groups)
        self.head = EqualizedLinear(cur, cfg.latent_dim)
        for mod in self.modules():
            if isinstance(mod, (EqualizedConv2d, EqualizedLinear)):
                nn.init.xavier_uniform_(mod.weight)
                nn.init.zeros_(mod.bias)
        lr_equalized_init(self, cfg.lr_ratio)

    def forward(self, x: Tensor, pose: Optional[Tensor] = None) -> Tensor:
        cfg = self.cfg
        if x.ndim != 4 or x.shape[1] != cfg.in_channels:
            raise ValueError(f"encoder expects (B, {cfg.in_channels}, H, W), got {tuple(x.shape)}")
        h = self.stem(x)
        if cfg.pose_channels:
            if pose is None:
                pose = h.new_zeros(h.shape[0], cfg.pose_channels, *h.shape[2:])
            elif pose.shape[1] != cfg.pose_channels or pose.shape[2:] != h.shape[2:]:
                raise ValueError("source pose grid does not match the encoder configuration")
            h = torch.cat([h, pose.to(h.dtype)], dim=1)
        elif pose is not None:
            raise ValueError("encoder was built without pose conditioning")
        h = F.relu(self.norm(self.blocks(h)))
        return self.head(h.mean(dim=(2, 3)))
