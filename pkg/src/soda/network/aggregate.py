from __future__ import annotations

import math

import torch
from torch import Tensor, nn
import torch.nn.functional as F


class _Block(nn.Module):
    def __init__(self, dim, heads, hidden_mult):
        super().__init__()
        self.heads = heads
        self.norm1 = nn.LayerNorm(dim)
        self.qkv = nn.Linear(dim, 3 * dim)
        self.proj = nn.Linear(dim, dim)
        self.norm2 = nn.LayerNorm(dim)
        self.fc1 = nn.Linear(dim, hidden_mult * dim)
        self.fc2 = nn.Linear(hidden_mult * dim, dim)
        # residual branches start at zero so the block is the identity
        for lin in (self.proj, self.fc2):
            nn.init.zeros_(lin.weight)
            nn.init.zeros_(lin.bias)

    def forward(self, x):
        B, K, D = x.shape
        hd = D // self.heads
        q, k, v = self.qkv(self.norm1(x)).reshape(B, K, 3, self.heads, hd).permute(2, 0, 3, 1, 4)
        att = torch.softmax(q @ k.transpose(-1, -2) / math.sqrt(hd), dim=-1)
        x = x + self.proj((att @ v).transpose(1, 2).reshape(B, K, D))
        return x + self.fc2(F.gelu(self.fc1(self.norm2(x))))


class ViewAggregator(nn.Module):
    """Shallow transformer over a set of view latents, mean-pooled.

    No positional encoding is used, so the output does not depend on the
    order of the views.
    """

    def __init__(self, dim: int, depth: int = 2, heads: int = 4, hidden_mult: int = 4):
        super().__init__()
        if dim % heads:
            raise ValueError("latent dim must be divisible by the number of heads")
        self.blocks = nn.ModuleList(_Block(dim, heads, hidden_mult) for _ in range(depth))

    def forward(self, latents: Tensor) -> Tensor:
        x = latents
        for blk in self.blocks:
            x = blk(x)
        return x.mean(dim=1)


def aggregate_views(latents: Tensor, method: str = "mean", transformer: ViewAggregator = None) -> Tensor:
    """Collapse (B, k, D) view latents into (B, D)."""
    if latents.ndim == 2:
        latents = latents[None]
    if latents.shape[1] == 0:
        raise ValueError("need at least one view")
    if method == "mean":
        return latents.mean(dim=1)
    if method == "transformer":
        if transformer is None:
            raise ValueError("transformer aggregation needs a ViewAggregator")
        return transformer(latents)
    raise ValueError(f"unknown aggregation method {method!r}")
