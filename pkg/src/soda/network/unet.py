"""UNet denoiser whose residual blocks are modulated by the timestep and by
one section of the latent code each."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch
from torch import Tensor, nn
import torch.nn.functional as F

from .encodings import timestep_embedding

MODULATION_VARIANTS = ("default", "no_layer", "no_scale", "sum", "concat", "broadcast")


@dataclass
class DenoiserConfig:
    image_size: int = 32
    in_channels: int = 3
    base_channels: int = 32
    channel_mult: Tuple[int, ...] = (1, 2, 2)
    num_res_blocks: int = 1
    attn_lowest: bool = True
    groups: int = 8
    dropout: float = 0.1
    latent_dim: int = 128
    pose_channels: int = 0
    modulation: str = "default"

    def __post_init__(self):
        self.channel_mult = tuple(self.channel_mult)
        if self.modulation not in MODULATION_VARIANTS:
            raise ValueError(f"unknown modulation variant {self.modulation!r}")
        if self.image_size % 2 ** (len(self.channel_mult) - 1):
            raise ValueError("image_size must be divisible by the total downsampling factor")

    @property
    def m(self) -> int:
        return len(self.channel_mult) * self.num_res_blocks

    @property
    def num_sites(self) -> int:
        return 2 * self.m + 1

    @property
    def num_sections(self) -> int:
        return self.m + 1


def section_sizes(D: int, n: int) -> List[int]:
    if n < 1 or D < n:
        raise ValueError(f"cannot split a {D}-dim latent into {n} sections")
    return [len(a) for a in np.array_split(np.arange(D), n)]


def section_slices(D: int, n: int) -> List[slice]:
    out, start = [], 0
    for size in section_sizes(D, n):
        out.append(slice(start, start + size))
        start += size
    return out


def site_section(site: int, m: int) -> int:
    """Latent section that modulates ``site``: i and 2m-i share section i."""
    if not 0 <= site <= 2 * m:
        raise ValueError("site index out of range")
    return site if site <= m else 2 * m - site


def expand_section_mask(keep: Tensor, D: int) -> Tensor:
    """(B, m+1) section keep-mask -> (B, D) elementwise mask."""
    sizes = section_sizes(D, keep.shape[1])
    return torch.repeat_interleave(keep, torch.tensor(sizes), dim=1)


def _groups(ch: int, groups: int) -> int:
    g = min(groups, ch)
    while ch % g:
        g -= 1
    return g


def _unit_affine(linear: nn.Linear, ch: int) -> nn.Linear:
    # outputs (scale=1, shift=0) regardless of the input at initialization
    nn.init.zeros_(linear.weight)
    with torch.no_grad():
        linear.bias.zero_()
        linear.bias[:ch] = 1.0
    return linear


class AdaGN(nn.Module):
    """Group norm followed by timestep modulation then latent modulation.

    ``default``: z_s * (t_s * GN(h) + t_b) + z_b
    ``no_scale``: t_s * GN(h) + t_b + z_b
    ``sum`` / ``concat``: w_s * GN(h) + w_b, with (w_s, w_b) projected from
    t_emb + A z or [t_emb; z]
    ``broadcast``: t_s * GN(h) + t_b (the latent enters at the input instead)
    """

    def __init__(self, channels: int, emb_dim: int, z_dim: int, variant: str = "default", groups: int = 8):
        super().__init__()
        self.channels = channels
        self.variant = variant
        self.norm = nn.GroupNorm(_groups(channels, groups), channels, affine=False)
        if variant in ("default", "no_layer", "no_scale", "broadcast"):
            self.t_proj = _unit_affine(nn.Linear(emb_dim, 2 * channels), channels)
        if variant in ("default", "no_layer", "no_scale"):
            self.z_proj = _unit_affine(nn.Linear(z_dim, 2 * channels), channels)
        elif variant == "sum":
            self.z_embed = nn.Linear(z_dim, emb_dim)
            self.joint_proj = _unit_affine(nn.Linear(emb_dim, 2 * channels), channels)
        elif variant == "concat":
            self.joint_proj = _unit_affine(nn.Linear(emb_dim + z_dim, 2 * channels), channels)

    def modulation(self, t_emb: Tensor, z: Optional[Tensor]) -> Dict[str, Tensor]:
        C = self.channels
        out = {}
        if hasattr(self, "t_proj"):
            out["t_s"], out["t_b"] = self.t_proj(t_emb).split(C, dim=1)
        if hasattr(self, "z_proj"):
            out["z_s"], out["z_b"] = self.z_proj(z).split(C, dim=1)
        elif self.variant == "sum":
            out["w_s"], out["w_b"] = self.joint_proj(t_emb + self.z_embed(z)).split(C, dim=1)
        elif self.variant == "concat":
            out["w_s"], out["w_b"] = self.joint_proj(torch.cat([t_emb, z], dim=1)).split(C, dim=1)
        return out

    def forward(self, h: Tensor, t_emb: Tensor, z: Optional[Tensor], taps: Optional[list] = None) -> Tensor:
        if h.shape[1] != self.channels:
            raise ValueError(f"AdaGN expects {self.channels} channels, got {h.shape[1]}")
        mod = self.modulation(t_emb, z)
        if taps is not None:
            taps.append(mod)
        e = lambda k: mod[k][:, :, None, None]
        g = self.norm(h)
        if self.variant in ("default", "no_layer"):
            return e("z_s") * (e("t_s") * g + e("t_b")) + e("z_b")
        if self.variant == "no_scale":
            return e("t_s") * g + e("t_b") + e("z_b")
        if self.variant in ("sum", "concat"):
            return e("w_s") * g + e("w_b")
        return e("t_s") * g + e("t_b")


class ResBlock(nn.Module):
    def __init__(self, in_ch, out_ch, emb_dim, z_dim, variant, groups, dropout):
        super().__init__()
        self.norm1 = nn.GroupNorm(_groups(in_ch, groups), in_ch)
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, padding=1)
        self.adagn = AdaGN(out_ch, emb_dim, z_dim, variant, groups)
        self.dropout = nn.Dropout(dropout)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, padding=1)
        self.skip = nn.Conv2d(in_ch, out_ch, 1) if in_ch != out_ch else nn.Identity()

    def forward(self, x, t_emb, z, taps=None):
        h = self.conv1(F.gelu(self.norm1(x)))
        h = self.adagn(h, t_emb, z, taps)
        h = self.conv2(self.dropout(F.gelu(h)))
        return (self.skip(x) + h) / math.sqrt(2.0)


class SelfAttention(nn.Module):
    def __init__(self, ch, groups, heads=1):
        super().__init__()
        self.heads = heads
        self.norm = nn.GroupNorm(_groups(ch, groups), ch)
        self.qkv = nn.Conv2d(ch, 3 * ch, 1)
        self.proj = nn.Conv2d(ch, ch, 1)

    def forward(self, x):
        B, C, H, W = x.shape
        q, k, v = self.qkv(self.norm(x)).reshape(B, 3, self.heads, C // self.heads, H * W).unbind(1)
        att = torch.softmax(q.transpose(-1, -2) @ k / math.sqrt(C // self.heads), dim=-1)
        out = (v @ att.transpose(-1, -2)).reshape(B, C, H, W)
        return (x + self.proj(out)) / math.sqrt(2.0)


class Denoiser(nn.Module):
    """Predicts the noise in ``x_t`` given t, the latent and an optional pose grid.

    Modulation sites are the residual blocks: m on the way down, one in the
    middle and m on the way up, where the up block 2m-i consumes the skip of
    down block i and shares its latent section.
    """

    def __init__(self, cfg: DenoiserConfig):
        super().__init__()
        self.cfg = cfg
        ch = cfg.base_channels
        emb_dim = 4 * ch
        self.emb_dim = emb_dim
        self.time_mlp = nn.Sequential(nn.Linear(ch, emb_dim), nn.SiLU(), nn.Linear(emb_dim, emb_dim))
        self.slices = section_slices(cfg.latent_dim, cfg.num_sections)
        variant = cfg.modulation
        site_z_dims = [
            cfg.latent_dim if variant == "no_layer" else self.slices[site_section(s, cfg.m)].stop - self.slices[site_section(s, cfg.m)].start
            for s in range(cfg.num_sites)
        ]
        in_ch = cfg.in_channels + (cfg.latent_dim if variant == "broadcast" else 0)
        self.conv_in = nn.Conv2d(in_ch, ch, 3, padding=1)
        cur = ch + cfg.pose_channels
        site = 0
        self.down = nn.ModuleList()
        self.downsample = nn.ModuleList()
        skip_ch = []
        for level, mult in enumerate(cfg.channel_mult):
            out = ch * mult
            for _ in range(cfg.num_res_blocks):
                self.down.append(ResBlock(cur, out, emb_dim, site_z_dims[site], variant, cfg.groups, cfg.dropout))
                cur = out
                skip_ch.append(cur)
                site += 1
            if level < len(cfg.channel_mult) - 1:
                self.downsample.append(nn.Conv2d(cur, cur, 3, stride=2, padding=1))
        self.mid = ResBlock(cur, cur, emb_dim, site_z_dims[site], variant, cfg.groups, cfg.dropout)
        self.mid_attn = SelfAttention(cur, cfg.groups) if cfg.attn_lowest else nn.Identity()
        site += 1
        self.up = nn.ModuleList()
        self.upsample = nn.ModuleList()
        for level, mult in reversed(list(enumerate(cfg.channel_mult))):
            out = ch * mult
            for _ in range(cfg.num_res_blocks):
                self.up.append(ResBlock(cur + skip_ch.pop(), out, emb_dim, site_z_dims[site], variant, cfg.groups, cfg.dropout))
                cur = out
                site += 1
            if level > 0:
                self.upsample.append(nn.Conv2d(cur, cur, 3, padding=1))
        self.norm_out = nn.GroupNorm(_groups(cur, cfg.groups), cur)
        self.conv_out = nn.Conv2d(cur, cfg.in_channels, 3, padding=1)
        nn.init.zeros_(self.conv_out.weight)
        nn.init.zeros_(self.conv_out.bias)

    def site_latent(self, z: Tensor, site: int) -> Tensor:
        if self.cfg.modulation == "no_layer":
            return z
        return z[:, self.slices[site_section(site, self.cfg.m)]]

    def forward(
        self,
        x_t: Tensor,
        t: Tensor,
        z: Tensor,
        pose: Optional[Tensor] = None,
        keep: Optional[Tensor] = None,
        taps: Optional[list] = None,
    ) -> Tensor:
        cfg = self.cfg
        if x_t.shape[1:] != (cfg.in_channels, cfg.image_size, cfg.image_size):
            raise ValueError(f"x_t has shape {tuple(x_t.shape)}, expected (B, {cfg.in_channels}, {cfg.image_size}, {cfg.image_size})")
        if z.shape != (x_t.shape[0], cfg.latent_dim):
            raise ValueError(f"latent has shape {tuple(z.shape)}, expected ({x_t.shape[0]}, {cfg.latent_dim})")
        if keep is not None:
            z = z * expand_section_mask(keep.to(z.dtype), cfg.latent_dim)
        t_emb = F.silu(self.time_mlp(timestep_embedding(t, cfg.base_channels).to(x_t.dtype)))
        zz = None if cfg.modulation == "broadcast" else z
        if cfg.modulation == "broadcast":
            x_t = torch.cat([x_t, z[:, :, None, None].expand(-1, -1, *x_t.shape[2:])], dim=1)
        h = self.conv_in(x_t)
        if cfg.pose_channels:
            if pose is None:
                pose = h.new_zeros(h.shape[0], cfg.pose_channels, *h.shape[2:])
            elif pose.shape[1] != cfg.pose_channels or pose.shape[2:] != h.shape[2:]:
                raise ValueError("pose grid does not match the denoiser configuration")
            h = torch.cat([h, pose.to(h.dtype)], dim=1)
        elif pose is not None:
            raise ValueError("denoiser was built without pose conditioning")
        site = 0
        skips = []
        di = 0
        for level in range(len(cfg.channel_mult)):
            for _ in range(cfg.num_res_blocks):
                h = self.down[di](h, t_emb, self._z(zz, site), taps)
                skips.append(h)
                di += 1
                site += 1
            if level < len(cfg.channel_mult) - 1:
                h = self.downsample[level](h)
        h = self.mid(h, t_emb, self._z(zz, site), taps)
        h = self.mid_attn(h)
        site += 1
        ui = 0
        for n_up, level in enumerate(reversed(range(len(cfg.channel_mult)))):
            for _ in range(cfg.num_res_blocks):
                h = self.up[ui](torch.cat([h, skips.pop()], dim=1), t_emb, self._z(zz, site), taps)
                ui += 1
                site += 1
            if level > 0:
                h = self.upsample[n_up](F.interpolate(h, scale_factor=2, mode="nearest"))
        return self.conv_out(F.gelu(self.norm_out(h)))

    def _z(self, z, site):
        return None if z is None else self.site_latent(z, site)


def build_modulation_variant(variant: str):
    """Factory ``(channels, emb_dim, z_dim, groups=8) -> AdaGN`` for a variant."""
    if variant not in MODULATION_VARIANTS:
        raise ValueError(f"unknown modulation variant {variant!r}")

    def make(channels: int, emb_dim: int, z_dim: int, groups: int = 8) -> AdaGN:
        return AdaGN(channels, emb_dim, z_dim, variant, groups)

    make.variant = variant
    return make
