from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Tuple

import torch
from torch import Tensor, nn
import torch.nn.functional as F

from .aggregate import ViewAggregator, aggregate_views
from .encoder import Encoder, EncoderConfig
from .encodings import PosEncodingConfig, encode_grid
from .unet import Denoiser, DenoiserConfig


@dataclass
class ModelConfig:
    kind: str = "soda"  # soda | autoencoder
    latent_dim: int = 128
    source_size: int = 64
    target_size: int = 32
    enc_stem_channels: int = 16
    enc_channels: Tuple[int, ...] = (16, 32, 64, 128)
    enc_blocks_per_stage: int = 1
    base_channels: int = 16
    channel_mult: Tuple[int, ...] = (1, 2, 2)
    num_res_blocks: int = 1
    attn_lowest: bool = True
    groups: int = 8
    dropout: float = 0.1
    bottleneck_dropout: float = 0.0
    modulation: str = "default"
    pose: bool = False
    pose_dim: int = 16
    pos_scale: float = 1e-4
    pos_base: float = 10000.0
    lr_ratio: float = 2.0
    aggregation: str = "mean"

    def __post_init__(self):
        self.enc_channels = tuple(self.enc_channels)
        self.channel_mult = tuple(self.channel_mult)
        if self.kind not in ("soda", "autoencoder"):
            raise ValueError(f"unknown model kind {self.kind!r}")

    @property
    def pose_channels(self) -> int:
        return 2 * self.pose_dim if self.pose else 0

    def pos_cfg(self) -> PosEncodingConfig:
        return PosEncodingConfig(self.pose_dim, self.pos_scale, self.pos_base)

    def encoder_cfg(self) -> EncoderConfig:
        return EncoderConfig(
            image_size=self.source_size,
            stem_channels=self.enc_stem_channels,
            stage_channels=self.enc_channels,
            blocks_per_stage=self.enc_blocks_per_stage,
            groups=self.groups,
            latent_dim=self.latent_dim,
            pose_channels=self.pose_channels,
            lr_ratio=self.lr_ratio,
        )

    def denoiser_cfg(self) -> DenoiserConfig:
        return DenoiserConfig(
            image_size=self.target_size,
            base_channels=self.base_channels,
            channel_mult=self.channel_mult,
            num_res_blocks=self.num_res_blocks,
            attn_lowest=self.attn_lowest,
            groups=self.groups,
            dropout=self.dropout,
            latent_dim=self.latent_dim,
            pose_channels=self.pose_channels,
            modulation=self.modulation,
        )


class SodaModel(nn.Module):
    """Encoder plus latent-modulated denoiser.

    Pose arguments are raw (B, 2, H, W) coordinate grids in [-1, 1]; they are
    sinusoidally encoded here. A pose of ``None`` reads as the masked (zero)
    encoding.
    """

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.encoder = Encoder(cfg.encoder_cfg())
        self.denoiser = Denoiser(cfg.denoiser_cfg())
        self.aggregator = ViewAggregator(cfg.latent_dim) if cfg.aggregation == "transformer" else None

    @property
    def num_sections(self) -> int:
        return self.denoiser.cfg.num_sections

    def encode_pose(self, grid: Optional[Tensor]) -> Optional[Tensor]:
        if grid is None or not self.cfg.pose:
            return None
        return encode_grid(grid, self.cfg.pos_cfg())

    def encode(self, x_src: Tensor, pose_src: Optional[Tensor] = None) -> Tensor:
        z = self.encoder(x_src, self.encode_pose(pose_src))
        if self.training and self.cfg.bottleneck_dropout:
            z = F.dropout(z, self.cfg.bottleneck_dropout)
        return z

    def encode_views(self, views: Tensor, poses: Optional[Tensor] = None) -> Tensor:
        """(B, k, C, H, W) source views -> one aggregated latent per item."""
        B, k = views.shape[:2]
        flat_pose = None if poses is None else poses.flatten(0, 1)
        z = self.encode(views.flatten(0, 1), flat_pose).reshape(B, k, -1)
        return aggregate_views(z, self.cfg.aggregation, self.aggregator)

    def denoise(self, x_t, t, z, pose=None, keep=None, pose_encoded=False, taps=None) -> Tensor:
        p = pose if pose_encoded else self.encode_pose(pose)
        return self.denoiser(x_t, t, z, p, keep, taps)


class VanillaAutoencoder(SodaModel):
    """Same encoder and denoiser network, decoding the image from the latent
    alone: zero image input and a fixed timestep."""

    def decode(self, z: Tensor, pose: Optional[Tensor] = None) -> Tensor:
        size = self.cfg.target_size
        x = z.new_zeros(z.shape[0], 3, size, size)
        t = torch.zeros(z.shape[0], dtype=torch.long)
        return self.denoise(x, t, z, pose)


def build_model(cfg: ModelConfig) -> SodaModel:
    return (VanillaAutoencoder if cfg.kind == "autoencoder" else SodaModel)(cfg)
