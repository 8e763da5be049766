"""Forward noising, the denoising objective and the guided ancestral sampler."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Dict, Optional, Union

import torch
from torch import Tensor

from .schedules import NoiseSchedule, stride as make_stride

MASKING_MODES = ("latent", "pose", "latent+pose")
SIGMA_RULES = ("fixed_beta", "fixed_beta_tilde")


@dataclass
class GuidanceConfig:
    strength: float = 2.0
    latent_mask_rate: float = 0.12
    layer_mask_rate: float = 0.15
    pose_mask_rate: float = 0.1
    masking_mode: str = "latent"

    def __post_init__(self):
        for name in ("latent_mask_rate", "layer_mask_rate", "pose_mask_rate"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1]")
        if self.strength < 0:
            raise ValueError("guidance strength must be >= 0")
        if self.masking_mode not in MASKING_MODES:
            raise ValueError(f"unknown masking mode {self.masking_mode!r}")

    @property
    def masks_latent(self) -> bool:
        return "latent" in self.masking_mode

    @property
    def masks_pose(self) -> bool:
        return "pose" in self.masking_mode


def _alpha_bar(schedule: NoiseSchedule, t: Tensor) -> Tensor:
    table = torch.as_tensor(schedule.alpha_bars)
    return torch.where(t > 0, table[(t - 1).clamp(min=0)], torch.ones((), dtype=table.dtype))


def forward_sample(x0: Tensor, t: Union[int, Tensor], eps: Tensor, schedule: NoiseSchedule) -> Tensor:
    """Closed-form marginal sqrt(abar_t) x0 + sqrt(1 - abar_t) eps."""
    t = torch.as_tensor(t, dtype=torch.long)
    if t.ndim == 0:
        t = t.expand(x0.shape[0])
    if (t < 1).any() or (t > schedule.T).any():
        raise ValueError(f"timestep outside [1, {schedule.T}]")
    ab = _alpha_bar(schedule, t).to(x0.dtype).reshape(-1, *([1] * (x0.ndim - 1)))
    return ab.sqrt() * x0 + (1.0 - ab).sqrt() * eps


def draw_masks(B: int, num_sections: int, cfg: GuidanceConfig, gen: torch.Generator) -> Dict[str, Tensor]:
    """Keep-masks (1 = keep) for the latent sections and the pose grids.

    The same number of random draws is made whatever the rates, so changing a
    rate never shifts the rest of the random stream.
    """
    u_latent = torch.rand(B, generator=gen)
    u_layers = torch.rand(B, num_sections, generator=gen)
    u_pose = torch.rand(B, generator=gen)
    latent_keep = (u_latent >= cfg.latent_mask_rate) if cfg.masks_latent else torch.ones(B, dtype=torch.bool)
    keep = (u_layers >= cfg.layer_mask_rate) & latent_keep[:, None]
    pose_keep = (u_pose >= cfg.pose_mask_rate) if cfg.masks_pose else torch.ones(B, dtype=torch.bool)
    return {"sections": keep.float(), "pose": pose_keep.float()}


def training_loss(batch: Dict[str, Optional[Tensor]], model, schedule: NoiseSchedule, cfg: GuidanceConfig, gen: torch.Generator) -> Tensor:
    """Mean squared error between the drawn noise and the model's estimate."""
    x0 = batch["target"]
    B = x0.shape[0]
    if B == 0:
        raise ValueError("empty batch")
    weights = torch.as_tensor(schedule.timestep_weights)
    t = torch.multinomial(weights, B, replacement=True, generator=gen) + 1
    eps = torch.randn(x0.shape, generator=gen, dtype=x0.dtype)
    x_t = forward_sample(x0, t, eps, schedule)
    masks = draw_masks(B, model.num_sections, cfg, gen)
    src_pose = tgt_pose = None
    if batch.get("source_pose") is not None and model.cfg.pose:
        pk = masks["pose"][:, None, None, None]
        src_pose = model.encode_pose(batch["source_pose"]) * pk
        tgt_pose = model.encode_pose(batch["target_pose"]) * pk
    z = model.encoder(batch["source"], src_pose)
    if model.training and model.cfg.bottleneck_dropout:
        z = torch.nn.functional.dropout(z, model.cfg.bottleneck_dropout)
    eps_hat = model.denoiser(x_t, t, z, tgt_pose, masks["sections"])
    return (eps - eps_hat).pow(2).mean()


def autoencoder_loss(batch: Dict[str, Optional[Tensor]], model) -> Tensor:
    """Reconstruction objective of the vanilla encoder-decoder baseline."""
    x = batch["target"]
    if x.shape[0] == 0:
        raise ValueError("empty batch")
    z = model.encode(batch["source"], batch.get("source_pose"))
    return (model.decode(z, batch.get("target_pose")) - x).pow(2).mean()


def guided_epsilon(
    model,
    x_t: Tensor,
    t: Tensor,
    z: Tensor,
    pose: Optional[Tensor] = None,
    g: float = 1.0,
    masking_mode: str = "latent",
    keep: Optional[Tensor] = None,
) -> Tensor:
    """eps(x|0) + g * (eps(x|z) - eps(x|0)); the unconditional branch zeroes
    the latent, and the pose too when the masking mode covers it."""
    if g < 0:
        raise ValueError("guidance strength must be >= 0")
    if g == 1:
        return model.denoise(x_t, t, z, pose, keep)
    uncond_pose = None if "pose" in masking_mode else pose
    uncond = model.denoise(x_t, t, torch.zeros_like(z), uncond_pose)
    if g == 0:
        return uncond
    cond = model.denoise(x_t, t, z, pose, keep)
    return uncond + g * (cond - uncond)


def reverse_step(
    x_t: Tensor,
    t: int,
    eps_hat: Tensor,
    schedule: NoiseSchedule,
    sigma_rule: str = "fixed_beta",
    gen: Optional[torch.Generator] = None,
    t_prev: Optional[int] = None,
    clip_x0: bool = False,
) -> Tensor:
    """One ancestral step from t to t_prev (default t - 1). The retention
    factor over the step is abar_t / abar_{t_prev}; no noise is added when
    t_prev is 0.

    With ``clip_x0`` the implied clean image is clamped to [-1, 1] and the
    mean is taken from the posterior q(x_{t_prev} | x_t, x0). Without any
    clamping this is the same mean written in terms of x0.
    """
    if t < 1:
        raise ValueError("t must be >= 1")
    t_prev = t - 1 if t_prev is None else t_prev
    ab_t = schedule.alpha_bar(t)
    ab_prev = schedule.alpha_bar(t_prev)
    alpha = ab_t / ab_prev
    if clip_x0:
        x0 = ((x_t - math.sqrt(1.0 - ab_t) * eps_hat) / math.sqrt(ab_t)).clamp(-1.0, 1.0)
        mean = (math.sqrt(ab_prev) * (1.0 - alpha) * x0 + math.sqrt(alpha) * (1.0 - ab_prev) * x_t) / (1.0 - ab_t)
    else:
        mean = (x_t - ((1.0 - alpha) / math.sqrt(1.0 - ab_t)) * eps_hat) / math.sqrt(alpha)
    if t_prev == 0:
        return mean
    if sigma_rule == "fixed_beta":
        var = 1.0 - alpha
    elif sigma_rule == "fixed_beta_tilde":
        var = (1.0 - ab_prev) / (1.0 - ab_t) * (1.0 - alpha)
    else:
        raise ValueError(f"unknown sigma rule {sigma_rule!r}")
    noise = torch.randn(x_t.shape, generator=gen, dtype=x_t.dtype)
    return mean + math.sqrt(var) * noise


@torch.no_grad()
def sample(
    model,
    z: Tensor,
    pose_target: Optional[Tensor],
    schedule: NoiseSchedule,
    L: int,
    cfg: GuidanceConfig,
    gen: torch.Generator,
    sigma_rule: str = "fixed_beta",
    keep: Optional[Tensor] = None,
    size: Optional[int] = None,
    clip_x0: bool = False,
) -> Tensor:
    """Guided sampling over an L-step stride, clamped to [-1, 1] at the end.
    ``clip_x0`` additionally clamps the implied clean image at every step.

    ``z`` is either (B, D) latents or (B, k, C, H, W) source views, which are
    encoded and aggregated first.
    """
    was_training = model.training
    model.eval()
    try:
        if z.ndim == 5:
            z = model.encode_views(z)
        size = size or model.cfg.target_size
        x = torch.randn((z.shape[0], 3, size, size), generator=gen)
        for t, t_prev in make_stride(schedule, L).pairs():
            tt = torch.full((z.shape[0],), t, dtype=torch.long)
            eps = guided_epsilon(model, x, tt, z, pose_target, cfg.strength, cfg.masking_mode, keep)
            x = reverse_step(x, t, eps, schedule, sigma_rule, gen, t_prev, clip_x0)
        return x.clamp(-1.0, 1.0)
    finally:
        model.train(was_training)
