"""Sinusoidal encodings of timesteps and coordinates, pinhole camera rays and
their point representations."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import torch
from torch import Tensor

RAY_REPRESENTATIONS = ("concat", "normalized", "plane", "sphere")
RAY_COORDS = ("cartesian", "polar")


@dataclass(frozen=True)
class PosEncodingConfig:
    dim: int = 512
    scale: float = 1e-4
    base: float = 10000.0

    def __post_init__(self):
        if self.dim % 2:
            raise ValueError("positional encoding dim must be even")
        if self.scale <= 0:
            raise ValueError("positional encoding scale must be positive")


def pos_frequencies(cfg: PosEncodingConfig, dtype=torch.float64) -> Tensor:
    # angular frequencies 2*pi*s*base^(2i/dim): the lowest is 2*pi*s, the highest
    # approaches 2*pi*s*base, i.e. about one period over [-1, 1] at the defaults
    i = torch.arange(cfg.dim // 2, dtype=torch.float64)
    freqs = 2 * math.pi * cfg.scale * cfg.base ** (2 * i / cfg.dim)
    return freqs.to(dtype)


def pos_encode(p: Tensor, cfg: PosEncodingConfig) -> Tensor:
    """Encode coordinates in [-1, 1] as interleaved (sin, cos) pairs.

    ``p`` of shape (...) maps to (..., dim); the encoding of the last axis of a
    multi-coordinate input is obtained by calling this per coordinate.
    """
    p = torch.as_tensor(p)
    if not p.is_floating_point():
        p = p.double()
    args = p[..., None] * pos_frequencies(cfg, p.dtype)
    return torch.stack([torch.sin(args), torch.cos(args)], dim=-1).flatten(-2)


def encode_grid(grid: Tensor, cfg: PosEncodingConfig) -> Tensor:
    """(B, C, H, W) coordinate grid -> (B, C*dim, H, W) encoding."""
    enc = pos_encode(grid.permute(0, 2, 3, 1), cfg)  # B,H,W,C,dim
    b, h, w = enc.shape[:3]
    return enc.reshape(b, h, w, -1).permute(0, 3, 1, 2).contiguous()


def timestep_embedding(t: Tensor, dim: int, max_period: float = 10000.0) -> Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(max_period) * torch.arange(half, dtype=torch.float32) / half)
    args = t.float()[:, None] * freqs[None]
    return torch.cat([torch.cos(args), torch.sin(args)], dim=-1)


@dataclass
class RayGrid:
    origins: Tensor  # H, W, 3
    directions: Tensor  # H, W, 3, unit length
    forward: Tensor  # 3, camera viewing axis in world frame
    representation: str = "sphere"
    coords: str = "polar"


def ray_grid_from_camera(
    cam_to_world: Tensor,
    intrinsics: Tensor,
    H: int,
    W: int,
    representation: str = "sphere",
    coords: str = "polar",
) -> RayGrid:
    """Rays through pixel centers of a pinhole camera.

    Camera frame: x right, y up, looking down -z. ``cam_to_world`` is a 3x4 or
    4x4 matrix [R | t]; ``intrinsics`` is the usual 3x3 K.
    """
    M = torch.as_tensor(cam_to_world, dtype=torch.float64)
    K = torch.as_tensor(intrinsics, dtype=torch.float64)
    R, t = M[:3, :3], M[:3, 3]
    if abs(float(torch.linalg.det(R))) < 1e-9:
        raise ValueError("singular camera extrinsics")
    fx, fy, cx, cy = K[0, 0], K[1, 1], K[0, 2], K[1, 2]
    if fx == 0 or fy == 0:
        raise ValueError("singular camera intrinsics")
    v, u = torch.meshgrid(
        torch.arange(H, dtype=torch.float64) + 0.5,
        torch.arange(W, dtype=torch.float64) + 0.5,
        indexing="ij",
    )
    d_cam = torch.stack([(u - cx) / fx, -(v - cy) / fy, -torch.ones_like(u)], dim=-1)
    d = d_cam @ R.T
    d = d / d.norm(dim=-1, keepdim=True)
    forward = R @ torch.tensor([0.0, 0.0, -1.0], dtype=torch.float64)
    return RayGrid(t.expand(H, W, 3).clone(), d, forward / forward.norm(), representation, coords)


def cartesian_to_polar(p: Tensor) -> Tensor:
    """(..., 3) -> (..., 3) as (radius, azimuth, elevation); azimuth is 0 at the poles."""
    x, y, z = p.unbind(-1)
    r = p.norm(dim=-1)
    az = torch.atan2(y, x)
    el = torch.asin(torch.clamp(z / torch.where(r > 0, r, torch.ones_like(r)), -1.0, 1.0))
    return torch.stack([r, az, el], dim=-1)


def polar_to_cartesian(q: Tensor) -> Tensor:
    r, az, el = q.unbind(-1)
    return torch.stack(
        [r * torch.cos(el) * torch.cos(az), r * torch.cos(el) * torch.sin(az), r * torch.sin(el)], dim=-1
    )


def ray_points(rays: RayGrid, radius: float = 1.0, plane_distance: float = 1.0) -> Tensor:
    """Single combined point o + s_d * d per ray, for the point representations."""
    o, d = rays.origins, rays.directions
    norms = d.norm(dim=-1, keepdim=True)
    if (norms == 0).any():
        raise ValueError("degenerate ray with zero direction")
    rep = rays.representation
    if rep == "normalized":
        return o + d / norms
    if rep == "plane":
        cos = (d * rays.forward).sum(-1, keepdim=True)
        if (cos.abs() < 1e-12).any():
            raise ValueError("ray parallel to the image plane")
        return o + (plane_distance / cos) * d
    if rep == "sphere":
        du = d / norms
        b = (o * du).sum(-1, keepdim=True)
        c = (o * o).sum(-1, keepdim=True) - radius**2
        disc = b * b - c
        root = torch.sqrt(torch.clamp(disc, min=0.0))
        near, far = -b - root, -b + root
        s = torch.where(near >= 0, near, far)
        p = o + s * du
        # rays that miss the sphere (or point away from it) use the closest
        # point of approach pushed out to the sphere
        closest = o - b * du
        cn = closest.norm(dim=-1, keepdim=True)
        fallback = torch.where(cn > 0, closest / torch.where(cn > 0, cn, torch.ones_like(cn)), du) * radius
        bad = (disc < 0) | (s < 0)
        p = torch.where(bad, fallback, p)
        return p * (radius / p.norm(dim=-1, keepdim=True))
    raise ValueError(f"no single-point form for representation {rep!r}")


def _to_unit_range(p: Tensor, coords: str, scene_scale: float) -> Tensor:
    if coords == "cartesian":
        return p / scene_scale
    if coords == "polar":
        q = cartesian_to_polar(p)
        return torch.stack([q[..., 0] / scene_scale, q[..., 1] / math.pi, q[..., 2] / (math.pi / 2)], dim=-1)
    raise ValueError(f"unknown coordinate system {coords!r}")


def ray_encode(
    rays: RayGrid,
    cfg: PosEncodingConfig,
    radius: float = 1.0,
    scene_scale: float = 1.0,
) -> Tensor:
    """Encode a ray grid as an (H, W, C) feature grid."""
    if rays.representation not in RAY_REPRESENTATIONS:
        raise ValueError(f"unknown ray representation {rays.representation!r}")
    if (rays.directions.norm(dim=-1) == 0).any():
        raise ValueError("degenerate ray with zero direction")
    if rays.representation == "concat":
        comps = torch.cat(
            [_to_unit_range(rays.origins, rays.coords, scene_scale), _to_unit_range(rays.directions, rays.coords, 1.0)],
            dim=-1,
        )
    else:
        comps = _to_unit_range(ray_points(rays, radius), rays.coords, scene_scale)
    enc = pos_encode(comps, cfg)
    return enc.reshape(*enc.shape[:2], -1)
