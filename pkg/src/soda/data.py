"""Procedural sprite dataset with discrete factor labels, view-pair
construction and preprocessing."""

from __future__ import annotations

import colorsys
import csv
import hashlib
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, NamedTuple, Optional, Sequence, Tuple

import numpy as np
import torch

FACTOR_NAMES = ("shape", "hue", "scale", "pos_x", "pos_y", "orientation")
FACTOR_SIZES = (3, 8, 6, 8, 8, 8)
SHAPES = ("square", "circle", "triangle")
CANVAS = 64
POLICIES = ("autoencode", "augment", "pose2d")

BACKGROUND = np.array([0.08, 0.08, 0.1])
PALETTE = np.array([colorsys.hsv_to_rgb(k / 8, 0.85, 0.95) for k in range(8)])
POS_ORIGIN = 18  # pixel offset of bin 0
POS_STRIDE = 4  # pixels per position bin
RADII = np.linspace(6.0, 13.0, 6)


class FactorSpec(NamedTuple):
    shape: int
    hue: int
    scale: int
    pos_x: int
    pos_y: int
    orientation: int

    def validate(self) -> "FactorSpec":
        for name, v, n in zip(FACTOR_NAMES, self, FACTOR_SIZES):
            if not 0 <= int(v) < n:
                raise ValueError(f"factor {name}={v} outside [0, {n})")
        return self


def num_combinations() -> int:
    return int(np.prod(FACTOR_SIZES))


def index_to_factors(index) -> np.ndarray:
    """Mixed-radix decode, last factor varying fastest. Returns (..., 6) ints."""
    idx = np.asarray(index, dtype=np.int64)
    out = []
    for n in reversed(FACTOR_SIZES):
        out.append(idx % n)
        idx = idx // n
    return np.stack(out[::-1], axis=-1)


def factors_to_index(factors) -> np.ndarray:
    f = np.asarray(factors, dtype=np.int64)
    idx = np.zeros(f.shape[:-1], dtype=np.int64)
    for k, n in enumerate(FACTOR_SIZES):
        idx = idx * n + f[..., k]
    return idx


def _sdf_box(x, y, half):
    qx, qy = np.abs(x) - half, np.abs(y) - half
    outside = np.hypot(np.maximum(qx, 0), np.maximum(qy, 0))
    return outside + np.minimum(np.maximum(qx, qy), 0)


def _sdf_triangle(x, y, circumradius):
    # equilateral triangle, centroid at the origin, apex along +y
    k = np.sqrt(3.0)
    r = circumradius * k / 2  # half the side length
    px = np.abs(x) - r
    py = y + r / k
    flip = px + k * py > 0
    px, py = np.where(flip, (px - k * py) / 2, px), np.where(flip, (-k * px - py) / 2, py)
    px = px - np.clip(px, -2 * r, 0)
    return -np.hypot(px, py) * np.sign(py)


def render_batch(factors, canvas: int = CANVAS, mode: str = "antialiased") -> np.ndarray:
    """Rasterize (N, 6) factor rows into (N, canvas, canvas, 3) float32 images
    in [0, 1]. ``mode`` is ``antialiased`` or ``nearest`` (hard pixel-center
    coverage)."""
    f = np.asarray(factors, dtype=np.int64).reshape(-1, 6)
    for row in f:
        FactorSpec(*row).validate()
    shape, hue, scale, px, py, orient = (f[:, k][:, None, None].astype(np.float64) for k in range(6))
    c = np.arange(canvas, dtype=np.float64) + 0.5
    gx, gy = c[None, None, :], c[None, :, None]
    cx = POS_ORIGIN + POS_STRIDE * px + 0.5
    cy = POS_ORIGIN + POS_STRIDE * py + 0.5
    R = RADII[f[:, 2]][:, None, None]
    theta = 2 * np.pi * orient / 8
    dx, dy = gx - cx, -(gy - cy)  # y axis up
    cos, sin = np.cos(theta), np.sin(theta)
    lx, ly = cos * dx + sin * dy, -sin * dx + cos * dy  # rotate by -theta
    sdf = np.where(
        shape == 0,
        _sdf_box(lx, ly, R / np.sqrt(2)),
        np.where(shape == 1, np.hypot(lx, ly) - R, _sdf_triangle(lx, ly, R)),
    )
    # orientation marker: a hole at 0.5 R along the local +x axis
    notch = np.hypot(lx - 0.5 * R, ly) - 0.28 * R
    if mode == "nearest":
        cov, hole = (sdf <= 0).astype(np.float64), (notch <= 0).astype(np.float64)
    elif mode == "antialiased":
        cov, hole = np.clip(0.5 - sdf, 0, 1), np.clip(0.5 - notch, 0, 1)
    else:
        raise ValueError(f"unknown render mode {mode!r}")
    alpha = (cov * (1 - hole))[..., None]
    color = PALETTE[f[:, 1]][:, None, None, :]
    img = BACKGROUND * (1 - alpha) + color * alpha
    return img.astype(np.float32)


def _geometry_tag() -> str:
    """Short digest of the render constants, so cached splits go stale when they change."""
    consts = np.concatenate([RADII, PALETTE.ravel(), BACKGROUND, [POS_ORIGIN, POS_STRIDE]])
    return hashlib.sha256(consts.astype("<f8").tobytes()).hexdigest()[:8]


def render(factors: FactorSpec, canvas: int = CANVAS, mode: str = "antialiased") -> np.ndarray:
    return render_batch([tuple(factors)], canvas, mode)[0]


def to_uint8(img: np.ndarray) -> np.ndarray:
    return np.clip(np.round(img * 255.0), 0, 255).astype(np.uint8)


@dataclass
class FactorDataset:
    """Disjoint random train/test subsets of the full factor grid, rendered
    once and kept as uint8."""

    seed: int = 0
    n_train: int = 8000
    n_test: int = 2000
    canvas: int = CANVAS
    train_index: np.ndarray = field(init=False, repr=False)
    test_index: np.ndarray = field(init=False, repr=False)
    train_images: np.ndarray = field(init=False, repr=False)
    test_images: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        total = num_combinations()
        if self.n_train + self.n_test > total:
            raise ValueError("requested more samples than factor combinations")
        perm = np.random.default_rng(self.seed).permutation(total)
        self.train_index = np.sort(perm[: self.n_train])
        self.test_index = np.sort(perm[self.n_train : self.n_train + self.n_test])
        self.train_images = self._load(self.train_index, "train")
        self.test_images = self._load(self.test_index, "test")

    def _load(self, index, split):
        cache_dir = os.environ.get("SODA_CACHE_DIR")
        path = None
        if cache_dir:
            path = Path(cache_dir) / f"sprites_{_geometry_tag()}_c{self.canvas}_s{self.seed}_{split}{len(index)}.npy"
            if path.exists():
                return np.load(path)
        out = np.empty((len(index), self.canvas, self.canvas, 3), dtype=np.uint8)
        for start in range(0, len(index), 512):
            chunk = index[start : start + 512]
            out[start : start + len(chunk)] = to_uint8(render_batch(index_to_factors(chunk), self.canvas))
        if path is not None:
            path.parent.mkdir(parents=True, exist_ok=True)
            np.save(path, out)
        return out

    @property
    def train_factors(self) -> np.ndarray:
        return index_to_factors(self.train_index)

    @property
    def test_factors(self) -> np.ndarray:
        return index_to_factors(self.test_index)

    def channel_stats(self) -> Tuple[np.ndarray, np.ndarray]:
        x = self.train_images.reshape(-1, 3).astype(np.float64) / 255.0
        return x.mean(0), x.std(0)


def export_dataset(out_dir, images: np.ndarray, index: np.ndarray) -> None:
    """Write PNG renders plus a factor table (bin indices) to ``out_dir``."""
    from PIL import Image

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "factors.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(("index",) + FACTOR_NAMES)
        for img, i in zip(images, index):
            w.writerow([int(i)] + [int(v) for v in index_to_factors(i)])
            Image.fromarray(img).save(out / f"{int(i):06d}.png")


# ---------------------------------------------------------------- views


@dataclass
class AugmentConfig:
    rate: float = 0.95
    crop_scale_min: float = 0.6
    crop_ratio: Tuple[float, float] = (3 / 4, 4 / 3)
    flip: bool = True
    hue_jitter: float = 0.0


@dataclass
class ViewPair:
    source: np.ndarray  # encoder input, normalized with dataset statistics
    target: np.ndarray  # denoiser target in [-1, 1]
    source_pose: Optional[np.ndarray] = None  # (2, H, W) canvas coordinates
    target_pose: Optional[np.ndarray] = None
    source_noise_scale: float = 0.0
    raw_source: Optional[np.ndarray] = field(default=None, repr=False)
    raw_target: Optional[np.ndarray] = field(default=None, repr=False)


def normalize(image: np.ndarray, role: str, stats=None) -> np.ndarray:
    """Source views are standardized per channel; targets map [0,1] -> [-1,1]."""
    if role == "target":
        return image * 2.0 - 1.0
    if role == "source":
        if stats is None:
            raise ValueError("source normalization needs (mean, std)")
        mu, sd = (np.asarray(s, dtype=np.float64) for s in stats)
        return ((image - mu) / sd).astype(np.float32)
    raise ValueError(f"unknown role {role!r}")


def denormalize(image: np.ndarray, role: str, stats=None) -> np.ndarray:
    if role == "target":
        return (image + 1.0) / 2.0
    mu, sd = (np.asarray(s, dtype=np.float64) for s in stats)
    return image * sd + mu


def add_source_noise(x, scale: float, rng: np.random.Generator):
    if scale < 0:
        raise ValueError("noise scale must be >= 0")
    if scale == 0:
        return x
    return (x + scale * rng.standard_normal(np.shape(x))).astype(np.float32)


def _resize_bilinear(img: np.ndarray, size: int) -> np.ndarray:
    if img.shape[0] == size and img.shape[1] == size:
        return img
    t = torch.from_numpy(np.ascontiguousarray(img)).permute(2, 0, 1)[None].float()
    out = torch.nn.functional.interpolate(t, size=(size, size), mode="bilinear", align_corners=False, antialias=True)
    return out[0].permute(1, 2, 0).numpy()


def block_downsample(img: np.ndarray, size: int) -> np.ndarray:
    """Average-pool an (H, W, C) image by an integer factor to (size, size)."""
    H = img.shape[0]
    if H == size:
        return img
    if H % size:
        raise ValueError(f"cannot block-downsample {H} to {size}")
    f = H // size
    return img.reshape(size, f, size, f, -1).mean(axis=(1, 3)).astype(img.dtype)


def augment(img: np.ndarray, rng: np.random.Generator, cfg: AugmentConfig) -> np.ndarray:
    H = img.shape[0]
    if cfg.rate <= 0 or rng.random() >= cfg.rate:
        return img
    area = rng.uniform(cfg.crop_scale_min, 1.0) * H * H
    ratio = np.exp(rng.uniform(np.log(cfg.crop_ratio[0]), np.log(cfg.crop_ratio[1])))
    w = int(min(H, max(1, round(np.sqrt(area * ratio)))))
    h = int(min(H, max(1, round(np.sqrt(area / ratio)))))
    y0 = int(rng.integers(0, H - h + 1))
    x0 = int(rng.integers(0, H - w + 1))
    out = _resize_bilinear(img[y0 : y0 + h, x0 : x0 + w], H)
    if cfg.flip and rng.random() < 0.5:
        out = out[:, ::-1]
    if cfg.hue_jitter:
        out = out[..., np.roll(np.arange(3), int(rng.integers(0, 3)))] if rng.random() < cfg.hue_jitter else out
    return np.ascontiguousarray(out, dtype=np.float32)


def pose_grid(x0: int, y0: int, size: int, canvas: int) -> np.ndarray:
    """(2, size, size) canvas (x, y) coordinates of each pixel center, in [-1, 1]."""
    c = (np.arange(size, dtype=np.float64) + 0.5)
    xs = (x0 + c) / canvas * 2 - 1
    ys = (y0 + c) / canvas * 2 - 1
    gx, gy = np.meshgrid(xs, ys, indexing="xy")
    return np.stack([gx, gy]).astype(np.float32)


def grid_to_box(grid: np.ndarray, canvas: int) -> Tuple[int, int, int, int]:
    """Recover the crop rectangle (x0, y0, x1, y1) from a pose grid's corners.

    The pixel pitch is read off the grid, so block-downsampled grids (whose
    entries are block centers) map back to the same rectangle.
    """
    to_px = lambda v: (float(v) + 1) / 2 * canvas
    H, W = grid.shape[1:]
    xa, xb = to_px(grid[0, 0, 0]), to_px(grid[0, -1, -1])
    ya, yb = to_px(grid[1, 0, 0]), to_px(grid[1, -1, -1])
    px = (xb - xa) / (W - 1) if W > 1 else 1.0
    py = (yb - ya) / (H - 1) if H > 1 else 1.0
    box = (xa - px / 2, ya - py / 2, xb + px / 2, yb + py / 2)
    return tuple(int(round(v)) for v in box)


def make_view_pair(
    image: np.ndarray,
    policy: str,
    rng: np.random.Generator,
    stats,
    target_size: Optional[int] = None,
    aug: AugmentConfig = AugmentConfig(),
    window: int = 32,
    source_noise_scale: float = 0.0,
) -> ViewPair:
    """Build a (source, target) pair from one image (H, W, 3) in [0, 1]."""
    img = image.astype(np.float32) / 255.0 if image.dtype == np.uint8 else image.astype(np.float32)
    src_pose = tgt_pose = None
    if policy == "autoencode":
        src = tgt = augment(img, rng, aug)
    elif policy == "augment":
        src, tgt = augment(img, rng, aug), augment(img, rng, aug)
    elif policy == "pose2d":
        H = img.shape[0]
        if window > H:
            raise ValueError(f"crop window {window} larger than canvas {H}")
        (sx, sy), (tx, ty) = rng.integers(0, H - window + 1, size=(2, 2))
        src = img[sy : sy + window, sx : sx + window]
        tgt = img[ty : ty + window, tx : tx + window]
        src_pose, tgt_pose = pose_grid(sx, sy, window, H), pose_grid(tx, ty, window, H)
    else:
        raise ValueError(f"unknown view policy {policy!r}")
    tgt_small = tgt if target_size is None else block_downsample(tgt, target_size)
    if tgt_pose is not None and target_size is not None:
        tgt_pose = block_downsample(tgt_pose.transpose(1, 2, 0), target_size).transpose(2, 0, 1)
    source = add_source_noise(normalize(src, "source", stats), source_noise_scale, rng)
    return ViewPair(
        source=source,
        target=normalize(tgt_small, "target").astype(np.float32),
        source_pose=src_pose,
        target_pose=tgt_pose,
        source_noise_scale=source_noise_scale,
        raw_source=src,
        raw_target=tgt,
    )


def collate(pairs: Sequence[ViewPair]) -> Dict[str, Optional[torch.Tensor]]:
    """Stack view pairs into CHW float32 torch tensors."""
    chw = lambda a: torch.from_numpy(np.ascontiguousarray(np.stack(a).transpose(0, 3, 1, 2)))
    batch = {
        "source": chw([p.source for p in pairs]),
        "target": chw([p.target for p in pairs]),
        "source_pose": None,
        "target_pose": None,
    }
    if pairs[0].source_pose is not None:
        batch["source_pose"] = torch.from_numpy(np.stack([p.source_pose for p in pairs]))
        batch["target_pose"] = torch.from_numpy(np.stack([p.target_pose for p in pairs]))
    return batch


def eval_batch(images: np.ndarray, stats, target_size: Optional[int] = None) -> Dict[str, torch.Tensor]:
    """Un-augmented (source, target) tensors for a stack of uint8 images."""
    rng = np.random.default_rng(0)  # unused: autoencode with rate 0 draws nothing
    no_aug = AugmentConfig(rate=0.0)
    return collate([make_view_pair(im, "autoencode", rng, stats, target_size, no_aug) for im in images])
