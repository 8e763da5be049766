"""Image similarity metrics and the Fréchet distance between Gaussians."""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

PSNR_CAP = 100.0


def _check(x, y):
    x, y = np.asarray(x, dtype=np.float64), np.asarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise ValueError(f"shape mismatch: {x.shape} vs {y.shape}")
    return x, y


def psnr(x, y, max_val: float = 1.0, batched: bool = False) -> float:
    """Peak signal-to-noise ratio in dB, capped at 100 dB for MSE < 1e-10.

    With ``batched`` the leading axis indexes images and the per-image values
    are averaged.
    """
    x, y = _check(x, y)
    if batched:
        return float(np.mean([psnr(a, b, max_val) for a, b in zip(x, y)]))
    mse = np.mean((x - y) ** 2)
    if mse < 1e-10:
        return PSNR_CAP
    return float(10.0 * np.log10(max_val**2 / mse))


def ssim(x, y, window: int = 7, data_range: float = 1.0, batched: bool = False) -> float:
    """Mean SSIM over valid ``window`` x ``window`` uniform windows.

    Images are (H, W) or (H, W, C) with channels scored separately and
    averaged.
    """
    x, y = _check(x, y)
    if batched:
        return float(np.mean([ssim(a, b, window, data_range) for a, b in zip(x, y)]))
    if x.ndim == 2:
        x, y = x[..., None], y[..., None]
    if x.shape[0] < window or x.shape[1] < window:
        raise ValueError("image smaller than the SSIM window")
    c1, c2 = (0.01 * data_range) ** 2, (0.03 * data_range) ** 2
    scores = []
    for c in range(x.shape[2]):
        wx = sliding_window_view(x[..., c], (window, window))
        wy = sliding_window_view(y[..., c], (window, window))
        mx, my = wx.mean(axis=(-1, -2)), wy.mean(axis=(-1, -2))
        vx = (wx * wx).mean(axis=(-1, -2)) - mx * mx
        vy = (wy * wy).mean(axis=(-1, -2)) - my * my
        cxy = (wx * wy).mean(axis=(-1, -2)) - mx * my
        s = ((2 * mx * my + c1) * (2 * cxy + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2))
        scores.append(s.mean())
    return float(np.mean(scores))


def _sym_sqrt(S: np.ndarray) -> np.ndarray:
    w, V = np.linalg.eigh((S + S.T) / 2)
    return (V * np.sqrt(np.clip(w, 0, None))) @ V.T


def frechet(mu1, S1, mu2, S2) -> float:
    """||mu1 - mu2||^2 + Tr(S1 + S2 - 2 (S1 S2)^(1/2)).

    The trace of (S1 S2)^(1/2) equals that of (S1^(1/2) S2 S1^(1/2))^(1/2),
    which only needs symmetric eigendecompositions; negative eigenvalues from
    round-off are clamped to zero.
    """
    mu1, mu2 = np.atleast_1d(np.asarray(mu1, np.float64)), np.atleast_1d(np.asarray(mu2, np.float64))
    S1, S2 = np.atleast_2d(np.asarray(S1, np.float64)), np.atleast_2d(np.asarray(S2, np.float64))
    if mu1.shape != mu2.shape or S1.shape != S2.shape or S1.shape != (mu1.size, mu1.size):
        raise ValueError("inconsistent Gaussian parameter shapes")
    r1 = _sym_sqrt(S1)
    M = r1 @ ((S2 + S2.T) / 2) @ r1
    tr_sqrt = np.sqrt(np.clip(np.linalg.eigvalsh((M + M.T) / 2), 0, None)).sum()
    d = float(np.sum((mu1 - mu2) ** 2) + np.trace(S1) + np.trace(S2) - 2 * tr_sqrt)
    return max(d, 0.0)


def gaussian_stats(features: np.ndarray):
    f = np.asarray(features, dtype=np.float64)
    return f.mean(axis=0), np.cov(f, rowvar=False)


def frechet_from_features(f1: np.ndarray, f2: np.ndarray) -> float:
    return frechet(*gaussian_stats(f1), *gaussian_stats(f2))
