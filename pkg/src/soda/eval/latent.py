"""Latent-space analysis: principal directions, traversals and interpolation."""

from __future__ import annotations

from typing import Optional, Tuple

import numpy as np


def pca_directions(latents, count: int) -> Tuple[np.ndarray, np.ndarray]:
    """Top ``count`` principal directions (rows, orthonormal) and their
    variances, largest first. Each direction is signed so that its
    largest-magnitude component is positive."""
    z = np.asarray(latents, dtype=np.float64)
    D = z.shape[1]
    if count > D:
        raise ValueError(f"asked for {count} directions of a {D}-dim latent")
    zc = z - z.mean(axis=0)
    cov = zc.T @ zc / max(1, len(z) - 1)
    w, V = np.linalg.eigh(cov)
    order = np.argsort(w)[::-1][:count]
    dirs = V[:, order].T.copy()
    for row in dirs:
        if row[np.argmax(np.abs(row))] < 0:
            row *= -1
    return dirs, np.clip(w[order], 0, None)


def _symmetric_grid(steps: int) -> np.ndarray:
    # exact zero in the middle for odd step counts
    i = np.arange(steps, dtype=np.float64)
    return (2 * i - (steps - 1)) / (steps - 1)


def traverse(z, direction, eigenvalue: float, steps: int, section: Optional[slice] = None) -> np.ndarray:
    """Latents z + s t for t evenly spaced over [-sqrt(lambda), sqrt(lambda)].

    With ``section`` the direction lives in that sub-vector and every other
    coordinate is left untouched.
    """
    if steps < 2:
        raise ValueError("need at least two steps")
    z = np.asarray(z, dtype=np.float64)
    s = np.asarray(direction, dtype=np.float64)
    t = np.sqrt(max(eigenvalue, 0.0)) * _symmetric_grid(steps)
    out = np.repeat(z[None], steps, axis=0)
    if section is None:
        out = out + t[:, None] * s[None]
    else:
        out[:, section] = out[:, section] + t[:, None] * s[None]
    return out


def interpolate(z1, z2, n: int) -> np.ndarray:
    """n latents along the segment from z1 to z2, endpoints included."""
    if n < 2:
        raise ValueError("need at least two points")
    z1, z2 = np.asarray(z1, np.float64), np.asarray(z2, np.float64)
    t = np.arange(n, dtype=np.float64)[:, None] / (n - 1)
    return (1 - t) * z1[None] + t * z2[None]
