"""Importance matrices and Disentanglement / Completeness / Informativeness."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Optional, Sequence

import numpy as np


@dataclass
class ImportanceMatrix:
    R: np.ndarray  # (latent dims, factors), non-negative
    method: str
    unpredictable: List[int] = field(default_factory=list)


@dataclass
class DciScores:
    disentanglement: float
    completeness: float
    informativeness: float
    flags: List[str] = field(default_factory=list)


def _standardize(z):
    z = np.asarray(z, dtype=np.float64)
    sd = z.std(axis=0)
    out = np.zeros_like(z)
    ok = sd > 1e-12
    out[:, ok] = (z[:, ok] - z[:, ok].mean(axis=0)) / sd[ok]
    return out


def importance_matrix(latents, factors, method: str = "lasso_abs_coef", alpha: float = 0.02, seed: int = 0) -> ImportanceMatrix:
    """Per factor, fit a predictor of the factor from standardized latents.

    ``lasso_abs_coef``: L1-penalized linear regression onto the centred one-hot
    class indicators; importance = |coefficient| summed over classes.
    ``tree_gain``: gradient-boosted trees, importance = split gain.
    """
    z = _standardize(latents)
    y = np.asarray(factors)
    if y.ndim == 1:
        y = y[:, None]
    D, K = z.shape[1], y.shape[1]
    R = np.zeros((D, K))
    unpredictable = []
    for j in range(K):
        classes, idx = np.unique(y[:, j], return_inverse=True)
        if len(classes) < 2:
            unpredictable.append(j)
            continue
        if method == "lasso_abs_coef":
            from sklearn.linear_model import Lasso

            onehot = np.eye(len(classes))[idx]
            reg = Lasso(alpha=alpha, fit_intercept=True, max_iter=5000, tol=1e-6, selection="cyclic")
            reg.fit(z, onehot - onehot.mean(axis=0))
            R[:, j] = np.abs(np.atleast_2d(reg.coef_)).sum(axis=0)
        elif method == "tree_gain":
            from sklearn.ensemble import GradientBoostingClassifier

            clf = GradientBoostingClassifier(n_estimators=20, max_depth=3, random_state=seed)
            clf.fit(z, idx)
            R[:, j] = clf.feature_importances_
        else:
            raise ValueError(f"unknown importance method {method!r}")
        if not R[:, j].any():
            unpredictable.append(j)
    return ImportanceMatrix(R, method, unpredictable)


def _normalized_entropy(P: np.ndarray, axis: int, n: int) -> np.ndarray:
    if n <= 1:
        return np.zeros(P.shape[1 - axis])
    with np.errstate(divide="ignore", invalid="ignore"):
        logs = np.where(P > 0, np.log(np.where(P > 0, P, 1.0)), 0.0)
    # rounding can push a uniform row a hair past 1
    return np.clip(-(P * logs).sum(axis=axis) / np.log(n), 0.0, 1.0)


def dci(R, informativeness: Optional[Sequence[float]] = None) -> DciScores:
    """Scores in percent. Rows of ``R`` are latent dims, columns factors."""
    if isinstance(R, ImportanceMatrix):
        R = R.R
    R = np.asarray(R, dtype=np.float64)
    if (R < 0).any():
        raise ValueError("importance matrix must be non-negative")
    D, K = R.shape
    info = float(np.mean(informativeness) * 100.0) if informativeness is not None and len(informativeness) else float("nan")
    total = R.sum()
    flags = []
    if total <= 0:
        return DciScores(0.0, 0.0, info, ["all-zero importance matrix"])
    row = R.sum(axis=1)
    P = np.divide(R, row[:, None], out=np.zeros_like(R), where=row[:, None] > 0)
    d_i = np.where(row > 0, 1.0 - _normalized_entropy(P, 1, K), 0.0)
    disent = float(np.sum(row / total * d_i))
    col = R.sum(axis=0)
    Q = np.divide(R, col[None, :], out=np.zeros_like(R), where=col[None, :] > 0)
    c_j = np.where(col > 0, 1.0 - _normalized_entropy(Q, 0, D), 0.0)
    if (col <= 0).any():
        flags.append(f"factors with zero importance: {np.flatnonzero(col <= 0).tolist()}")
    return DciScores(100.0 * disent, 100.0 * float(c_j.mean()), info, flags)
