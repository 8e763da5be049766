"""Linear probing of frozen latents."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Dict

import numpy as np
import torch
import torch.nn.functional as F


@dataclass
class ProbeConfig:
    epochs: int = 60
    batch_size: int = 256
    lr: float = 3e-3
    dropout: float = 0.1
    label_smoothing: float = 0.1
    weight_init_scale: float = 0.02
    seed: int = 0


@dataclass
class ProbeModel:
    mean: np.ndarray
    var: np.ndarray
    weight: np.ndarray  # (D, C)
    bias: np.ndarray  # (C,)
    classes: np.ndarray

    def normalize(self, z: np.ndarray) -> np.ndarray:
        # batch norm without the affine part
        return (z - self.mean) / np.sqrt(self.var + 1e-5)

    def logits(self, z: np.ndarray) -> np.ndarray:
        return self.normalize(np.asarray(z, np.float64)) @ self.weight + self.bias

    def predict(self, z: np.ndarray) -> np.ndarray:
        return self.classes[np.argmax(self.logits(z), axis=1)]


def probe_fit(latents, labels, cfg: ProbeConfig = ProbeConfig()) -> ProbeModel:
    """Softmax regression on batch-normalized latents, with dropout on the
    inputs, label smoothing and no weight decay."""
    z = np.asarray(latents, dtype=np.float64)
    y = np.asarray(labels)
    classes, y_idx = np.unique(y, return_inverse=True)
    if len(classes) < 2:
        raise ValueError("probe needs at least two classes")
    mean, var = z.mean(axis=0), z.var(axis=0)
    zn = torch.from_numpy((z - mean) / np.sqrt(var + 1e-5))
    target = torch.from_numpy(y_idx.astype(np.int64))
    gen = torch.Generator().manual_seed(cfg.seed)
    W = (torch.randn(z.shape[1], len(classes), generator=gen, dtype=torch.float64) * cfg.weight_init_scale).requires_grad_()
    b = torch.zeros(len(classes), dtype=torch.float64, requires_grad=True)
    opt = torch.optim.Adam([W, b], lr=cfg.lr, weight_decay=0.0)
    n = len(zn)
    for _ in range(cfg.epochs):
        perm = torch.randperm(n, generator=gen)
        for start in range(0, n, cfg.batch_size):
            idx = perm[start : start + cfg.batch_size]
            xb = zn[idx]
            if cfg.dropout:
                keep = (torch.rand(xb.shape, generator=gen, dtype=xb.dtype) >= cfg.dropout).to(xb.dtype)
                xb = xb * keep / (1 - cfg.dropout)
            loss = F.cross_entropy(xb @ W + b, target[idx], label_smoothing=cfg.label_smoothing)
            opt.zero_grad()
            loss.backward()
            opt.step()
    return ProbeModel(mean, var, W.detach().numpy(), b.detach().numpy(), classes)


def smoothed_cross_entropy(model: ProbeModel, latents, labels, smoothing: float) -> float:
    logits = torch.from_numpy(model.logits(latents))
    idx = torch.from_numpy(np.searchsorted(model.classes, np.asarray(labels)).astype(np.int64))
    return float(F.cross_entropy(logits, idx, label_smoothing=smoothing))


def probe_eval(model: ProbeModel, latents, labels) -> Dict[str, float]:
    """Top-1 accuracy, plus macro-F1 when the labels are binary."""
    y = np.asarray(labels)
    pred = model.predict(latents)
    out = {"accuracy": float(np.mean(pred == y))}
    if len(model.classes) == 2:
        f1s = []
        for c in model.classes:
            tp = np.sum((pred == c) & (y == c))
            fp = np.sum((pred == c) & (y != c))
            fn = np.sum((pred != c) & (y == c))
            f1s.append(0.0 if tp == 0 else 2 * tp / (2 * tp + fp + fn))
        out["macro_f1"] = float(np.mean(f1s))
    return out


def chance_accuracy(labels) -> float:
    """Accuracy of always predicting the most frequent class."""
    _, counts = np.unique(np.asarray(labels), return_counts=True)
    return float(counts.max() / counts.sum())
