"""Diffusion variance schedules and timestep striding."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

KINDS = ("linear", "cosine", "sigmoid", "inverted")

DEFAULT_PARAMS = {
    "linear": {"beta_min": 1e-4, "beta_max": 0.02},
    "cosine": {"s": 0.008, "max_beta": 0.999},
    "sigmoid": {"start": -3.0, "end": 3.0, "tau": 1.0, "max_beta": 0.999},
    "inverted": {"p": 3.0, "logsnr_max": 10.0, "logsnr_min": -10.0},
}


@dataclass(frozen=True)
class NoiseSchedule:
    """Per-step retention factors ``alphas[t-1]`` for t in 1..T, their running
    product ``alpha_bars`` and the probability mass used to draw t."""

    kind: str
    alphas: np.ndarray
    alpha_bars: np.ndarray
    timestep_weights: np.ndarray
    params: dict = field(default_factory=dict)

    @property
    def T(self) -> int:
        return len(self.alphas)

    def alpha(self, t: int) -> float:
        return float(self.alphas[t - 1])

    def alpha_bar(self, t: int) -> float:
        # alpha_bar(0) == 1 by convention
        return 1.0 if t == 0 else float(self.alpha_bars[t - 1])

    def log_snr(self) -> np.ndarray:
        ab = self.alpha_bars
        return np.log(ab) - np.log1p(-ab)


def _alphas_from_alpha_bar(alpha_bar: np.ndarray, max_beta: float) -> np.ndarray:
    prev = np.concatenate([[1.0], alpha_bar[:-1]])
    return np.clip(alpha_bar / prev, 1.0 - max_beta, 1.0)


def plateau_ramp(u: np.ndarray, p: float) -> np.ndarray:
    """Monotone map [0,1] -> [0,1] that is flat around u = 1/2."""
    c = 2.0 * u - 1.0
    return 0.5 + 0.5 * np.sign(c) * np.abs(c) ** p


def _sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def build_schedule(kind: str, T: int, weights: str = "uniform", **params) -> NoiseSchedule:
    if T < 1:
        raise ValueError("T must be >= 1")
    if kind not in KINDS:
        raise ValueError(f"unknown schedule kind {kind!r}")
    unknown = set(params) - set(DEFAULT_PARAMS[kind])
    if unknown:
        raise ValueError(f"unknown parameters for {kind} schedule: {sorted(unknown)}")
    cfg = {**DEFAULT_PARAMS[kind], **params}
    t = np.arange(1, T + 1, dtype=np.float64)

    if kind == "linear":
        if cfg["beta_min"] > cfg["beta_max"]:
            raise ValueError("beta_min must not exceed beta_max")
        if not (0 < cfg["beta_min"] and cfg["beta_max"] < 1):
            raise ValueError("betas must lie in (0, 1)")
        alphas = 1.0 - np.linspace(cfg["beta_min"], cfg["beta_max"], T, dtype=np.float64)
    elif kind == "cosine":
        s = cfg["s"]
        f = lambda x: np.cos((x / T + s) / (1 + s) * np.pi / 2) ** 2
        alphas = _alphas_from_alpha_bar(f(t) / f(0.0), cfg["max_beta"])
    elif kind == "sigmoid":
        start, end, tau = cfg["start"], cfg["end"], cfg["tau"]
        if not start < end or tau <= 0:
            raise ValueError("sigmoid schedule needs start < end and tau > 0")
        v0, v1 = _sigmoid(start / tau), _sigmoid(end / tau)
        ab = (v1 - _sigmoid(((t / T) * (end - start) + start) / tau)) / (v1 - v0)
        alphas = _alphas_from_alpha_bar(ab, cfg["max_beta"])
    else:
        if cfg["p"] <= 1:
            raise ValueError("inverted schedule needs p > 1")
        if not cfg["logsnr_min"] < cfg["logsnr_max"]:
            raise ValueError("logsnr_min must be below logsnr_max")
        lam = cfg["logsnr_max"] + (cfg["logsnr_min"] - cfg["logsnr_max"]) * plateau_ramp(t / T, cfg["p"])
        alphas = _alphas_from_alpha_bar(_sigmoid(lam), 1.0)

    alpha_bars = np.cumprod(alphas)
    return NoiseSchedule(
        kind=kind,
        alphas=alphas,
        alpha_bars=alpha_bars,
        timestep_weights=timestep_weight_law(weights, T),
        params=cfg,
    )


def timestep_weight_law(law, T: int) -> np.ndarray:
    """``uniform``, ``inverted_u`` (w ∝ sin²(πt/T)) or an explicit length-T array."""
    if isinstance(law, str):
        if law == "uniform":
            w = np.ones(T)
        elif law == "inverted_u":
            w = np.sin(np.pi * np.arange(1, T + 1) / T) ** 2
            if w.sum() == 0:
                w = np.ones(T)
        else:
            raise ValueError(f"unknown timestep weight law {law!r}")
    else:
        w = np.asarray(law, dtype=np.float64)
        if w.shape != (T,) or (w < 0).any() or w.sum() <= 0:
            raise ValueError("explicit weights must be a non-negative length-T vector")
    return w / w.sum()


def with_weights(schedule: NoiseSchedule, law) -> NoiseSchedule:
    return NoiseSchedule(
        schedule.kind, schedule.alphas, schedule.alpha_bars,
        timestep_weight_law(law, schedule.T), schedule.params,
    )


def sample_timestep(rng: np.random.Generator, schedule: NoiseSchedule, size: Optional[int] = None):
    """Draw 1-based timesteps from ``schedule.timestep_weights``."""
    draws = rng.choice(schedule.T, size=size, p=schedule.timestep_weights) + 1
    return int(draws) if size is None else draws


@dataclass(frozen=True)
class StridedSchedule:
    parent: NoiseSchedule
    steps: np.ndarray  # strictly increasing 1-based timesteps, last == T

    def __len__(self) -> int:
        return len(self.steps)

    def composite_alphas(self) -> np.ndarray:
        """Retention factor over each stride (t_{i-1}, t_i], with t_0 = 0."""
        ab = self.parent.alpha_bars[self.steps - 1]
        prev = np.concatenate([[1.0], ab[:-1]])
        return ab / prev

    def pairs(self):
        """Yield (t, t_prev) from the last stride down to the first."""
        prev = np.concatenate([[0], self.steps[:-1]])
        for t, tp in zip(self.steps[::-1], prev[::-1]):
            yield int(t), int(tp)


def stride(schedule: NoiseSchedule, L: int) -> StridedSchedule:
    T = schedule.T
    if not 1 <= L <= T:
        raise ValueError(f"stride length must lie in [1, {T}], got {L}")
    steps = np.round(np.arange(1, L + 1) * (T / L)).astype(np.int64)
    steps[-1] = T
    return StridedSchedule(schedule, steps)


def schedule_from_table(kind: str, alpha_bars: Sequence[float], weights=None, params=None) -> NoiseSchedule:
    """Rebuild a schedule from a stored alpha-bar table (checkpoint restore)."""
    ab = np.asarray(alpha_bars, dtype=np.float64)
    alphas = ab / np.concatenate([[1.0], ab[:-1]])
    w = timestep_weight_law("uniform", len(ab)) if weights is None else np.asarray(weights, dtype=np.float64)
    return NoiseSchedule(kind, alphas, ab, w, dict(params or {}))
