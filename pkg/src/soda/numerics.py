"""Autodiff entry point, Adam with global-norm clipping, LR schedules, EMA and
learning-rate equalization.

Tensors and reverse-mode differentiation come from torch; everything that
decides *how* parameters move lives here.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Dict, Iterable, Mapping, Optional

import torch
from torch import Tensor, nn
import torch.nn.functional as F

ParamStore = Dict[str, Tensor]


class UnsupportedPrimitiveError(RuntimeError):
    pass


# Backward node names (suffix digits stripped) that ``grad`` accepts.
SUPPORTED_PRIMITIVES = frozenset(
    {
        # elementwise
        "Add", "Sub", "Mul", "Div", "Neg", "Pow", "Exp", "Log", "Sqrt", "Rsqrt",
        "Sin", "Cos", "Tanh", "Sigmoid", "Relu", "Gelu", "Silu", "Abs", "Clamp",
        "Where", "Lerp", "Reciprocal", "Square",
        # linear algebra
        "Mm", "Addmm", "Bmm", "Mv", "Dot", "Linear",
        # convolution / normalization / pooling / attention
        "Convolution", "NativeGroupNorm", "NativeBatchNorm", "AvgPool2D", "MaxPool2DWithIndices",
        "UpsampleNearest2D", "Softmax", "LogSoftmax", "ScaledDotProductAttention",
        "ScaledDotProductFlashAttentionForCpu",
        # reductions
        "Sum", "Mean", "Amax", "Max", "Min", "Var", "Std", "Norm", "LinalgVectorNorm",
        "Prod",
        # shape
        "View", "Reshape", "UnsafeView", "Permute", "Transpose", "T", "Expand", "Cat",
        "Stack", "Split", "SplitWithSizes", "Slice", "Select", "Index", "Squeeze",
        "Unsqueeze", "Clone", "Repeat", "Flip", "Alias", "ReshapeAlias", "ToCopy", "Unbind",
        "Constant PadNd", "ConstantPadNd", "MaskedFill", "Gather",
        # losses and leaves
        "MseLoss", "NllLoss", "AccumulateGrad",
    }
)


def _node_name(node) -> str:
    name = type(node).__name__
    if name.endswith("Backward0") or name.endswith("Backward1"):
        name = name[: -len("Backward0")]
    elif name.endswith("Backward"):
        name = name[: -len("Backward")]
    return name


def check_graph(loss: Tensor) -> None:
    """Raise ``UnsupportedPrimitiveError`` if the graph of ``loss`` contains a
    backward node outside :data:`SUPPORTED_PRIMITIVES`."""
    seen = set()
    stack = [loss.grad_fn]
    while stack:
        node = stack.pop()
        if node is None or id(node) in seen:
            continue
        seen.add(id(node))
        name = _node_name(node)
        if name not in SUPPORTED_PRIMITIVES:
            raise UnsupportedPrimitiveError(f"unsupported primitive in graph: {name}")
        stack.extend(nxt for nxt, _ in node.next_functions)


def grad(loss_fn: Callable[[], Tensor], params: Mapping[str, Tensor], check: bool = True) -> ParamStore:
    """Reverse-mode gradients of the scalar ``loss_fn()`` w.r.t. every entry of
    ``params``. Parameters the loss does not depend on get zeros."""
    names = list(params)
    tensors = [params[n] for n in names]
    for n, p in zip(names, tensors):
        if not p.requires_grad:
            raise ValueError(f"parameter {n!r} does not require grad")
    loss = loss_fn()
    if loss.numel() != 1:
        raise ValueError("loss_fn must return a scalar")
    if loss.grad_fn is None:
        return {n: torch.zeros_like(p) for n, p in zip(names, tensors)}
    if check:
        check_graph(loss)
    grads = torch.autograd.grad(loss, tensors, allow_unused=True)
    return {
        n: (torch.zeros_like(p) if g is None else g) for n, p, g in zip(names, tensors, grads)
    }


@dataclass
class OptimConfig:
    lr_base: float = 2e-4
    beta1: float = 0.9
    beta2: float = 0.95
    eps: float = 1e-8
    weight_decay: float = 0.05
    grad_clip_norm: float = 0.5
    warmup_steps: int = 200
    decay_steps: int = 5000
    lr_floor_ratio: float = 0.25
    ema_decay: float = 0.9999
    encoder_lr_ratio: float = 2.0

    def __post_init__(self):
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise ValueError("beta1 and beta2 must lie in (0, 1)")
        if self.lr_base <= 0:
            raise ValueError("lr_base must be positive")
        if self.encoder_lr_ratio < 1:
            raise ValueError("encoder_lr_ratio must be >= 1")


@dataclass
class AdamState:
    m: ParamStore = field(default_factory=dict)
    v: ParamStore = field(default_factory=dict)


def global_norm(grads: Iterable[Tensor]) -> Tensor:
    # fixed summation order keeps the result reproducible
    total = None
    for g in grads:
        s = g.double().pow(2).sum()
        total = s if total is None else total + s
    if total is None:
        return torch.zeros((), dtype=torch.float64)
    return total.sqrt()


def clip_by_global_norm(grads: ParamStore, max_norm: float) -> ParamStore:
    norm = global_norm(grads.values())
    if max_norm <= 0 or norm <= max_norm:
        return dict(grads)
    scale = max_norm / float(norm)
    return {n: g * scale for n, g in grads.items()}


@torch.no_grad()
def adam_step(
    params: Mapping[str, Tensor],
    grads: Mapping[str, Tensor],
    state: AdamState,
    cfg: OptimConfig,
    step: int,
    lr: Optional[float] = None,
) -> AdamState:
    """One Adam update with bias correction and decoupled weight decay.

    Raw gradients are clipped by global norm first. ``params`` are updated in
    place; ``state`` is updated in place and returned.
    """
    if step < 1:
        raise ValueError("step must be >= 1")
    for n, g in grads.items():
        if g.shape != params[n].shape:
            raise ValueError(f"gradient shape mismatch for {n!r}")
        if not torch.isfinite(g).all():
            raise FloatingPointError(f"non-finite gradient for parameter {n!r}")
    lr = cfg.lr_base if lr is None else lr
    grads = clip_by_global_norm(dict(grads), cfg.grad_clip_norm)
    bc1 = 1.0 - cfg.beta1**step
    bc2 = 1.0 - cfg.beta2**step
    for n, g in grads.items():
        p = params[n]
        m = state.m.get(n)
        v = state.v.get(n)
        if m is None:
            m = state.m[n] = torch.zeros_like(p)
            v = state.v[n] = torch.zeros_like(p)
        m.mul_(cfg.beta1).add_(g, alpha=1.0 - cfg.beta1)
        v.mul_(cfg.beta2).addcmul_(g, g, value=1.0 - cfg.beta2)
        update = (m / bc1) / ((v / bc2).sqrt() + cfg.eps)
        if cfg.weight_decay:
            update = update + cfg.weight_decay * p
        p.sub_(lr * update)
    return state


def lr_at(step: int, cfg: OptimConfig, schedule: str = "warmup_cosine") -> float:
    if step < 0:
        raise ValueError("step must be >= 0")
    if cfg.warmup_steps > 0 and step < cfg.warmup_steps:
        return cfg.lr_base * step / cfg.warmup_steps
    if schedule == "constant":
        return cfg.lr_base
    if schedule != "warmup_cosine":
        raise ValueError(f"unknown lr schedule {schedule!r}")
    floor = cfg.lr_floor_ratio * cfg.lr_base
    progress = min(1.0, (step - cfg.warmup_steps) / max(1, cfg.decay_steps))
    return floor + (cfg.lr_base - floor) * 0.5 * (1.0 + math.cos(math.pi * progress))


@torch.no_grad()
def ema_update(shadow: ParamStore, params: Mapping[str, Tensor], decay: float) -> ParamStore:
    for n, p in params.items():
        s = shadow[n]
        if s.shape != p.shape:
            raise ValueError(f"shape mismatch for {n!r}")
        s.lerp_(p.detach(), 1.0 - decay)
    return shadow


def ema_decay_at(step: int, decay: float) -> float:
    """Effective decay at ``step``: ramps as (1 + n) / (10 + n) so the shadow
    forgets the initialization quickly, then holds at ``decay``."""
    if step < 0:
        raise ValueError("step must be >= 0")
    return min(decay, (1.0 + step) / (10.0 + step))


class EqualizedLinear(nn.Linear):
    """Linear layer whose stored weight is multiplied by ``lr_mult`` at use."""

    lr_mult: float = 1.0

    def forward(self, x: Tensor) -> Tensor:
        return F.linear(x, self.weight * self.lr_mult, self.bias)


class EqualizedConv2d(nn.Conv2d):
    lr_mult: float = 1.0

    def forward(self, x: Tensor) -> Tensor:
        return self._conv_forward(x, self.weight * self.lr_mult, self.bias)


@torch.no_grad()
def lr_equalized_init(module: nn.Module, k: float) -> nn.Module:
    """Divide stored weights of every equalized layer by ``k`` and let the
    forward pass multiply them back. The computed function is unchanged while
    the effective Adam step on those weights grows by ``k``."""
    if k <= 0:
        raise ValueError("k must be positive")
    for layer in module.modules():
        if isinstance(layer, (EqualizedLinear, EqualizedConv2d)):
            layer.weight.div_(k)
            layer.lr_mult = layer.lr_mult * k
    return module
