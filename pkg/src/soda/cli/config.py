"""Run configuration: typed INI sections, strict keys, stable hashing."""

from __future__ import annotations

import configparser
import dataclasses
import hashlib
import io
import json
import typing
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Tuple

from ..diffusion import GuidanceConfig
from ..network.model import ModelConfig
from ..numerics import OptimConfig
from ..schedules import DEFAULT_PARAMS, KINDS, NoiseSchedule, build_schedule


class ConfigError(ValueError):
    pass


@dataclass
class ScheduleSection:
    kind: str = "inverted"
    T: int = 1000
    weights: str = "uniform"
    params: Dict[str, float] = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"unknown schedule kind {self.kind!r}")
        unknown = set(self.params) - set(DEFAULT_PARAMS[self.kind])
        if unknown:
            raise ConfigError(f"unknown parameters for {self.kind} schedule: {sorted(unknown)}")

    def build(self) -> NoiseSchedule:
        return build_schedule(self.kind, self.T, self.weights, **self.params)


@dataclass
class TrainingSection:
    steps: int = 2000
    batch_size: int = 32
    checkpoint_every: int = 500
    lr_schedule: str = "warmup_cosine"
    lr_base: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.95
    eps: float = 1e-8
    weight_decay: float = 0.05
    grad_clip_norm: float = 0.5
    warmup_steps: int = 200
    decay_steps: int = 1800
    lr_floor_ratio: float = 0.25
    ema_decay: float = 0.999
    latent_mask_rate: float = 0.12
    layer_mask_rate: float = 0.15
    pose_mask_rate: float = 0.1
    masking_mode: str = "latent"
    source_noise_scale: float = 0.0
    view_policy: str = "augment"
    aug_rate: float = 0.95
    crop_scale_min: float = 0.6
    flip: bool = True
    window: int = 32
    dataset_seed: int = 0
    n_train: int = 8000
    n_test: int = 2000

    def __post_init__(self):
        from ..data import POLICIES

        if self.view_policy not in POLICIES:
            raise ConfigError(f"unknown view policy {self.view_policy!r}")
        if self.lr_schedule not in ("warmup_cosine", "constant"):
            raise ConfigError(f"unknown lr schedule {self.lr_schedule!r}")
        if self.steps < 0 or self.batch_size < 1:
            raise ConfigError("steps must be >= 0 and batch_size >= 1")

    def optim(self, encoder_lr_ratio: float) -> OptimConfig:
        names = {f.name for f in dataclasses.fields(OptimConfig)}
        kw = {k: v for k, v in dataclasses.asdict(self).items() if k in names}
        return OptimConfig(**kw, encoder_lr_ratio=encoder_lr_ratio)


@dataclass
class SamplingSection:
    guidance: float = 2.0
    stride: int = 150
    sigma_rule: str = "fixed_beta"
    clip_x0: bool = True
    n_images: int = 16

    def __post_init__(self):
        from ..diffusion import SIGMA_RULES

        if self.sigma_rule not in SIGMA_RULES:
            raise ConfigError(f"unknown sigma rule {self.sigma_rule!r}")
        if self.stride < 1 or self.guidance < 0:
            raise ConfigError("stride must be >= 1 and guidance >= 0")


@dataclass
class EvalSection:
    probe_epochs: int = 60
    probe_batch_size: int = 256
    probe_lr: float = 3e-3
    probe_dropout: float = 0.1
    probe_label_smoothing: float = 0.1
    dci_method: str = "lasso_abs_coef"
    dci_alpha: float = 0.02
    pca_count: int = 4
    pca_steps: int = 7
    interp_steps: int = 8
    interp_a: int = 0
    interp_b: int = 1
    n_eval: int = 2000


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    schedule: ScheduleSection = field(default_factory=ScheduleSection)
    training: TrainingSection = field(default_factory=TrainingSection)
    sampling: SamplingSection = field(default_factory=SamplingSection)
    eval: EvalSection = field(default_factory=EvalSection)
    seed: int = 0

    def guidance(self) -> GuidanceConfig:
        tr = self.training
        return GuidanceConfig(
            strength=self.sampling.guidance,
            latent_mask_rate=tr.latent_mask_rate,
            layer_mask_rate=tr.layer_mask_rate,
            pose_mask_rate=tr.pose_mask_rate,
            masking_mode=tr.masking_mode,
        )

    def optim(self) -> OptimConfig:
        return self.training.optim(self.model.lr_ratio)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "run": {"seed": self.seed},
            **{name: _section_dict(getattr(self, name)) for name in SECTIONS},
        }

    def to_ini(self) -> str:
        cp = configparser.ConfigParser(interpolation=None)
        cp.optionxform = str
        for section, values in self.to_dict().items():
            cp[section] = {k: _format(v) for k, v in values.items()}
        buf = io.StringIO()
        cp.write(buf)
        return buf.getvalue()

    def hash(self) -> str:
        """Digest of everything that shapes the training trajectory. Run
        length and checkpoint cadence are left out so a run can be resumed
        and extended."""
        d = self.to_dict()
        d["training"] = {k: v for k, v in d["training"].items() if k not in _UNHASHED}
        blob = json.dumps(d, sort_keys=True, default=list).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    def replace(self, **sections) -> "RunConfig":
        return dataclasses.replace(self, **sections)


_UNHASHED = ("steps", "checkpoint_every")
SECTIONS = ("model", "schedule", "training", "sampling", "eval")
_SECTION_TYPES = {
    "model": ModelConfig,
    "schedule": ScheduleSection,
    "training": TrainingSection,
    "sampling": SamplingSection,
    "eval": EvalSection,
}


def _section_dict(obj) -> Dict[str, Any]:
    if isinstance(obj, ScheduleSection):
        d = {"kind": obj.kind, "T": obj.T, "weights": obj.weights}
        d.update({f"param.{k}": float(v) for k, v in sorted(obj.params.items())})
        return d
    return {f.name: getattr(obj, f.name) for f in dataclasses.fields(obj)}


def _format(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, (tuple, list)):
        return ", ".join(str(x) for x in v)
    return str(v)


def _parse(raw: str, typ, where: str):
    origin = typing.get_origin(typ)
    try:
        if typ is bool:
            low = raw.strip().lower()
            if low in ("true", "yes", "1", "on"):
                return True
            if low in ("false", "no", "0", "off"):
                return False
            raise ValueError(raw)
        if typ is int:
            return int(raw)
        if typ is float:
            return float(raw)
        if typ is str:
            return raw.strip()
        if origin is tuple:
            inner = typing.get_args(typ)[0]
            return tuple(_parse(x, inner, where) for x in raw.split(",") if x.strip())
    except ValueError:
        raise ConfigError(f"{where}: cannot parse {raw!r} as {getattr(typ, '__name__', typ)}") from None
    raise ConfigError(f"{where}: unsupported field type {typ}")


def _build_section(name: str, values: Dict[str, str]):
    cls = _SECTION_TYPES[name]
    if cls is ScheduleSection:
        kw: Dict[str, Any] = {}
        params = {}
        for k, raw in values.items():
            if k.startswith("param."):
                params[k[len("param."):]] = _parse(raw, float, f"[schedule] {k}")
            elif k in ("kind", "weights"):
                kw[k] = raw.strip()
            elif k == "T":
                kw[k] = _parse(raw, int, "[schedule] T")
            else:
                raise ConfigError(f"[schedule]: unknown key {k!r}")
        return ScheduleSection(**kw, params=params)
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls) if f.init}
    kw = {}
    for k, raw in values.items():
        if k not in names:
            raise ConfigError(f"[{name}]: unknown key {k!r}")
        kw[k] = _parse(raw, hints[k], f"[{name}] {k}")
    try:
        return cls(**kw)
    except ConfigError:
        raise
    except (ValueError, TypeError) as e:
        raise ConfigError(f"[{name}]: {e}") from None


def parse_config(text: str) -> RunConfig:
    """Parse INI text. Missing keys take their defaults; unknown sections or
    keys are errors."""
    cp = configparser.ConfigParser(interpolation=None)
    cp.optionxform = str
    try:
        cp.read_string(text)
    except configparser.Error as e:
        raise ConfigError(str(e)) from None
    kw: Dict[str, Any] = {}
    for section in cp.sections():
        values = dict(cp[section])
        if section == "run":
            extra = set(values) - {"seed"}
            if extra:
                raise ConfigError(f"[run]: unknown keys {sorted(extra)}")
            if "seed" in values:
                kw["seed"] = _parse(values["seed"], int, "[run] seed")
        elif section in _SECTION_TYPES:
            kw[section] = _build_section(section, values)
        else:
            raise ConfigError(f"unknown section [{section}]")
    return RunConfig(**kw)


def load_config(path) -> RunConfig:
    try:
        text = Path(path).read_text()
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e}") from None
    return parse_config(text)


def config_from_dict(d: Dict[str, Dict[str, Any]]) -> RunConfig:
    """Inverse of ``RunConfig.to_dict``."""
    cp = configparser.ConfigParser(interpolation=None)
    cp.optionxform = str
    for section, values in d.items():
        cp[section] = {k: _format(v) for k, v in values.items()}
    buf = io.StringIO()
    cp.write(buf)
    return parse_config(buf.getvalue())
