"""Training loop, checkpoint plumbing and helpers shared by the commands."""

from __future__ import annotations

import logging
from pathlib import Path
from typing import Callable, Dict, List, Optional, Tuple

import numpy as np
import torch

from ..data import AugmentConfig, FactorDataset, collate, eval_batch, make_view_pair
from ..diffusion import GuidanceConfig, autoencoder_loss, sample, training_loss
from ..network.model import SodaModel, build_model
from ..numerics import AdamState, adam_step, ema_decay_at, ema_update, grad, lr_at
from ..schedules import NoiseSchedule, schedule_from_table
from .artifacts import line_plot, moving_average, write_csv, write_png
from .checkpoint import Checkpoint, CheckpointError, load_checkpoint, save_checkpoint, torch_state_from_str, torch_state_to_str
from .config import ConfigError, RunConfig, config_from_dict

log = logging.getLogger("soda")

_DATASETS: Dict[Tuple, FactorDataset] = {}


def get_dataset(cfg: RunConfig) -> FactorDataset:
    tr = cfg.training
    key = (tr.dataset_seed, tr.n_train, tr.n_test)
    if key not in _DATASETS:
        _DATASETS[key] = FactorDataset(seed=tr.dataset_seed, n_train=tr.n_train, n_test=tr.n_test)
    return _DATASETS[key]


class Trainer:
    """Owns the model, optimizer state, EMA shadow and every random stream.

    Three streams drive training: a numpy generator for batch indices and
    view augmentation, a torch generator for timesteps/noise/masks, and the
    torch global generator for dropout. All three are checkpointed.
    """

    def __init__(self, cfg: RunConfig, dataset: Optional[FactorDataset] = None):
        self.cfg = cfg
        self.optim = cfg.optim()
        self.guidance = cfg.guidance()
        torch.manual_seed(cfg.seed)
        self.model = build_model(cfg.model)
        self.model.train()
        self.params = dict(self.model.named_parameters())
        self.ema = {n: p.detach().clone() for n, p in self.params.items()}
        self.adam = AdamState()
        self.schedule = cfg.schedule.build()
        self.np_rng = np.random.default_rng(cfg.seed)
        self.gen = torch.Generator().manual_seed(cfg.seed + 1)
        self.step = 0
        self.history: List[Tuple[int, float, float]] = []
        self.data = dataset if dataset is not None else get_dataset(cfg)
        self.stats = self.data.channel_stats()
        tr = cfg.training
        self.aug = AugmentConfig(rate=tr.aug_rate, crop_scale_min=tr.crop_scale_min, flip=tr.flip)

    # ---------------------------------------------------------------- step

    def next_batch(self):
        tr = self.cfg.training
        idx = self.np_rng.integers(0, len(self.data.train_images), size=tr.batch_size)
        pairs = [
            make_view_pair(
                self.data.train_images[i], tr.view_policy, self.np_rng, self.stats,
                self.cfg.model.target_size, self.aug, tr.window, tr.source_noise_scale,
            )
            for i in idx
        ]
        return collate(pairs)

    def loss_fn(self, batch) -> Callable[[], torch.Tensor]:
        if self.cfg.model.kind == "autoencoder":
            return lambda: autoencoder_loss(batch, self.model)
        return lambda: training_loss(batch, self.model, self.schedule, self.guidance, self.gen)

    def train_step(self) -> float:
        batch = self.next_batch()
        f = self.loss_fn(batch)
        box = {}

        def wrapped():
            box["loss"] = f()
            return box["loss"]

        grads = grad(wrapped, self.params)
        self.step += 1
        lr = lr_at(self.step, self.optim, self.cfg.training.lr_schedule)
        adam_step(self.params, grads, self.adam, self.optim, self.step, lr)
        ema_update(self.ema, self.params, ema_decay_at(self.step, self.optim.ema_decay))
        loss = float(box["loss"].detach())
        self.history.append((self.step, loss, lr))
        return loss

    def run(self, until: int, out_dir=None, on_step=None) -> None:
        every = self.cfg.training.checkpoint_every
        while self.step < until:
            loss = self.train_step()
            if on_step:
                on_step(self.step, loss)
            if self.step % 100 == 0:
                log.info("step %d loss %.5f", self.step, loss)
            if out_dir is not None and every > 0 and self.step % every == 0:
                self.save(Path(out_dir) / f"step_{self.step:06d}.ckpt")

    # ---------------------------------------------------------- checkpoint

    def to_checkpoint(self) -> Checkpoint:
        return Checkpoint(
            config=self.cfg.to_dict(),
            config_hash=self.cfg.hash(),
            step=self.step,
            params={n: p.detach().clone() for n, p in self.params.items()},
            ema={n: t.clone() for n, t in self.ema.items()},
            adam_m={n: t.clone() for n, t in self.adam.m.items()},
            adam_v={n: t.clone() for n, t in self.adam.v.items()},
            alpha_bars=self.schedule.alpha_bars,
            rng={
                "numpy": self.np_rng.bit_generator.state,
                "torch_gen": torch_state_to_str(self.gen.get_state()),
                "torch_global": torch_state_to_str(torch.get_rng_state()),
            },
            meta={"history": [[s, l, r] for s, l, r in self.history]},
        )

    def save(self, path) -> None:
        save_checkpoint(self.to_checkpoint(), path)

    @torch.no_grad()
    def restore(self, ck: Checkpoint) -> None:
        if ck.config_hash != self.cfg.hash():
            raise CheckpointError(
                f"config hash mismatch: checkpoint {ck.config_hash}, current config {self.cfg.hash()}"
            )
        _copy_into(self.params, ck.params, "params")
        _copy_into(self.ema, ck.ema, "ema")
        self.adam = AdamState({n: t.clone() for n, t in ck.adam_m.items()}, {n: t.clone() for n, t in ck.adam_v.items()})
        if ck.alpha_bars is not None and not np.array_equal(ck.alpha_bars, self.schedule.alpha_bars):
            raise CheckpointError("stored noise schedule differs from the one the config builds")
        self.step = ck.step
        self.np_rng.bit_generator.state = ck.rng["numpy"]
        self.gen.set_state(torch_state_from_str(ck.rng["torch_gen"]))
        torch.set_rng_state(torch_state_from_str(ck.rng["torch_global"]))
        self.history = [(int(s), float(l), float(r)) for s, l, r in ck.meta.get("history", [])]

    # -------------------------------------------------------------- output

    def write_outputs(self, out_dir) -> None:
        out = Path(out_dir)
        h = self.cfg.hash()
        rows = [(s, l, r, h) for s, l, r in self.history]
        write_csv(out / "loss.csv", ["step", "loss", "lr", "config_hash"], rows)
        if self.history:
            losses = [l for _, l, _ in self.history]
            xs = [s for s, _, _ in self.history]
            img = line_plot({"loss": losses, "loss (avg 50)": moving_average(losses, 50)}, xs, title=f"training loss {h}")
            write_png(out / "loss.png", img)
        lam = self.schedule.log_snr()
        write_csv(out / "log_snr.csv", ["t", "log_snr", "weight", "config_hash"],
                  [(t + 1, float(lam[t]), float(self.schedule.timestep_weights[t]), h) for t in range(len(lam))])
        write_png(out / "log_snr.png", line_plot({"log-SNR": lam}, np.arange(1, len(lam) + 1), title=f"{self.schedule.kind} schedule"))
        self.save(out / "checkpoint.ckpt")


def _copy_into(dst: Dict[str, torch.Tensor], src: Dict[str, torch.Tensor], what: str) -> None:
    if set(dst) != set(src):
        missing, extra = sorted(set(dst) - set(src)), sorted(set(src) - set(dst))
        raise CheckpointError(f"{what}: missing {missing[:3]} unexpected {extra[:3]}")
    for n, t in dst.items():
        if t.shape != src[n].shape:
            raise CheckpointError(f"{what}/{n}: shape {tuple(src[n].shape)} != {tuple(t.shape)}")
        t.copy_(src[n])


def train(cfg: RunConfig, out_dir, resume=None, dataset=None, steps: Optional[int] = None) -> Trainer:
    trainer = Trainer(cfg, dataset)
    if resume is not None:
        trainer.restore(resume if isinstance(resume, Checkpoint) else load_checkpoint(resume))
    trainer.run(cfg.training.steps if steps is None else steps, out_dir)
    if out_dir is not None:
        trainer.write_outputs(out_dir)
    return trainer


# ------------------------------------------------------------------ loading


def config_of(ck: Checkpoint) -> RunConfig:
    try:
        cfg = config_from_dict(ck.config)
    except ConfigError as e:
        raise CheckpointError(f"checkpoint carries an invalid config: {e}") from None
    if cfg.hash() != ck.config_hash:
        raise CheckpointError("checkpoint config does not match its recorded hash")
    return cfg


@torch.no_grad()
def load_model(ck: Checkpoint, use_ema: bool = True) -> Tuple[RunConfig, SodaModel, NoiseSchedule]:
    """Model in eval mode with the EMA (default) or raw weights loaded."""
    cfg = config_of(ck)
    model = build_model(cfg.model)
    params = dict(model.named_parameters())
    _copy_into(params, ck.ema if use_ema else ck.params, "ema" if use_ema else "params")
    model.eval()
    schedule = cfg.schedule.build()
    if ck.alpha_bars is not None and not np.array_equal(schedule.alpha_bars, ck.alpha_bars):
        schedule = schedule_from_table(cfg.schedule.kind, ck.alpha_bars, schedule.timestep_weights, schedule.params)
    return cfg, model, schedule


@torch.no_grad()
def encode_images(model: SodaModel, images: np.ndarray, stats, batch_size: int = 256) -> np.ndarray:
    """Latents of un-augmented uint8 images, float64 (N, D)."""
    model.eval()
    out = []
    for start in range(0, len(images), batch_size):
        b = eval_batch(images[start : start + batch_size], stats)
        out.append(model.encode(b["source"]).double().numpy())
    return np.concatenate(out) if out else np.zeros((0, model.cfg.latent_dim))


@torch.no_grad()
def decode_latents(
    model: SodaModel,
    z: torch.Tensor,
    schedule: NoiseSchedule,
    cfg: RunConfig,
    seed: int,
    guidance: Optional[float] = None,
    stride: Optional[int] = None,
    keep: Optional[torch.Tensor] = None,
    pose: Optional[torch.Tensor] = None,
    shared_noise: bool = False,
) -> torch.Tensor:
    """Images in [-1, 1] for latents ``z``. With ``shared_noise`` every item
    is decoded with the same noise stream (batch of one, reseeded)."""
    if model.cfg.kind == "autoencoder":
        return model.decode(z.float(), pose).clamp(-1, 1)
    g = GuidanceConfig(
        strength=cfg.sampling.guidance if guidance is None else guidance,
        latent_mask_rate=cfg.training.latent_mask_rate,
        layer_mask_rate=cfg.training.layer_mask_rate,
        pose_mask_rate=cfg.training.pose_mask_rate,
        masking_mode=cfg.training.masking_mode,
    )
    L = cfg.sampling.stride if stride is None else stride
    if not shared_noise:
        gen = torch.Generator().manual_seed(seed)
        return sample(model, z.float(), pose, schedule, L, g, gen, cfg.sampling.sigma_rule, keep, clip_x0=cfg.sampling.clip_x0)
    outs = []
    for i in range(z.shape[0]):
        gen = torch.Generator().manual_seed(seed)
        k = None if keep is None else keep[i : i + 1]
        p = None if pose is None else pose[i : i + 1]
        outs.append(sample(model, z[i : i + 1].float(), p, schedule, L, g, gen, cfg.sampling.sigma_rule, k, clip_x0=cfg.sampling.clip_x0))
    return torch.cat(outs)
