"""Implementations of the CLI verbs. Each returns a JSON-able summary."""

from __future__ import annotations

from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np
import torch

from ..data import FACTOR_NAMES, block_downsample, make_view_pair, pose_grid
from ..eval import (
    EvalReport,
    ProbeConfig,
    chance_accuracy,
    dci,
    frechet_from_features,
    importance_matrix,
    interpolate,
    pca_directions,
    probe_eval,
    probe_fit,
    psnr,
    ssim,
    traverse,
)
from ..network.unet import section_slices
from .artifacts import grid, to_png_array, write_json, write_png
from .checkpoint import Checkpoint, load_checkpoint
from .config import RunConfig
from .runtime import decode_latents, encode_images, get_dataset, load_model, train

ANALYZE_ACTIONS = ("dci", "pca", "interp", "traverse")
SAMPLE_MODES = ("recon", "novel_view", "uncond_layers")


def _ck(checkpoint) -> Checkpoint:
    return checkpoint if isinstance(checkpoint, Checkpoint) else load_checkpoint(checkpoint)


def _to01(x: np.ndarray) -> np.ndarray:
    return (np.asarray(x, dtype=np.float64) + 1.0) / 2.0


def _hwc(t: torch.Tensor) -> np.ndarray:
    return t.detach().double().numpy().transpose(0, 2, 3, 1)


def parse_sections_mask(text: str, n: int) -> torch.Tensor:
    """``"1,0,1"`` or ``"101"`` -> (n,) keep vector; 1 keeps a section."""
    bits = [b for b in text.replace(",", "").replace(" ", "")]
    if len(bits) != n or any(b not in "01" for b in bits):
        raise ValueError(f"sections mask must be {n} digits of 0/1, got {text!r}")
    return torch.tensor([float(b) for b in bits])


def cmd_train(cfg: RunConfig, out_dir, resume=None) -> Dict:
    trainer = train(cfg, out_dir, resume=None if resume is None else _ck(resume))
    losses = [l for _, l, _ in trainer.history]
    return {"step": trainer.step, "config_hash": cfg.hash(), "final_loss": losses[-1] if losses else None}


def _target_images(images: np.ndarray, size: int) -> np.ndarray:
    """uint8 canvases -> [-1, 1] HWC at the denoiser resolution."""
    x = images.astype(np.float64) / 255.0
    return np.stack([block_downsample(im, size) for im in x]) * 2.0 - 1.0


def cmd_sample(
    checkpoint,
    out_dir,
    mode: str = "recon",
    indices: Optional[Sequence[int]] = None,
    guidance: Optional[float] = None,
    stride: Optional[int] = None,
    seed: int = 0,
    sections_mask: Optional[str] = None,
    n: Optional[int] = None,
) -> Dict:
    """Decode held-out images and write ``<mode>.png`` and ``<mode>.json``."""
    if mode not in SAMPLE_MODES:
        raise ValueError(f"unknown sample mode {mode!r}")
    ck = _ck(checkpoint)
    cfg, model, schedule = load_model(ck)
    data = get_dataset(cfg)
    if indices is None:
        indices = list(range(n or cfg.sampling.n_images))
    if not len(indices):
        raise ValueError(f"{mode} needs at least one input image")
    indices = [int(i) for i in indices]
    images = data.test_images[indices]
    g = cfg.sampling.guidance if guidance is None else guidance
    L = cfg.sampling.stride if stride is None else stride
    size = cfg.model.target_size
    manifest: Dict = {
        "mode": mode, "indices": indices, "seed": seed, "guidance": g, "stride": L,
        "config_hash": ck.config_hash, "checkpoint_step": ck.step,
    }
    if mode == "novel_view":
        if not cfg.model.pose:
            raise ValueError("novel_view needs a model trained with pose inputs")
        rng = np.random.default_rng(seed)
        win = cfg.training.window
        pairs = [make_view_pair(im, "pose2d", rng, data.channel_stats(), size, window=win) for im in images]
        src = torch.from_numpy(np.stack([p.source for p in pairs]).transpose(0, 3, 1, 2))
        spose = torch.from_numpy(np.stack([p.source_pose for p in pairs]))
        tpose = torch.from_numpy(np.stack([p.target_pose for p in pairs]))
        with torch.no_grad():
            z = model.encode(src, spose)
        out = _hwc(decode_latents(model, z, schedule, cfg, seed, g, L, pose=tpose))
        truth = np.stack([p.target for p in pairs]).astype(np.float64)
        mean_img = data.train_images.astype(np.float64).mean(axis=0) / 255.0
        base = []
        for p in pairs:
            x0, y0, x1, y1 = _box(p.target_pose, data.canvas)
            base.append(block_downsample(mean_img[y0:y1, x0:x1], size) * 2.0 - 1.0)
        base = np.stack(base)
        ps = [psnr(_to01(o), _to01(t)) for o, t in zip(out, truth)]
        pb = [psnr(_to01(b), _to01(t)) for b, t in zip(base, truth)]
        manifest.update(psnr=ps, psnr_mean=float(np.mean(ps)), baseline_psnr=pb, baseline_psnr_mean=float(np.mean(pb)))
        rows = [[to_png_array(p.raw_source * 2 - 1), to_png_array(t), to_png_array(o), to_png_array(b)]
                for p, t, o, b in zip(pairs, truth, out, base)]
    else:
        keep = None
        if mode == "uncond_layers":
            if sections_mask is None:
                raise ValueError("uncond_layers needs --sections-mask")
            keep = parse_sections_mask(sections_mask, model.num_sections)[None].repeat(len(indices), 1)
            manifest["sections_mask"] = [int(v) for v in keep[0].tolist()]
        z = torch.from_numpy(encode_images(model, images, data.channel_stats())).float()
        out = _hwc(decode_latents(model, z, schedule, cfg, seed, g, L, keep=keep))
        truth = _target_images(images, size)
        ps = [psnr(_to01(o), _to01(t)) for o, t in zip(out, truth)]
        ss = [ssim(_to01(o), _to01(t)) for o, t in zip(out, truth)]
        manifest.update(psnr=ps, psnr_mean=float(np.mean(ps)), ssim=ss, ssim_mean=float(np.mean(ss)))
        rows = [[to_png_array(t), to_png_array(o)] for t, o in zip(truth, out)]
    out_dir = Path(out_dir)
    write_png(out_dir / f"{mode}.png", grid(rows, cell=2 * size))
    write_json(out_dir / f"{mode}.json", manifest)
    manifest["images"] = out
    return manifest


def _box(pose: np.ndarray, canvas: int):
    from ..data import grid_to_box

    return grid_to_box(pose, canvas)


def _latents(ck: Checkpoint, cfg: RunConfig, model, data, n_train: Optional[int] = None):
    stats = data.channel_stats()
    tr_imgs = data.train_images if n_train is None else data.train_images[:n_train]
    n_eval = min(cfg.eval.n_eval, len(data.test_images))
    ztr = encode_images(model, tr_imgs, stats)
    zte = encode_images(model, data.test_images[:n_eval], stats)
    ytr = data.train_factors[: len(ztr)]
    yte = data.test_factors[:n_eval]
    return ztr, ytr, zte, yte


def probe_latents(ztr, ytr, zte, yte, cfg: RunConfig, seed: int = 0, shuffle_labels: bool = False) -> Dict[str, Dict]:
    e = cfg.eval
    pc = ProbeConfig(epochs=e.probe_epochs, batch_size=e.probe_batch_size, lr=e.probe_lr,
                     dropout=e.probe_dropout, label_smoothing=e.probe_label_smoothing, seed=seed)
    rng = np.random.default_rng(seed)
    out = {}
    for j, name in enumerate(FACTOR_NAMES):
        y_fit = rng.permutation(ytr[:, j]) if shuffle_labels else ytr[:, j]
        model = probe_fit(ztr, y_fit, pc)
        res = probe_eval(model, zte, yte[:, j])
        out[name] = {"accuracy": res["accuracy"], "chance": chance_accuracy(yte[:, j])}
    return out


def cmd_probe(checkpoint, out_dir=None, seed: int = 0, shuffle_labels: bool = False) -> EvalReport:
    """Linear probes on frozen EMA latents, one per factor."""
    ck = _ck(checkpoint)
    cfg, model, _ = load_model(ck)
    data = get_dataset(cfg)
    ztr, ytr, zte, yte = _latents(ck, cfg, model, data)
    res = probe_latents(ztr, ytr, zte, yte, cfg, seed, shuffle_labels)
    rep = EvalReport(ck.config_hash, seed)
    for name, r in res.items():
        rep.metrics[f"probe/{name}/accuracy"] = r["accuracy"]
        rep.metrics[f"probe/{name}/chance"] = r["chance"]
    rep.metrics["probe/mean_accuracy"] = float(np.mean([r["accuracy"] for r in res.values()]))
    rep.metrics["probe/mean_chance"] = float(np.mean([r["chance"] for r in res.values()]))
    rep.details = {"shuffle_labels": shuffle_labels, "n_train": len(ztr), "n_test": len(zte), "step": ck.step}
    if out_dir is not None:
        rep.write(out_dir, "probe_shuffled" if shuffle_labels else "probe")
    return rep


def dci_report(z, factors, cfg: RunConfig, informativeness=None):
    R = importance_matrix(z, factors, cfg.eval.dci_method, alpha=cfg.eval.dci_alpha)
    return R, dci(R, informativeness)


def cmd_analyze(
    checkpoint,
    action: str,
    out_dir=None,
    seed: int = 0,
    section: Optional[int] = None,
    guidance: Optional[float] = None,
    stride: Optional[int] = None,
) -> EvalReport:
    if action not in ANALYZE_ACTIONS:
        raise ValueError(f"unknown analyze action {action!r}; choose from {ANALYZE_ACTIONS}")
    ck = _ck(checkpoint)
    cfg, model, schedule = load_model(ck)
    data = get_dataset(cfg)
    stats = data.channel_stats()
    rep = EvalReport(ck.config_hash, seed)
    out = Path(out_dir) if out_dir is not None else None
    e = cfg.eval
    size = cfg.model.target_size

    def decode(zs: np.ndarray) -> np.ndarray:
        zt = torch.from_numpy(np.asarray(zs)).float()
        return _hwc(decode_latents(model, zt, schedule, cfg, seed, guidance, stride, shared_noise=True))

    if action == "dci":
        n_eval = min(e.n_eval, len(data.test_images))
        z = encode_images(model, data.test_images[:n_eval], stats)
        R, s = dci_report(z, data.test_factors[:n_eval], cfg)
        rep.metrics.update({"dci/disentanglement": s.disentanglement, "dci/completeness": s.completeness})
        rep.details = {"importance": R.R.tolist(), "method": R.method, "flags": s.flags, "factors": list(FACTOR_NAMES)}
        if out is not None:
            rep.write(out, "dci")
        return rep

    z_all = encode_images(model, data.test_images[: min(e.n_eval, len(data.test_images))], stats)
    if action in ("pca", "traverse"):
        sl = None
        if section is not None:
            slices = section_slices(cfg.model.latent_dim, model.num_sections)
            if not 0 <= section < len(slices):
                raise ValueError(f"section must lie in [0, {len(slices)})")
            sl = slices[section]
        dirs, lam = pca_directions(z_all if sl is None else z_all[:, sl], e.pca_count)
        base = z_all[e.interp_a]
        strips = []
        for k in range(e.pca_count):
            frames = decode(traverse(base, dirs[k], lam[k], e.pca_steps, sl))
            strips.append([to_png_array(f) for f in frames])
            if out is not None:
                write_png(out / f"{action}_dir{k}.png", grid([strips[-1]], cell=2 * size))
        for k, v in enumerate(lam):
            rep.metrics[f"{action}/eigenvalue_{k}"] = float(v)
        rep.details = {"section": section, "directions": dirs.tolist(), "strips": len(strips), "frames": e.pca_steps}
        if out is not None:
            write_png(out / f"{action}.png", grid(strips, cell=2 * size))
            rep.write(out, action)
        return rep

    # interp
    za, zb = z_all[e.interp_a], z_all[e.interp_b]
    path = interpolate(za, zb, e.interp_steps)
    frames = decode(path)
    ends = decode(np.stack([za, zb]))
    rep.metrics["interp/endpoint_psnr_a"] = psnr(_to01(frames[0]), _to01(ends[0]))
    rep.metrics["interp/endpoint_psnr_b"] = psnr(_to01(frames[-1]), _to01(ends[1]))
    rep.details = {"a": e.interp_a, "b": e.interp_b, "steps": e.interp_steps}
    if out is not None:
        write_png(out / "interp.png", grid([[to_png_array(f) for f in frames]], cell=2 * size))
        rep.write(out, "interp")
    return rep


def cmd_eval_metrics(checkpoint, out_dir=None, seed: int = 0, guidance=None, stride=None, n: Optional[int] = None) -> EvalReport:
    """Reconstruction PSNR/SSIM on held-out images plus a Fréchet distance
    between real and reconstructed images in 8x8 pixel space."""
    ck = _ck(checkpoint)
    cfg, model, schedule = load_model(ck)
    data = get_dataset(cfg)
    n = n or cfg.sampling.n_images
    images = data.test_images[:n]
    z = torch.from_numpy(encode_images(model, images, data.channel_stats())).float()
    out = _to01(_hwc(decode_latents(model, z, schedule, cfg, seed, guidance, stride)))
    truth = _to01(_target_images(images, cfg.model.target_size))
    rep = EvalReport(ck.config_hash, seed)
    rep.metrics["recon/psnr"] = float(np.mean([psnr(o, t) for o, t in zip(out, truth)]))
    rep.metrics["recon/ssim"] = float(np.mean([ssim(o, t) for o, t in zip(out, truth)]))
    feats = lambda a: np.stack([block_downsample(im, 8).reshape(-1) for im in a])
    rep.metrics["recon/frechet_pixels8"] = float(frechet_from_features(feats(truth), feats(out)))
    rep.details = {"n": n, "step": ck.step}
    if out_dir is not None:
        rep.write(out_dir, "metrics")
    return rep
