"""Command-line entry point: ``soda <verb> [flags]``.

Exit codes: 0 ok, 1 usage or runtime error, 2 config error, 3 checkpoint error.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path
from typing import List, Optional

import torch

from . import commands
from .checkpoint import CheckpointError
from .config import ConfigError, RunConfig, load_config

EXIT_OK, EXIT_ERROR, EXIT_CONFIG, EXIT_CHECKPOINT = 0, 1, 2, 3


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="soda", description="Train and analyse latent-conditioned diffusion autoencoders.")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="seed for every random choice the command makes")
    common.add_argument("--out-dir", type=Path, default=Path("out"))
    common.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="verb", required=True)

    t = sub.add_parser("train", parents=[common], help="train a model")
    t.add_argument("--config", type=Path, default=None)
    t.add_argument("--checkpoint", type=Path, default=None, help="resume from this checkpoint")
    t.add_argument("--steps", type=int, default=None, help="override training.steps")
    t.add_argument("--write-config", action="store_true", help="only write the resolved config and exit")

    def with_ckpt(name, help):
        s = sub.add_parser(name, parents=[common], help=help)
        s.add_argument("--checkpoint", type=Path, required=True)
        return s

    s = with_ckpt("sample", "decode held-out images")
    s.add_argument("--mode", choices=commands.SAMPLE_MODES, default="recon")
    s.add_argument("--indices", type=str, default=None, help="comma-separated test-split indices")
    s.add_argument("--guidance", type=float, default=None)
    s.add_argument("--stride", type=int, default=None)
    s.add_argument("--sections-mask", type=str, default=None, help="e.g. 1101: 1 keeps a latent section")

    pr = with_ckpt("probe", "linear probes on frozen latents")
    pr.add_argument("--shuffle-labels", action="store_true", help="permutation control")

    a = with_ckpt("analyze", "latent-space analysis")
    a.add_argument("action", choices=commands.ANALYZE_ACTIONS)
    a.add_argument("--section", type=int, default=None, help="restrict pca/traverse to one latent section")
    a.add_argument("--guidance", type=float, default=None)
    a.add_argument("--stride", type=int, default=None)

    m = with_ckpt("eval-metrics", "reconstruction PSNR/SSIM/Frechet")
    m.add_argument("--guidance", type=float, default=None)
    m.add_argument("--stride", type=int, default=None)
    m.add_argument("--n", type=int, default=None)
    return p


def _train(args) -> dict:
    cfg = load_config(args.config) if args.config else RunConfig()
    if args.seed is not None:
        cfg = dataclasses.replace(cfg, seed=args.seed)
    if args.steps is not None:
        cfg = dataclasses.replace(cfg, training=dataclasses.replace(cfg.training, steps=args.steps))
    args.out_dir.mkdir(parents=True, exist_ok=True)
    (args.out_dir / "config.ini").write_text(cfg.to_ini())
    if args.write_config:
        return {"config_hash": cfg.hash()}
    return commands.cmd_train(cfg, args.out_dir, resume=args.checkpoint)


def run(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    torch.set_num_threads(1)
    seed = 0 if args.seed is None else args.seed
    try:
        if args.verb == "train":
            summary = _train(args)
        elif args.verb == "sample":
            idx = None if args.indices is None else [int(v) for v in args.indices.split(",") if v.strip()]
            res = commands.cmd_sample(args.checkpoint, args.out_dir, args.mode, idx, args.guidance,
                                      args.stride, seed, args.sections_mask)
            summary = {k: v for k, v in res.items() if k.endswith("_mean")}
        elif args.verb == "probe":
            summary = commands.cmd_probe(args.checkpoint, args.out_dir, seed, args.shuffle_labels).metrics
        elif args.verb == "analyze":
            summary = commands.cmd_analyze(args.checkpoint, args.action, args.out_dir, seed, args.section,
                                           args.guidance, args.stride).metrics
        else:
            summary = commands.cmd_eval_metrics(args.checkpoint, args.out_dir, seed, args.guidance, args.stride, args.n).metrics
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except CheckpointError as e:
        print(f"checkpoint error: {e}", file=sys.stderr)
        return EXIT_CHECKPOINT
    except ValueError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_ERROR
    print(json.dumps(summary, sort_keys=True, default=float))
    return EXIT_OK


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
