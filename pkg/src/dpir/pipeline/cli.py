"""Command-line entry points: dataset, train-ae, train-dpir, restore, eval."""

from __future__ import annotations

import argparse
import os
import sys

from .config import load_config, serialize_config
from .data import (Corpus, build_context_corpus, build_manifest,
                   build_shapes_corpus, list_images, load_image, save_image)
from .restore import restore_from_checkpoint
from .train import train_ae, train_dpir
from ..metrics import evaluate_pairs

__all__ = ["main"]


def _add_config_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", default=None, help="config file (key = value)")
    p.add_argument("--set", dest="overrides", action="append", default=[],
                   metavar="SECTION.KEY=VALUE", help="override a config field")


def _build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dpir",
                                description="desk-scale latent-flow restoration")
    sub = p.add_subparsers(dest="command", required=True)

    d = sub.add_parser("dataset", help="synthesize a corpus and/or build "
                                       "the degradation manifest")
    _add_config_args(d)
    d.add_argument("--kind", choices=("shapes16", "context192"), default=None,
                   help="synthesize this corpus into the hq dir first")

    a = sub.add_parser("train-ae", help="pretrain the autoencoder and "
                                        "fine-tune the robust encoder")
    _add_config_args(a)

    t = sub.add_parser("train-dpir", help="train the conditional restorer")
    _add_config_args(t)
    t.add_argument("--ae", required=True, help="autoencoder checkpoint")
    t.add_argument("--resume", default=None, help="restorer checkpoint to "
                                                  "continue from")

    r = sub.add_parser("restore", help="restore one degraded image")
    r.add_argument("--ckpt", required=True, help="restorer checkpoint")
    r.add_argument("--input", required=True, help="LQ image (png/ppm)")
    r.add_argument("--output", required=True, help="output image (png/ppm)")
    r.add_argument("--caption", default="", help="optional text prompt")
    r.add_argument("--steps", type=int, default=None, help="sampler steps")
    r.add_argument("--seed", type=int, default=0, help="sampling seed")
    r.add_argument("--mode", default=None, help="prompt mode override")

    e = sub.add_parser("eval", help="score paired image directories")
    e.add_argument("--restored", required=True)
    e.add_argument("--reference", required=True)
    e.add_argument("--out", required=True, help="CSV report path")

    c = sub.add_parser("config", help="print the resolved configuration")
    _add_config_args(c)
    return p


def _cmd_dataset(args) -> int:
    cfg = load_config(args.config, args.overrides)
    if args.kind == "shapes16":
        build_shapes_corpus(cfg.paths.hq_dir, seed=cfg.seed)
    elif args.kind == "context192":
        build_context_corpus(cfg.paths.hq_dir, seed=cfg.seed)
    os.makedirs(os.path.dirname(os.path.abspath(cfg.paths.manifest)),
                exist_ok=True)
    rows = build_manifest(cfg.paths.hq_dir, cfg.paths.manifest,
                          cfg.degradation, seed=cfg.seed)
    print(f"wrote {cfg.paths.manifest} with {len(rows)} pairs")
    return 0


def _cmd_train_ae(args) -> int:
    cfg = load_config(args.config, args.overrides)
    result = train_ae(cfg)
    print(f"checkpoint: {result.checkpoint}")
    print(f"loss log:   {result.log}")
    print(f"held-out L1 base/dr: {result.metrics['holdout_l1_base']:.5f} / "
          f"{result.metrics['holdout_l1_dr']:.5f}")
    return 0


def _cmd_train_dpir(args) -> int:
    cfg = load_config(args.config, args.overrides)
    result = train_dpir(cfg, args.ae, resume=args.resume)
    first = result.metrics["first_losses"]
    last = result.metrics["last_losses"]
    print(f"checkpoint: {result.checkpoint}")
    print(f"loss log:   {result.log}")
    if first and last:
        import numpy as np
        print(f"loss first/last 50: {np.mean(first):.4f} -> {np.mean(last):.4f}")
    return 0


def _cmd_restore(args) -> int:
    lq = load_image(args.input)
    out = restore_from_checkpoint(args.ckpt, lq, caption=args.caption,
                                  steps=args.steps, seed=args.seed,
                                  mode=args.mode)
    save_image(args.output, out)
    print(f"wrote {args.output} ({out.shape[2]}x{out.shape[1]})")
    return 0


def _cmd_eval(args) -> int:
    names = list_images(args.restored)
    ref_names = set(list_images(args.reference))
    pairs = []
    for name in names:
        if name not in ref_names:
            raise FileNotFoundError(f"reference missing for {name}")
        pairs.append((name, load_image(os.path.join(args.restored, name)),
                      load_image(os.path.join(args.reference, name))))
    report = evaluate_pairs(pairs)
    report.write_csv(args.out)
    print(f"wrote {args.out}: mean PSNR {report.mean_psnr:.3f} dB, "
          f"mean SSIM {report.mean_ssim:.4f}")
    return 0


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    if args.command == "dataset":
        return _cmd_dataset(args)
    if args.command == "train-ae":
        return _cmd_train_ae(args)
    if args.command == "train-dpir":
        return _cmd_train_dpir(args)
    if args.command == "restore":
        return _cmd_restore(args)
    if args.command == "eval":
        return _cmd_eval(args)
    if args.command == "config":
        print(serialize_config(load_config(args.config, args.overrides)))
        return 0
    raise AssertionError(f"unhandled command {args.command}")


if __name__ == "__main__":
    sys.exit(main())
