"""Command-line entry point: ``focalattn <command> ...``."""

from __future__ import annotations

import argparse
import logging
import sys

import numpy as np

from .defocus import Scene, synth_stack
from .net import ModelConfig, build_model, infer, load_checkpoint, save_checkpoint
from .objectives import baseline_argmax_dff, compute_metrics
from .stackio import (
    gen_toy_dataset,
    image_read,
    image_write,
    load_dataset,
    manifest_load,
    parse_positions,
    write_pfm,
    write_sample,
)
from .training import TrainConfig, test_time_optimize, train


def _synth(args):
    aif = image_read(args.scene_aif)
    if aif.ndim != 3 or aif.shape[-1] != 3:
        raise ValueError(f"scene AiF must be an RGB image, got shape {aif.shape}")
    depth = image_read(args.scene_depth, "pfm").astype(np.float64)
    sample = synth_stack(Scene(aif, depth, kappa=args.kappa), parse_positions(args.positions))
    print(write_sample(args.out, sample))


def _gen_dataset(args):
    paths = gen_toy_dataset(args.out, args.seed, args.count, args.size, args.frames, args.kappa)
    print(f"wrote {len(paths)} scenes to {args.out}")


def _train_config(args, mode):
    return TrainConfig(
        mode=mode,
        steps=args.steps,
        batch_size=args.batch_size,
        lr=args.lr,
        alpha=args.alpha,
        lam=args.lam,
        crop=args.crop,
        arbitrary_size=getattr(args, "arbitrary_size", False),
        seed=args.seed,
    )


def _train(args):
    data = load_dataset(args.data)
    config = ModelConfig(levels=args.levels, base_channels=args.base_channels, seed=args.seed)
    model, history = train(build_model(config), data, _train_config(args, args.mode))
    save_checkpoint(model, args.out)
    if history:
        print(f"final loss {history[-1]['total']:.6f} after {len(history)} steps")


def _infer(args):
    model = load_checkpoint(args.ckpt)
    sample, _ = manifest_load(args.stack)
    depth, aif = infer(model, sample.stack)
    write_pfm(args.out_depth, depth)
    image_write(args.out_aif, np.clip(aif, 0.0, 1.0), "png8")


def _eval(args):
    pred = image_read(args.pred, "pfm")
    gt = image_read(args.gt, "pfm")
    mask = None
    if args.mask:
        m = image_read(args.mask)
        mask = (m.mean(axis=-1) if m.ndim == 3 else m) > 0.5
    sys.stdout.write(compute_metrics(pred, gt, mask).to_text())


def _ttopt(args):
    model = load_checkpoint(args.ckpt)
    data = load_dataset(args.data)
    adapted = test_time_optimize(model, data, _train_config(args, "unsupervised"))
    save_checkpoint(adapted, args.out)


def _baseline(args):
    sample, _ = manifest_load(args.stack)
    write_pfm(args.out_depth, baseline_argmax_dff(sample.stack))


def _add_optim(p, lr):
    p.add_argument("--alpha", type=float, default=0.002)
    p.add_argument("--lambda", dest="lam", type=float, default=10.0)
    p.add_argument("--lr", type=float, default=lr)
    p.add_argument("--batch-size", type=int, default=4)
    p.add_argument("--crop", type=int, default=64)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="focalattn", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true", help="log training progress")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="render a focal stack from an AiF image and a depth map")
    p.add_argument("--scene-aif", required=True)
    p.add_argument("--scene-depth", required=True)
    p.add_argument("--positions", required=True, help="comma-separated, strictly increasing")
    p.add_argument("--kappa", type=float, required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(run=_synth)

    p = sub.add_parser("gen-dataset", help="write a procedural toy dataset")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--size", type=int, required=True)
    p.add_argument("--frames", type=int, required=True)
    p.add_argument("--kappa", type=float, required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(run=_gen_dataset)

    p = sub.add_parser("train", help="train a model and write a checkpoint")
    p.add_argument("--data", required=True)
    p.add_argument("--mode", choices=("supervised", "unsupervised"), required=True)
    p.add_argument("--arbitrary-size", action="store_true")
    p.add_argument("--steps", type=int, required=True)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--levels", type=int, default=3)
    p.add_argument("--base-channels", type=int, default=16)
    _add_optim(p, lr=1e-4)
    p.set_defaults(run=_train)

    p = sub.add_parser("infer", help="predict depth and AiF for one stack")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--stack", required=True)
    p.add_argument("--out-depth", required=True)
    p.add_argument("--out-aif", required=True)
    p.set_defaults(run=_infer)

    p = sub.add_parser("eval", help="print depth metrics for a prediction")
    p.add_argument("--pred", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--mask")
    p.set_defaults(run=_eval)

    p = sub.add_parser("ttopt", help="adapt a checkpoint to stacks with AiF ground truth")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--steps", type=int, required=True)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out", required=True)
    _add_optim(p, lr=1e-4)
    p.set_defaults(run=_ttopt)

    p = sub.add_parser("baseline", help="argmax sharpness depth for one stack")
    p.add_argument("--stack", required=True)
    p.add_argument("--out-depth", required=True)
    p.set_defaults(run=_baseline)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        args.run(args)
    except (ValueError, OSError) as exc:
        print(f"focalattn {args.command}: {exc}", file=sys.stderr)
        return 1
    return 0
