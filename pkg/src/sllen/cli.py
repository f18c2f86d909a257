"""Command-line entry point.

Commands: ``train``, ``enhance``, ``evaluate``, ``ablate``, ``gradstat``,
``decompose``. Global flags ``--config``, ``--seed`` and ``--out`` go before
the command name, e.g. ``sllen --seed 7 --out runs train --data data/``.

Config file
-----------
A JSON object whose keys are training settings; flags win over file values and
unknown keys are an error::

    {
      "lr": 1e-4, "batch_size": 6, "steps": 1000, "seed": 0,
      "variant": "full",            # full | no_hsf | no_ief | unet
      "loss_weights": {"lambda_kd": 1.0, "lambda_itv": 5.0, "lambda_gra": 1.0,
                       "G": 0.051, "huber_delta": 1.0},
      "adam_betas": [0.9, 0.999], "adam_eps": 1e-8,
      "checkpoint_every": 0, "patch": null, "grad_clip": null,
      "base_channels": 32, "attention_dk": 64, "num_classes": 21,
      "flip": false, "ssn_weights": null
    }

Exit codes: 0 success, 1 config or usage error, 2 empty dataset, 3 non-finite loss.
``SLLEN_THREADS`` caps torch threads and per-image workers.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np
import torch

from . import dataset, imagecore, losses, metrics, trainer
from .errors import (ConfigError, CorruptImage, EmptyDataset, InvalidParam, NonFiniteLoss, ShapeError,
                     ShapeMismatch, SllenError, UnsupportedFormat, WeightLoadError)
from .net import Variant, load_network
from .ssn import SsnConfig, build_ssn

log = logging.getLogger("sllen")

EXIT_OK, EXIT_USAGE, EXIT_EMPTY, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def load_config(path) -> dict:
    if path is None:
        return {}
    try:
        d = json.loads(Path(path).read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}")
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: invalid JSON ({e})")
    if not isinstance(d, dict):
        raise ConfigError(f"{path}: top level must be an object")
    return d


def resolve_train_config(args) -> trainer.TrainConfig:
    d = load_config(args.config)
    overrides = {
        "seed": args.seed, "steps": getattr(args, "steps", None), "lr": getattr(args, "lr", None),
        "batch_size": getattr(args, "batch_size", None), "variant": getattr(args, "variant", None),
        "patch": getattr(args, "patch", None), "base_channels": getattr(args, "base_channels", None),
        "checkpoint_every": getattr(args, "checkpoint_every", None),
    }
    d.update({k: v for k, v in overrides.items() if v is not None})
    try:
        return trainer.TrainConfig.from_dict(d)
    except (TypeError, ValueError) as e:
        raise ConfigError(str(e))


def _data_pairs(path):
    root = Path(path)
    if not root.is_dir():
        raise ConfigError(f"data directory not found: {root}")
    for sub in ("low", "ref"):
        if not (root / sub).is_dir():
            raise ConfigError(f"{root} has no {sub}/ subdirectory")
    return dataset.scan_root(root)


def cmd_train(args) -> int:
    cfg = resolve_train_config(args)
    pairs = _data_pairs(args.data)
    run_dir = Path(args.out) / args.name
    runlog = trainer.fit(cfg, pairs, run_dir, resume=args.resume)
    last = runlog.rows[-1]
    print(f"trained {cfg.variant.label} for {cfg.steps} steps; final total {last['total']:.6g}")
    print(f"checkpoint: {runlog.checkpoint}")
    return EXIT_OK


def _ssn_for_checkpoint(net, meta):
    tc = meta.get("train_config")
    if tc is not None:
        return build_ssn(trainer.TrainConfig.from_dict(tc).ssn_config())
    return build_ssn(SsnConfig(num_classes=net.cfg.num_classes, seed=net.cfg.seed))


def cmd_enhance(args) -> int:
    net, _, meta = load_network(args.checkpoint)
    ssn = _ssn_for_checkpoint(net, meta)
    images = dataset.list_images(args.input)
    if not images:
        raise EmptyDataset(f"no images in {args.input}")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for stem, path in images.items():
        img = imagecore.load_image(path)
        if img.shape[0] == 1:
            img = img.expand(3, -1, -1)
        O = trainer.enhance_image(net, ssn, img)
        imagecore.save_image(O, out / f"{stem}.png")
    print(f"enhanced {len(images)} image(s) into {out}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    ssn = None
    if args.labels and not args.pred_labels:
        ssn = build_ssn(SsnConfig(num_classes=args.num_classes, seed=args.seed or 0))
    report = metrics.evaluate_dir(args.pred, ref_dir=args.ref, low_dir=args.low, mode=args.mode,
                                  labels_dir=args.labels, pred_labels_dir=args.pred_labels,
                                  num_classes=args.num_classes, ssn=ssn)
    path = Path(args.out) / "metrics.csv"
    report.write_csv(path)
    avg = ", ".join(f"{k} {v:.6g}" for k, v in report.averages.items())
    print(f"{report.count} image(s): {avg}")
    print(f"report: {path}")
    return EXIT_OK


def cmd_gradstat(args) -> int:
    images = dataset.list_images(args.input)
    if not images:
        raise EmptyDataset(f"no images in {args.input}")
    values = []
    for path in images.values():
        img = imagecore.load_image(path, dtype=torch.float64)
        values.append(float(imagecore.avg_gradient(img).mean()))
    values = np.asarray(values)
    counts, edges = np.histogram(values, bins=args.bins)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "gradstat.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["bin_lo", "bin_hi", "count"])
        for lo, hi, c in zip(edges[:-1], edges[1:], counts):
            w.writerow([repr(float(lo)), repr(float(hi)), int(c)])
    with open(out / "gradstat_summary.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["images", "mean"])
        w.writerow([len(values), repr(float(values.mean()))])
    print(f"{len(values)} image(s): mean average gradient {values.mean():.6g}")
    return EXIT_OK


def cmd_decompose(args) -> int:
    lows = dataset.list_images(args.low)
    enhanced = dataset.list_images(args.enhanced)
    stems, unmatched = dataset.match_stems(lows, enhanced, "enhanced")
    if unmatched:
        raise ConfigError(f"unmatched stems: {', '.join(unmatched)}")
    if not stems:
        raise EmptyDataset("no image pairs to decompose")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for stem in stems:
        low = imagecore.load_image(lows[stem], dtype=torch.float64)
        enh = imagecore.load_image(enhanced[stem], dtype=torch.float64)
        if low.shape != enh.shape:
            raise ShapeMismatch(f"{stem}: {tuple(low.shape)} vs {tuple(enh.shape)}")
        U = imagecore.retinex_decompose(low, enh)
        imagecore.save_image(imagecore.normalize_for_display(U), out / f"{stem}_U.png")
        imagecore.write_umap(U.float(), out / f"{stem}.umap")
        print(f"{stem}: itv {float(losses.itv_loss(U)):.6g}")
    return EXIT_OK


def plot_table(rows, path, columns=("psnr", "ssim", "loe", "ceiq")) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, axes = plt.subplots(1, len(columns), figsize=(3.2 * len(columns), 3))
    names = [r["name"] for r in rows]
    for ax, col in zip(np.atleast_1d(axes), columns):
        vals = [r.get(col) if r.get(col) is not None else 0.0 for r in rows]
        ax.bar(range(len(rows)), vals, color="tab:blue")
        ax.set_xticks(range(len(rows)), names, rotation=30, ha="right", fontsize=8)
        ax.set_title(col)
    fig.tight_layout()
    fig.savefig(path, format="png")
    plt.close(fig)


def cmd_ablate(args) -> int:
    cfg = resolve_train_config(args)
    pairs = _data_pairs(args.data)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    run = trainer.run_ablation if args.mode == "branch" else trainer.loss_ablation
    rows = run(cfg, pairs, out)
    plot_table(rows, out / "ablation.png")
    for r in rows:
        print(f"{r['name']:>12}  params {r['params']:>9}  psnr {r['psnr']}  ssim {r['ssim']}")
    return EXIT_OK


def _train_flags(p):
    p.add_argument("--data", required=True, help="dataset root with low/, ref/ and optional labels/")
    p.add_argument("--steps", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--variant", choices=[v.value for v in Variant])
    p.add_argument("--patch", type=int)
    p.add_argument("--base-channels", type=int)
    p.add_argument("--checkpoint-every", type=int)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="sllen", description="Semantic-aware low-light enhancement toolkit")
    p.add_argument("--config", help="JSON training config")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", default="run", help="output directory (default: run)")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    t = sub.add_parser("train", help="train an enhancement network")
    _train_flags(t)
    t.add_argument("--name", default="default", help="run name under --out")
    t.add_argument("--resume", action="store_true", help="continue from the newest checkpoint")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("enhance", help="enhance every image in a directory")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--input", required=True)
    e.set_defaults(func=cmd_enhance)

    v = sub.add_parser("evaluate", help="score enhanced images")
    v.add_argument("--pred", required=True, help="enhanced images")
    v.add_argument("--ref", help="references (paired mode)")
    v.add_argument("--low", help="low-light inputs (LOE; required in unpaired mode)")
    v.add_argument("--mode", choices=("paired", "unpaired"), default="paired")
    v.add_argument("--labels", help="ground-truth class maps; adds mIoU")
    v.add_argument("--pred-labels", help="predicted class maps (default: SSN segmentation)")
    v.add_argument("--num-classes", type=int, default=21)
    v.set_defaults(func=cmd_evaluate)

    a = sub.add_parser("ablate", help="branch or loss ablation")
    _train_flags(a)
    a.add_argument("--mode", choices=("branch", "loss"), default="branch")
    a.set_defaults(func=cmd_ablate)

    g = sub.add_parser("gradstat", help="average-gradient histogram of a directory")
    g.add_argument("--input", required=True)
    g.add_argument("--bins", type=int, default=20)
    g.set_defaults(func=cmd_gradstat)

    d = sub.add_parser("decompose", help="Retinex illumination maps of (low, enhanced) pairs")
    d.add_argument("--low", required=True)
    d.add_argument("--enhanced", required=True)
    d.set_defaults(func=cmd_decompose)
    return p


USAGE_ERRORS = (UsageError, ConfigError, InvalidParam, FileNotFoundError, WeightLoadError, UnsupportedFormat,
                CorruptImage, ShapeError, ShapeMismatch, ValueError)


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as e:
        print(f"sllen: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    torch.set_num_threads(metrics.worker_count())
    try:
        return args.func(args)
    except NonFiniteLoss as e:
        print(f"sllen: numerical failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except EmptyDataset as e:
        print(f"sllen: empty dataset: {e}", file=sys.stderr)
        return EXIT_EMPTY
    except USAGE_ERRORS as e:
        print(f"sllen: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except SllenError as e:
        print(f"sllen: error: {e}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
