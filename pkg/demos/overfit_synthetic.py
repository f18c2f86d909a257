"""Train a small network on the synthetic pairs and watch it recover the references.

    python3 demos/overfit_synthetic.py [--steps 300] [--out demo_run]
"""
import argparse
from pathlib import Path

import torch

from sllen.dataset import synthetic_pairs
from sllen.imagecore import save_image
from sllen.metrics import psnr
from sllen.trainer import TrainConfig, enhance_image, fit


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--steps", type=int, default=300)
    ap.add_argument("--out", default="demo_run")
    args = ap.parse_args()

    pairs = synthetic_pairs(4, 32)
    cfg = TrainConfig(steps=args.steps, batch_size=4, lr=1e-3, base_channels=8)
    log = fit(cfg, pairs, Path(args.out))
    first, last = log.rows[0], log.rows[-1]
    print(f"l_s   {first['l_s']:.4f} -> {last['l_s']:.4f}")
    print(f"total {first['total']:.4f} -> {last['total']:.4f}")

    out = Path(args.out) / "images"
    with torch.no_grad():
        for p in pairs:
            o = enhance_image(log.net, log.setup.ssn, p.low)
            print(f"{p.id}: low {psnr(p.low, p.reference):6.2f} dB  enhanced {psnr(o, p.reference):6.2f} dB")
            for tag, img in (("low", p.low), ("out", o), ("ref", p.reference)):
                save_image(img, out / f"{p.id}_{tag}.png")
    print(f"images in {out}")


if __name__ == "__main__":
    main()
