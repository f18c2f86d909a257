"""The quality metrics on a reference, a darkened copy and a noisy copy."""
import torch

from sllen.dataset import synthetic_pairs
from sllen.metrics import ceiq, loe, psnr, ssim

pair = synthetic_pairs(1, 64)[0]
ref, low = pair.reference, pair.low
noisy = (ref + 0.05 * torch.randn(ref.shape, generator=torch.Generator().manual_seed(0))).clamp(0, 1)

print(f"{'image':8s} {'psnr':>7s} {'ssim':>6s} {'loe':>8s} {'ceiq':>6s}")
for name, img in (("ref", ref), ("low", low), ("noisy", noisy)):
    print(f"{name:8s} {psnr(img, ref):7.2f} {ssim(img, ref):6.3f} {loe(low, img):8.1f} {ceiq(img):6.3f}")
