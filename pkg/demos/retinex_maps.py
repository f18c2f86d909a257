"""Illumination maps for a hand-made low/enhanced pair.

A dark image brightened by a global gain gives a flat map; a spatially
varying gain shows up as structure in U and a larger itv score.
"""
import torch

from sllen.imagecore import normalize_for_display, retinex_decompose, save_image
from sllen.losses import itv_loss

torch.manual_seed(0)
scene = torch.rand(3, 48, 48) * 0.8 + 0.1
low = scene * 0.2

flat = retinex_decompose(low, (low * 4).clamp(0, 1))
ramp = torch.linspace(2.0, 5.0, 48).view(1, 1, 48)
varied = retinex_decompose(low, (low * ramp).clamp(0, 1))

for name, U in (("global gain", flat), ("ramped gain", varied)):
    print(f"{name:12s} U in [{U.min():.3f}, {U.max():.3f}]  itv {itv_loss(U).item():.6f}")

save_image(normalize_for_display(varied), "retinex_ramp_U.png")
print("wrote retinex_ramp_U.png")
