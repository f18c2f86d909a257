"""Training losses and their weighted total.

total = l_s + l_vgg + lambda_kd * l_kd + lambda_itv * l_itv + lambda_gra * l_gra
"""
from __future__ import annotations

import math
from dataclasses import dataclass, fields
from typing import Optional, Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F

from .blob import load_blob, load_into
from .errors import ConfigError, LengthMismatch, NonFiniteLoss, ShapeMismatch
from .imagecore import RETINEX_EPS, avg_gradient, retinex_decompose, spatial_gradients

TARGET_GRADIENT = 0.051
TERMS = ("l_s", "l_vgg", "l_kd", "l_itv", "l_gra")


@dataclass(frozen=True)
class LossWeights:
    lambda_kd: float = 1.0
    lambda_itv: float = 5.0
    lambda_gra: float = 1.0
    G: float = TARGET_GRADIENT
    huber_delta: float = 1.0

    def __post_init__(self):
        for name in ("lambda_kd", "lambda_itv", "lambda_gra", "huber_delta"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")
        if not 0 < self.G < 1:
            raise ConfigError("G must lie in (0, 1)")

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        if set(d) - known:
            raise ConfigError(f"unknown loss weight keys: {sorted(set(d) - known)}")
        return cls(**d)


@dataclass
class LossBreakdown:
    """Per-term losses (0-dim tensors; ``total`` carries the graph)."""

    l_s: torch.Tensor
    l_vgg: torch.Tensor
    l_kd: torch.Tensor
    l_itv: torch.Tensor
    l_gra: torch.Tensor
    total: torch.Tensor

    def values(self) -> dict:
        return {k: float(getattr(self, k).detach()) for k in (*TERMS, "total")}

    def csv_row(self, step) -> list:
        v = self.values()
        return [step] + [repr(v[k]) for k in (*TERMS, "total")]

    def check_finite(self, step=None):
        for k, v in self.values().items():
            if not math.isfinite(v):
                raise NonFiniteLoss(k, v, step)
        return self


CSV_HEADER = ["step", *TERMS, "total"]


def _same_shape(a, b):
    if a.shape != b.shape:
        raise ShapeMismatch(f"{tuple(a.shape)} vs {tuple(b.shape)}")


def smooth_loss(O, GT, delta: float = 1.0):
    """Mean Huber loss."""
    _same_shape(O, GT)
    return F.huber_loss(O, GT, reduction="mean", delta=delta)


class FeatureExtractor(nn.Module):
    """Frozen conv stack standing in for a pretrained perceptual network.

    Returns the activations of every stage listed in ``taps``.
    """

    def __init__(self, widths=(16, 32, 64), taps=None, seed: int = 0, weights_path=None):
        super().__init__()
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(seed)
            stages = []
            c = 3
            for i, w in enumerate(widths):
                stride = 1 if i == 0 else 2
                stages.append(nn.Sequential(nn.Conv2d(c, w, 3, stride=stride, padding=1), nn.LeakyReLU(0.2)))
                c = w
            self.stages = nn.ModuleList(stages)
        self.taps = tuple(range(len(widths))) if taps is None else tuple(taps)
        if weights_path is not None:
            tensors, _ = load_blob(weights_path)
            load_into(self, tensors, path=weights_path)
        self.eval()
        for p in self.parameters():
            p.requires_grad_(False)

    def forward(self, x):
        feats = []
        for i, stage in enumerate(self.stages):
            x = stage(x)
            if i in self.taps:
                feats.append(x)
        return feats


class IdentityExtractor(nn.Module):
    def forward(self, x):
        return [x]


def perceptual_loss(O, GT, feat: nn.Module):
    """Sum over tapped stages of the mean squared feature distance."""
    _same_shape(O, GT)
    fo, fg = feat(O), feat(GT)
    return sum(F.mse_loss(a, b) for a, b in zip(fo, fg))


def kd_loss(E: Sequence[torch.Tensor], D: Sequence[torch.Tensor]):
    """Encoder-as-teacher distillation: sum_i MSE(E_i, D_{n-i+1}), E detached."""
    if len(E) != len(D):
        raise LengthMismatch(f"{len(E)} encoder vs {len(D)} decoder embeddings")
    if not E:
        raise LengthMismatch("no embeddings")
    n = len(E)
    total = 0
    for i in range(n):
        e, d = E[i], D[n - 1 - i]
        _same_shape(e, d)
        total = total + F.mse_loss(d, e.detach())
    return total


def itv_loss(U):
    """Mean squared forward-difference energy of the illumination map."""
    gx, gy = spatial_gradients(U)
    return (gx.pow(2) + gy.pow(2)).mean()


def gra_loss(batch_O, G: float = TARGET_GRADIENT):
    """(1/(3N)) sum_i || avg_gradient(O_i) - G ||_1."""
    if batch_O.dim() == 3:
        batch_O = batch_O[None]
    return (avg_gradient(batch_O) - G).abs().mean()


def total_loss(trace, GT, low, w: LossWeights = LossWeights(), feat: Optional[nn.Module] = None,
               eps: float = RETINEX_EPS) -> LossBreakdown:
    O = trace.O
    if feat is None:
        feat = IdentityExtractor()
    l_s = smooth_loss(O, GT, w.huber_delta)
    l_vgg = perceptual_loss(O, GT, feat)
    l_kd = kd_loss(trace.E, trace.D)
    l_itv = itv_loss(retinex_decompose(low, O, eps))
    l_gra = gra_loss(O, w.G)
    total = l_s + l_vgg + w.lambda_kd * l_kd + w.lambda_itv * l_itv + w.lambda_gra * l_gra
    return LossBreakdown(l_s, l_vgg, l_kd, l_itv, l_gra, total)
