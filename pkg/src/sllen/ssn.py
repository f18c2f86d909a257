"""Frozen semantic-segmentation provider.

Produces per-pixel class probabilities ``S`` and the 512-channel intermediate
embedding ``B`` tapped from the fourth stage. The built-in network is a small
fully-convolutional stack with seeded random weights; trained weights can be
loaded from a parameter blob (see :mod:`sllen.blob`).
"""
from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import NamedTuple, Optional

import torch
import torch.nn as nn
import torch.nn.functional as F

from .blob import load_blob, load_into, save_blob
from .errors import ConfigError, ShapeError

STAGE_WIDTHS = (64, 128, 256, 512, 256)
STAGE_STRIDES = (2, 2, 2, 1, 1)
B_CHANNELS = 512


@dataclass(frozen=True)
class SsnConfig:
    num_classes: int = 21
    tap_layer: int = 4
    tap_preactivation: bool = False
    weights_path: Optional[str] = None
    seed: int = 0
    widths: tuple = STAGE_WIDTHS


class SemanticOutputs(NamedTuple):
    S: torch.Tensor
    B: torch.Tensor


class SegNet(nn.Module):
    def __init__(self, cfg: SsnConfig):
        super().__init__()
        if len(cfg.widths) < 5 or len(cfg.widths) != len(STAGE_STRIDES):
            raise ConfigError("the SSN needs exactly 5 convolutional stages")
        if not 1 <= cfg.tap_layer <= len(cfg.widths):
            raise ConfigError(f"tap_layer {cfg.tap_layer} does not index a stage")
        if cfg.widths[cfg.tap_layer - 1] != B_CHANNELS:
            raise ConfigError(
                f"stage {cfg.tap_layer} emits {cfg.widths[cfg.tap_layer - 1]} channels, need {B_CHANNELS}"
            )
        self.cfg = cfg
        convs = []
        c_in = 3
        for width, stride in zip(cfg.widths, STAGE_STRIDES):
            convs.append(nn.Conv2d(c_in, width, 3, stride=stride, padding=1))
            c_in = width
        self.stages = nn.ModuleList(convs)
        self.head = nn.Conv2d(c_in, cfg.num_classes, 1)

    def forward(self, x):
        h, w = x.shape[-2:]
        tap = None
        for i, conv in enumerate(self.stages, start=1):
            pre = conv(x)
            x = F.relu(pre)
            if i == self.cfg.tap_layer:
                tap = pre if self.cfg.tap_preactivation else x
        logits = F.interpolate(self.head(x), size=(h, w), mode="bilinear", align_corners=False)
        return SemanticOutputs(torch.softmax(logits, dim=1), tap)


class SsnHandle:
    """A frozen segmentation network; parameters never receive gradients."""

    def __init__(self, cfg: SsnConfig, net: SegNet):
        self.cfg = cfg
        self.net = net.eval()
        for p in self.net.parameters():
            p.requires_grad_(False)

    def parameters(self):
        return self.net.parameters()

    def to(self, *args, **kwargs):
        self.net.to(*args, **kwargs)
        return self

    def double(self):
        return self.to(torch.float64)

    def save(self, path):
        save_blob(path, self.net.state_dict(), {"kind": "ssn", "config": _cfg_dict(self.cfg)})

    def __call__(self, img):
        return ssn_forward(self, img)


def _cfg_dict(cfg):
    d = asdict(cfg)
    d["widths"] = list(d["widths"])
    d.pop("weights_path")
    return d


def build_ssn(cfg: SsnConfig = SsnConfig()) -> SsnHandle:
    """Build the frozen SSN; weights are seeded or read from ``cfg.weights_path``."""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(cfg.seed)
        net = SegNet(cfg)
    if cfg.weights_path is not None:
        tensors, _ = load_blob(cfg.weights_path)
        load_into(net, tensors, path=cfg.weights_path)
    return SsnHandle(cfg, net)


def ssn_forward(handle: SsnHandle, img: torch.Tensor) -> SemanticOutputs:
    """Run the SSN on ``(3, H, W)`` or ``(N, 3, H, W)``; H and W must be multiples of 8."""
    single = img.dim() == 3
    x = img[None] if single else img
    if x.dim() != 4 or x.shape[1] != 3:
        raise ShapeError(f"expected (N, 3, H, W), got {tuple(img.shape)}")
    if x.shape[-2] % 8 or x.shape[-1] % 8:
        raise ShapeError(f"H and W must be divisible by 8, got {tuple(x.shape[-2:])}")
    with torch.no_grad():
        out = handle.net(x)
    if single:
        return SemanticOutputs(out.S[0], out.B[0])
    return out
