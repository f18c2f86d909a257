"""The two-branch enhancement network.

A U-Net whose bottleneck feature ``L`` is refined by two branches before
decoding:

* semantic attention: ``H = hseb(S)`` then ``L_H = softmax(Q K^T / sqrt(d_k)) V (+ L)``
  with queries/values from ``L`` and keys from ``H``;
* embedding-driven power transform: ``L_B = beta * L^alpha`` with per-channel
  ``alpha, beta`` predicted from the SSN embedding ``B``;

and fused as ``F = W * L'_H + (1 - W) * L'_B`` with a per-pixel sigmoid weight.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields
from enum import Enum
from typing import List, Optional

import torch
import torch.nn as nn
import torch.nn.functional as F

from .blob import load_blob, load_into, save_blob
from .errors import ConfigError, ShapeError, TokenBudgetExceeded, WeightLoadError

POWER_FLOOR = 1e-6
SOFTPLUS_INV_ONE = math.log(math.e - 1.0)
LEAKY_SLOPE = 0.01


class Variant(str, Enum):
    FULL = "full"
    NO_HSF = "no_hsf"
    NO_IEF = "no_ief"
    UNET = "unet"

    @property
    def label(self):
        return {"full": "FULL", "no_hsf": "SLLEN-1", "no_ief": "SLLEN-2", "unet": "SLLEN-3"}[self.value]

    @property
    def uses_attention(self):
        return self in (Variant.FULL, Variant.NO_IEF)

    @property
    def uses_embedding(self):
        return self in (Variant.FULL, Variant.NO_HSF)


@dataclass(frozen=True)
class NetConfig:
    base_channels: int = 32
    depth: int = 3
    attention_dk: int = 64
    variant: Variant = Variant.FULL
    seed: int = 0
    num_classes: int = 21
    b_channels: int = 512
    hseb_widths: tuple = (64, 128, 512)
    attention_residual: bool = True
    token_cap: int = 4096

    def __post_init__(self):
        object.__setattr__(self, "variant", Variant(self.variant))
        object.__setattr__(self, "hseb_widths", tuple(self.hseb_widths))
        if self.base_channels < 1 or self.depth < 1 or self.attention_dk < 1:
            raise ConfigError("base_channels, depth and attention_dk must be positive")

    @property
    def bottleneck_channels(self):
        return self.base_channels * 2 ** self.depth

    @property
    def multiple(self):
        return 2 ** self.depth

    def to_dict(self):
        d = asdict(self)
        d["variant"] = self.variant.value
        d["hseb_widths"] = list(self.hseb_widths)
        return d

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown NetConfig keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class ForwardTrace:
    O: torch.Tensor
    L: torch.Tensor
    E: List[torch.Tensor]
    D: List[torch.Tensor]
    L_H: Optional[torch.Tensor] = None
    L_B: Optional[torch.Tensor] = None
    F: Optional[torch.Tensor] = None
    H: Optional[torch.Tensor] = None
    attention: Optional[torch.Tensor] = None
    alpha: Optional[torch.Tensor] = None
    beta: Optional[torch.Tensor] = None
    W_map: Optional[torch.Tensor] = None
    L_H_prime: Optional[torch.Tensor] = None
    L_B_prime: Optional[torch.Tensor] = None


def _act():
    return nn.LeakyReLU(LEAKY_SLOPE)


def _kaiming(module):
    for m in module.modules():
        if isinstance(m, nn.Conv2d):
            nn.init.kaiming_normal_(m.weight, a=LEAKY_SLOPE, nonlinearity="leaky_relu")
            nn.init.zeros_(m.bias)


class DoubleConv(nn.Sequential):
    def __init__(self, c_in, c_out):
        super().__init__(
            nn.Conv2d(c_in, c_out, 3, padding=1), _act(),
            nn.Conv2d(c_out, c_out, 3, padding=1), _act(),
        )


class Encoder(nn.Module):
    def __init__(self, base, depth, in_channels=3):
        super().__init__()
        widths = [base * 2 ** i for i in range(depth)]
        self.stages = nn.ModuleList()
        c = in_channels
        for w in widths:
            self.stages.append(DoubleConv(c, w))
            c = w
        self.bottleneck = DoubleConv(c, base * 2 ** depth)

    def forward(self, x):
        skips = []
        for stage in self.stages:
            x = stage(x)
            skips.append(x)
            x = F.max_pool2d(x, 2)
        return self.bottleneck(x), skips


class Decoder(nn.Module):
    def __init__(self, base, depth, out_channels=3, in_channels=3):
        super().__init__()
        self.ups = nn.ModuleList()
        self.blocks = nn.ModuleList()
        c = base * 2 ** depth
        for i in reversed(range(depth)):
            w = base * 2 ** i
            self.ups.append(nn.Conv2d(c, w, 3, padding=1))
            self.blocks.append(DoubleConv(2 * w, w))
            c = w
        self.out = nn.Conv2d(c + in_channels, out_channels, 3, padding=1)

    def forward(self, feat, skips, img):
        x = feat
        D = []
        for up, block, skip in zip(self.ups, self.blocks, reversed(skips)):
            x = F.interpolate(x, size=skip.shape[-2:], mode="bilinear", align_corners=False)
            u = up(x)
            D.append(u)
            x = block(torch.cat([u, skip], dim=1))
        return torch.sigmoid(self.out(torch.cat([x, img], dim=1))), D


class UNet(nn.Module):
    """Plain encoder/decoder; also the trunk shared by every variant."""

    def __init__(self, cfg: NetConfig):
        super().__init__()
        self.encoder = Encoder(cfg.base_channels, cfg.depth)
        self.decoder = Decoder(cfg.base_channels, cfg.depth)
        _kaiming(self)

    def forward(self, img):
        L, skips = self.encoder(img)
        O, _ = self.decoder(L, skips, img)
        return O


class HSEB(nn.Module):
    """Three conv3x3 + ReLU + 2x2 max-pool stages turning S into a 512-channel H."""

    def __init__(self, num_classes, widths=(64, 128, 512)):
        super().__init__()
        layers = []
        c = num_classes
        for w in widths:
            layers += [nn.Conv2d(c, w, 3, padding=1), nn.ReLU(), nn.MaxPool2d(2)]
            c = w
        self.body = nn.Sequential(*layers)
        self.out_channels = c
        _kaiming(self)

    def forward(self, S, size=None):
        H = self.body(S)
        if size is not None and tuple(H.shape[-2:]) != tuple(size):
            H = F.interpolate(H, size=size, mode="bilinear", align_corners=False)
        return H


def scaled_dot_attention(Q, K, V):
    """Token attention over flattened spatial positions.

    ``Q, K`` are ``(N, d_k, T)``, ``V`` is ``(N, C, T)``. Returns ``(A V, A)`` with
    ``A`` of shape ``(N, T, T)`` and rows summing to one.
    """
    d_k = Q.shape[1]
    logits = torch.einsum("ndt,nds->nts", Q, K) / math.sqrt(d_k)
    A = torch.softmax(logits, dim=-1)
    out = torch.einsum("nts,ncs->nct", A, V)
    return out, A


class HSBAB(nn.Module):
    def __init__(self, channels, h_channels=512, d_k=64, residual=True, token_cap=4096):
        super().__init__()
        self.q = nn.Conv2d(channels, d_k, 1)
        self.k = nn.Conv2d(h_channels, d_k, 1)
        self.v = nn.Conv2d(channels, channels, 1)
        _kaiming(self)
        # zero values: the block starts as the identity on L (with the residual)
        nn.init.zeros_(self.v.weight)
        self.residual = residual
        self.token_cap = token_cap

    def forward(self, L, H):
        if L.shape[-2:] != H.shape[-2:]:
            raise ShapeError(f"L grid {tuple(L.shape[-2:])} != H grid {tuple(H.shape[-2:])}")
        n, c, h, w = L.shape
        T = h * w
        if T > self.token_cap:
            raise TokenBudgetExceeded(f"{T} tokens exceeds the cap of {self.token_cap}")
        out, A = scaled_dot_attention(
            self.q(L).flatten(2), self.k(H).flatten(2), self.v(L).flatten(2)
        )
        out = out.reshape(n, c, h, w)
        if self.residual:
            out = out + L
        return out, A


def power_transform(L, alpha, beta):
    """``beta[c] * (max(L, 0) + 1e-6) ** alpha[c]`` broadcast over space."""
    base = L.clamp(min=0.0) + POWER_FLOOR
    return beta[..., None, None] * base ** alpha[..., None, None]


class RSAEB(nn.Module):
    def __init__(self, channels, b_channels=512):
        super().__init__()
        self.proj = nn.Conv2d(b_channels, channels, 1) if b_channels != channels else nn.Identity()
        self.body = nn.Sequential(
            nn.Conv2d(channels, channels, 3, padding=1), _act(),
            nn.Conv2d(channels, channels, 3, padding=1), _act(),
        )
        self.head = nn.Linear(channels, 2 * channels)
        _kaiming(self)
        with torch.no_grad():
            self.head.weight.mul_(0.1)
            self.head.bias.fill_(SOFTPLUS_INV_ONE)

    def coefficients(self, B, size=None):
        B = self.proj(B)
        if size is not None and tuple(B.shape[-2:]) != tuple(size):
            B = F.interpolate(B, size=size, mode="bilinear", align_corners=False)
        pooled = self.body(B).mean(dim=(-2, -1))
        alpha, beta = F.softplus(self.head(pooled)).chunk(2, dim=-1)
        return alpha, beta

    def forward(self, L, B):
        alpha, beta = self.coefficients(B, L.shape[-2:])
        if alpha.shape[-1] != L.shape[1]:
            raise ShapeError(f"alpha has {alpha.shape[-1]} entries for {L.shape[1]} channels")
        return power_transform(L, alpha, beta), alpha, beta


class FFB(nn.Module):
    def __init__(self, channels):
        super().__init__()
        self.conv_h = nn.Conv2d(channels, channels, 3, padding=1)
        self.conv_b = nn.Conv2d(channels, channels, 3, padding=1)
        self.conv_w = nn.Conv2d(2 * channels, 1, 3, padding=1)
        _kaiming(self)
        nn.init.dirac_(self.conv_h.weight)
        nn.init.dirac_(self.conv_b.weight)

    def forward(self, L_H, L_B):
        if L_H.shape != L_B.shape:
            raise ShapeError(f"fusion inputs differ: {tuple(L_H.shape)} vs {tuple(L_B.shape)}")
        h = self.conv_h(L_H)
        b = self.conv_b(L_B)
        W = torch.sigmoid(self.conv_w(torch.cat([h, b], dim=1)))
        return W * h + (1 - W) * b, W, h, b


class SLLEN(nn.Module):
    def __init__(self, cfg: NetConfig = NetConfig()):
        super().__init__()
        self.cfg = cfg
        c = cfg.bottleneck_channels
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(cfg.seed)
            self.unet = UNet(cfg)
            v = cfg.variant
            if v.uses_attention:
                self.hseb = HSEB(cfg.num_classes, cfg.hseb_widths)
                self.hsbab = HSBAB(c, self.hseb.out_channels, cfg.attention_dk,
                                   cfg.attention_residual, cfg.token_cap)
            if v.uses_embedding:
                self.rsaeb = RSAEB(c, cfg.b_channels)
            if v is not Variant.UNET:
                self.ffb = FFB(c)

    def encode(self, img):
        self._check_input(img)
        L, skips = self.unet.encoder(img)
        return L, skips, list(skips)

    def decode(self, feat, skips, img):
        return self.unet.decoder(feat, skips, img)

    def _check_input(self, img):
        if img.dim() != 4 or img.shape[1] != 3:
            raise ShapeError(f"expected (N, 3, H, W), got {tuple(img.shape)}")
        m = self.cfg.multiple
        if img.shape[-2] % m or img.shape[-1] % m:
            raise ShapeError(f"H and W must be divisible by {m}, got {tuple(img.shape[-2:])}")

    def forward(self, img, S=None, B=None) -> ForwardTrace:
        single = img.dim() == 3
        if single:
            img = img[None]
            S = S[None] if S is not None else None
            B = B[None] if B is not None else None
        L, skips, E = self.encode(img)
        trace = ForwardTrace(O=None, L=L, E=E, D=[])
        v = self.cfg.variant
        if v is Variant.UNET:
            fused = L
        else:
            branch_h = branch_b = L
            if v.uses_attention:
                if S is None:
                    raise ShapeError(f"variant {v.value} needs the semantic map S")
                trace.H = self.hseb(S, L.shape[-2:])
                trace.L_H, trace.attention = self.hsbab(L, trace.H)
                branch_h = trace.L_H
            if v.uses_embedding:
                if B is None:
                    raise ShapeError(f"variant {v.value} needs the embedding B")
                trace.L_B, trace.alpha, trace.beta = self.rsaeb(L, B)
                branch_b = trace.L_B
            fused, trace.W_map, trace.L_H_prime, trace.L_B_prime = self.ffb(branch_h, branch_b)
        trace.F = fused
        trace.O, trace.D = self.decode(fused, skips, img)
        return trace

    def enhance(self, img, S=None, B=None):
        return self.forward(img, S, B).O


def build_network(cfg: NetConfig = NetConfig()) -> SLLEN:
    return SLLEN(cfg)


def build_unet(cfg: NetConfig = NetConfig()) -> UNet:
    """Plain U-Net seeded exactly like the trunk of ``SLLEN(cfg)``."""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(cfg.seed)
        return UNet(cfg)


def count_parameters(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters() if p.requires_grad)


def save_network(path, net: SLLEN, extra=None, meta=None) -> None:
    tensors = {"net." + k: v for k, v in net.state_dict().items()}
    if extra:
        tensors.update(extra)
    m = {"kind": "sllen", "net_config": net.cfg.to_dict()}
    m.update(meta or {})
    save_blob(path, tensors, m)


def load_network(path, expected: Optional[NetConfig] = None):
    """Rebuild a network from a checkpoint; returns ``(net, tensors, meta)``."""
    tensors, meta = load_blob(path)
    if meta.get("kind") != "sllen" or "net_config" not in meta:
        raise WeightLoadError(f"{path}: not an SLLEN checkpoint")
    cfg = NetConfig.from_dict(meta["net_config"])
    if expected is not None and cfg != expected:
        raise ConfigError(f"{path}: checkpoint config {cfg} does not match {expected}")
    net = SLLEN(cfg)
    net_tensors = {k: v for k, v in tensors.items() if k.startswith("net.")}
    load_into(net, net_tensors, prefix="net.", path=path)
    return net, tensors, meta
