"""Paired/unpaired dataset ingestion, synthetic darkening and batching."""
from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Optional

import numpy as np
import torch
from PIL import Image

from .errors import EmptyDataset, InvalidParam, LabelOutOfRange, PatchLargerThanImage, ShapeMismatch
from .imagecore import avg_gradient, load_image

log = logging.getLogger(__name__)

IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg")
DEFAULT_BATCH_SIZE = 6
DARKEN_GAMMA_RANGE = (2.0, 5.0)
DARKEN_SCALE_RANGE = (0.4, 0.9)


@dataclass
class SamplePair:
    low: torch.Tensor
    reference: Optional[torch.Tensor] = None
    label_map: Optional[np.ndarray] = None
    id: str = ""

    def __post_init__(self):
        if self.reference is not None and self.reference.shape != self.low.shape:
            raise ShapeMismatch(
                f"{self.id}: low {tuple(self.low.shape)} vs reference {tuple(self.reference.shape)}"
            )


@dataclass
class Batch:
    lows: torch.Tensor
    references: Optional[torch.Tensor]
    ids: list = field(default_factory=list)

    def __len__(self):
        return self.lows.shape[0]


def list_images(directory) -> dict:
    """Map file stem -> path for every PNG/JPEG in ``directory``."""
    directory = Path(directory)
    if not directory.is_dir():
        raise FileNotFoundError(directory)
    out = {}
    for p in sorted(directory.iterdir()):
        if p.suffix.lower() in IMAGE_SUFFIXES and p.is_file():
            out.setdefault(p.stem, p)
    return out


def load_label_map(path, num_classes: Optional[int] = None) -> np.ndarray:
    """Read an 8-bit class-id PNG (grayscale or palette) as an int64 (H, W) array."""
    with Image.open(path) as im:
        arr = np.asarray(im)
    if arr.ndim != 2:
        raise ShapeMismatch(f"{path}: label maps must be single-channel")
    arr = arr.astype(np.int64)
    if num_classes is not None and (arr.min() < 0 or arr.max() >= num_classes):
        raise LabelOutOfRange(f"{path}: class ids must lie in [0, {num_classes})")
    return arr


def match_stems(left: dict, right: dict, what: str = "reference") -> tuple:
    """Return (common stems, unmatched stems) and warn about the unmatched ones."""
    common = sorted(set(left) & set(right))
    unmatched = sorted(set(left) ^ set(right))
    if unmatched:
        msg = f"unmatched {what} stems: {', '.join(unmatched)}"
        warnings.warn(msg, stacklevel=3)
        log.warning(msg)
    return common, unmatched


def scan_paired_dir(low_dir, ref_dir, labels_dir=None, num_classes: Optional[int] = None) -> list:
    """Load low/reference pairs that share a file stem, sorted by stem."""
    lows = list_images(low_dir)
    refs = list_images(ref_dir)
    stems, _ = match_stems(lows, refs)
    if not stems:
        raise EmptyDataset(f"no matching images in {low_dir} and {ref_dir}")
    labels = list_images(labels_dir) if labels_dir is not None else {}
    pairs = []
    for stem in stems:
        label = load_label_map(labels[stem], num_classes) if stem in labels else None
        pairs.append(SamplePair(load_image(lows[stem]), load_image(refs[stem]), label, stem))
    return pairs


def scan_unpaired_dir(low_dir) -> list:
    lows = list_images(low_dir)
    if not lows:
        raise EmptyDataset(f"no images in {low_dir}")
    return [SamplePair(load_image(p), None, None, stem) for stem, p in lows.items()]


def scan_root(root, labels: bool = True) -> list:
    """Read ``<root>/low``, ``<root>/ref`` and optionally ``<root>/labels``."""
    root = Path(root)
    labels_dir = root / "labels"
    return scan_paired_dir(
        root / "low", root / "ref", labels_dir if labels and labels_dir.is_dir() else None
    )


def darken(img: torch.Tensor, gamma: Optional[float] = None, scale: Optional[float] = None,
           seed: Optional[int] = None) -> torch.Tensor:
    """Synthetic low-light version of ``img``: ``scale * img ** gamma``.

    Unset ``gamma``/``scale`` are drawn from Uniform[2, 5] and Uniform[0.4, 0.9]
    using a generator seeded by ``seed``.
    """
    if gamma is None or scale is None:
        if seed is None:
            raise InvalidParam("gamma and scale must be given unless a seed is provided")
        rng = np.random.default_rng(seed)
        g = rng.uniform(*DARKEN_GAMMA_RANGE)
        s = rng.uniform(*DARKEN_SCALE_RANGE)
        gamma = g if gamma is None else gamma
        scale = s if scale is None else scale
    if gamma < 1:
        raise InvalidParam(f"gamma must be >= 1, got {gamma}")
    if not 0 < scale <= 1:
        raise InvalidParam(f"scale must lie in (0, 1], got {scale}")
    return scale * img.clamp(min=0.0) ** gamma


def _crop_box(rng, h, w, patch):
    top = int(rng.integers(0, h - patch + 1))
    left = int(rng.integers(0, w - patch + 1))
    return top, left


def iterate_batches(pairs, batch_size: int = DEFAULT_BATCH_SIZE, patch: Optional[int] = None,
                    seed: int = 0, epochs: Optional[int] = None, flip: bool = False) -> Iterator[Batch]:
    """Yield shuffled, randomly cropped batches; ``epochs=None`` streams forever.

    Epoch ``e`` draws its permutation and crops from ``default_rng((seed, e))``
    so the sequence depends only on the seed. The last partial batch is kept.
    """
    if batch_size < 1:
        raise InvalidParam("batch_size must be >= 1")
    if not pairs:
        raise EmptyDataset("no samples to batch")
    if patch is not None:
        if patch <= 0 or patch % 8:
            raise InvalidParam(f"patch must be a positive multiple of 8, got {patch}")
        for p in pairs:
            h, w = p.low.shape[-2:]
            if patch > h or patch > w:
                raise PatchLargerThanImage(f"{p.id}: patch {patch} exceeds {h}x{w}")
    else:
        shapes = {tuple(p.low.shape) for p in pairs}
        if len(shapes) != 1:
            raise ShapeMismatch("full-image batching needs equally sized images; set a patch size")

    has_ref = all(p.reference is not None for p in pairs)
    epoch = 0
    while epochs is None or epoch < epochs:
        rng = np.random.default_rng((seed, epoch))
        order = rng.permutation(len(pairs))
        for start in range(0, len(order), batch_size):
            lows, refs, ids = [], [], []
            for idx in order[start:start + batch_size]:
                p = pairs[idx]
                low, ref = p.low, p.reference
                if patch is not None:
                    top, left = _crop_box(rng, low.shape[-2], low.shape[-1], patch)
                    low = low[..., top:top + patch, left:left + patch]
                    if ref is not None:
                        ref = ref[..., top:top + patch, left:left + patch]
                if flip and rng.random() < 0.5:
                    low = low.flip(-1)
                    ref = ref.flip(-1) if ref is not None else None
                lows.append(low)
                refs.append(ref)
                ids.append(p.id)
            yield Batch(
                torch.stack(lows),
                torch.stack(refs) if has_ref else None,
                ids,
            )
        epoch += 1


def synthetic_reference(size: int = 32, seed: int = 0, center: float = 0.68, freq: float = 4.3,
                        target_gradient: float = 0.051, dtype=torch.float32) -> torch.Tensor:
    """Smooth ``(3, size, size)`` test image whose per-channel average gradient is ``target_gradient``.

    Each channel is ``center + a * (sin(x) + sin(y)) / 2`` with random
    frequencies in ``[freq, freq + 0.4)`` cycles per image and random phases;
    the amplitude ``a`` is found by bisection.
    """
    g = torch.Generator().manual_seed(seed)
    yy, xx = torch.meshgrid(torch.arange(size, dtype=torch.float64),
                            torch.arange(size, dtype=torch.float64), indexing="ij")
    chans = []
    for _ in range(3):
        f = freq + 0.4 * torch.rand(2, generator=g, dtype=torch.float64)
        ph = 2 * math.pi * torch.rand(2, generator=g, dtype=torch.float64)
        tex = 0.5 * (torch.sin(2 * math.pi * f[0] * xx / size + ph[0])
                     + torch.sin(2 * math.pi * f[1] * yy / size + ph[1]))
        lo, hi = 0.0, 1.0
        for _ in range(60):
            a = (lo + hi) / 2
            if avg_gradient((center + a * tex)[None])[0] < target_gradient:
                lo = a
            else:
                hi = a
        chans.append(center + a * tex)
    return torch.stack(chans).to(dtype)


def synthetic_pairs(count: int = 4, size: int = 32, gamma: float = 2.5, scale: float = 0.6,
                    seed: int = 100, **kw) -> list:
    """``count`` reference images and their darkened versions, ids ``syn000``..."""
    out = []
    for i in range(count):
        ref = synthetic_reference(size, seed + i, **kw)
        out.append(SamplePair(darken(ref, gamma, scale), ref, None, f"syn{i:03d}"))
    return out
