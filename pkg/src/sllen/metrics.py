"""Full-reference and no-reference image quality metrics.

All metrics work on ``(C, H, W)`` tensors or arrays with values in [0, 1] and
compute in float64 numpy.
"""
from __future__ import annotations

import csv
import math
import os
from fractions import Fraction
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
from scipy.ndimage import correlate1d

from .errors import EmptyDataset, ImageTooSmall, LabelOutOfRange, ShapeMismatch

PSNR_CAP = 100.0
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2
LOE_MAX_SIDE = 100
LUMA = np.array([0.299, 0.587, 0.114])

# Fixed surrogate coefficients: score = w0 + w1*f1 + w2*f2 + w3*f3.
CEIQ_WEIGHTS = (0.0, 1.0, 0.35, -0.5)

METRIC_FIELDS = ("psnr", "ssim", "loe", "ceiq", "miou")


def _np(x) -> np.ndarray:
    if hasattr(x, "detach"):
        x = x.detach().cpu().numpy()
    return np.asarray(x, dtype=np.float64)


def _check_pair(a, b):
    if a.shape != b.shape:
        raise ShapeMismatch(f"{a.shape} vs {b.shape}")


def to_gray(img) -> np.ndarray:
    """Luma ``0.299 R + 0.587 G + 0.114 B`` for RGB; single channels pass through."""
    img = _np(img)
    if img.ndim == 2:
        return img
    if img.shape[0] == 3:
        return np.tensordot(LUMA, img, axes=1)
    if img.shape[0] == 1:
        return img[0]
    raise ShapeMismatch(f"expected 1 or 3 channels, got {img.shape[0]}")


def psnr(O, GT) -> float:
    O, GT = _np(O), _np(GT)
    _check_pair(O, GT)
    mse = float(np.mean((O - GT) ** 2))
    if mse == 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * math.log10(1.0 / mse))


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(x ** 2) / (2 * sigma ** 2))
    return g / g.sum()


def _valid_filter(x, g):
    r = len(g) // 2
    y = correlate1d(correlate1d(x, g, axis=0, mode="constant"), g, axis=1, mode="constant")
    return y[r:x.shape[0] - r, r:x.shape[1] - r]


def ssim_map(x, y, window: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    """SSIM at every position where the Gaussian window fits inside the image."""
    if min(x.shape) < window:
        raise ImageTooSmall(f"SSIM needs at least {window}x{window}, got {x.shape}")
    g = gaussian_window(window, sigma)
    mu_x = _valid_filter(x, g)
    mu_y = _valid_filter(y, g)
    sxx = _valid_filter(x * x, g) - mu_x ** 2
    syy = _valid_filter(y * y, g) - mu_y ** 2
    sxy = _valid_filter(x * y, g) - mu_x * mu_y
    num = (2 * mu_x * mu_y + SSIM_C1) * (2 * sxy + SSIM_C2)
    den = (mu_x ** 2 + mu_y ** 2 + SSIM_C1) * (sxx + syy + SSIM_C2)
    return num / den


def ssim(O, GT) -> float:
    """Single-scale SSIM on luma (11x11 Gaussian, sigma 1.5, valid positions)."""
    O, GT = _np(O), _np(GT)
    _check_pair(O, GT)
    return float(ssim_map(to_gray(O), to_gray(GT)).mean())


def _loe_resample(lightness: np.ndarray) -> np.ndarray:
    h, w = lightness.shape
    side = max(h, w)
    if side <= LOE_MAX_SIDE:
        return lightness
    ratio = LOE_MAX_SIDE / side
    h2, w2 = max(1, int(h * ratio)), max(1, int(w * ratio))
    rows = np.minimum((np.arange(h2) / ratio).astype(int), h - 1)
    cols = np.minimum((np.arange(w2) / ratio).astype(int), w - 1)
    return lightness[np.ix_(rows, cols)]


def lightness(img) -> np.ndarray:
    img = _np(img)
    return img.max(axis=0) if img.ndim == 3 else img


def loe_from_lightness(l_low: np.ndarray, l_out: np.ndarray, chunk: int = 1024) -> float:
    a = l_low.ravel()
    b = l_out.ravel()
    m = a.size
    total = 0
    for s in range(0, m, chunk):
        ua = a[s:s + chunk, None] >= a[None, :]
        ub = b[s:s + chunk, None] >= b[None, :]
        total += int(np.count_nonzero(ua ^ ub))
    return total / m


def loe(low, O) -> float:
    """Lightness order error between the input and the enhanced image."""
    low, O = _np(low), _np(O)
    _check_pair(low, O)
    return loe_from_lightness(_loe_resample(lightness(low)), _loe_resample(lightness(O)))


def gray_levels(img) -> np.ndarray:
    return np.clip(np.rint(to_gray(img) * 255.0), 0, 255).astype(np.int64)


def gray_histogram(img) -> np.ndarray:
    return np.bincount(gray_levels(img).ravel(), minlength=256)


def histeq(O):
    """256-bin CDF equalization of the luma channel.

    Each pixel's channels are rescaled by ``T(g) / g``; gray level 0 maps to
    ``T(0)`` on every channel. Constant images are returned unchanged.
    """
    like = O
    img = _np(O)
    levels = gray_levels(img)
    hist = np.bincount(levels.ravel(), minlength=256)
    cdf = np.cumsum(hist)
    n = levels.size
    cdf_min = cdf[hist > 0][0]
    if n == cdf_min:
        out = img.copy()
    else:
        lut = np.rint((cdf - cdf_min) / (n - cdf_min) * 255.0) / 255.0
        target = lut[levels]
        if img.ndim == 2 or img.shape[0] == 1:
            out = target.reshape(img.shape)
        else:
            g = levels / 255.0
            safe = np.where(g > 0, g, 1.0)
            gain = np.where(g > 0, target / safe, 0.0)
            out = np.clip(img * gain[None], 0.0, 1.0)
            zero = g == 0
            out[:, zero] = target[zero]
    if hasattr(like, "detach"):
        import torch

        return torch.as_tensor(out, dtype=like.dtype)
    return out


def entropy_bits(hist) -> float:
    p = np.asarray(hist, dtype=np.float64)
    p = p / p.sum()
    nz = p[p > 0]
    return float(-(nz * np.log2(nz)).sum())


def cross_entropy_normalized(hist_p, hist_q) -> float:
    """``-sum p log2 q`` over 256 bins divided by 8 bits; ``q`` is add-one smoothed."""
    p = np.asarray(hist_p, dtype=np.float64)
    p = p / p.sum()
    q = np.asarray(hist_q, dtype=np.float64) + 1.0
    q = q / q.sum()
    return float(-(p * np.log2(q)).sum() / 8.0)


def ceiq_features(O):
    img = _np(O)
    eq = _np(histeq(img))
    g, ge = to_gray(img), to_gray(eq)
    window = min(SSIM_WINDOW, *g.shape)
    f1 = float(ssim_map(g, ge, window=window).mean())
    h, he = gray_histogram(img), gray_histogram(eq)
    return f1, entropy_bits(h), cross_entropy_normalized(h, he)


def ceiq(O, weights=CEIQ_WEIGHTS) -> float:
    """Contrast quality surrogate over (SSIM to equalized, entropy, cross-entropy)."""
    f1, f2, f3 = ceiq_features(O)
    w0, w1, w2, w3 = weights
    return w0 + w1 * f1 + w2 * f2 + w3 * f3


def miou(pred, gt, num_classes: int):
    """Per-class IoU (NaN for classes absent from both maps) and their mean."""
    pred = np.asarray(pred).astype(np.int64)
    gt = np.asarray(gt).astype(np.int64)
    if pred.shape != gt.shape:
        raise ShapeMismatch(f"{pred.shape} vs {gt.shape}")
    for name, arr in (("pred", pred), ("gt", gt)):
        if arr.size and (arr.min() < 0 or arr.max() >= num_classes):
            raise LabelOutOfRange(f"{name} labels must lie in [0, {num_classes})")
    p = np.bincount(pred.ravel(), minlength=num_classes)
    g = np.bincount(gt.ravel(), minlength=num_classes)
    inter = np.bincount(pred.ravel()[pred.ravel() == gt.ravel()], minlength=num_classes)
    union = p + g - inter
    per_class = np.full(num_classes, np.nan)
    present = union > 0
    per_class[present] = inter[present] / union[present]
    # exact rational mean, rounded once
    ratios = [Fraction(int(i), int(u)) for i, u in zip(inter[present], union[present])]
    return per_class, float(sum(ratios) / len(ratios)) if ratios else float("nan")


@dataclass
class MetricReport:
    per_image: dict = field(default_factory=dict)
    averages: dict = field(default_factory=dict)
    count: int = 0

    @classmethod
    def from_rows(cls, rows: dict):
        averages = {}
        for k in METRIC_FIELDS:
            vals = [r[k] for r in rows.values() if r.get(k) is not None]
            if vals:
                averages[k] = float(np.mean(vals))
        return cls(dict(rows), averages, len(rows))

    def write_csv(self, path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)

        def fmt(v):
            return "" if v is None else repr(float(v))

        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["id", *METRIC_FIELDS])
            for k, row in self.per_image.items():
                w.writerow([k, *(fmt(row.get(f)) for f in METRIC_FIELDS)])
            w.writerow(["AVERAGE", *(fmt(self.averages.get(f)) for f in METRIC_FIELDS)])


def worker_count() -> int:
    try:
        return max(1, int(os.environ.get("SLLEN_THREADS", "1")))
    except ValueError:
        return 1


def _segment(ssn, img):
    import torch
    import torch.nn.functional as F

    h, w = img.shape[-2:]
    ph, pw = (-h) % 8, (-w) % 8
    x = torch.as_tensor(img, dtype=torch.float32)[None]
    if ph or pw:
        x = F.pad(x, (0, pw, 0, ph), mode="reflect")
    S = ssn(x).S[0, :, :h, :w]
    return S.argmax(dim=0).numpy()


def evaluate_dir(pred_dir, ref_dir=None, low_dir=None, mode: str = "paired", labels_dir=None,
                 pred_labels_dir=None, num_classes: int = 21, ssn=None) -> MetricReport:
    """Score every enhanced image in ``pred_dir`` against stem-matched inputs.

    ``paired`` needs ``ref_dir`` (PSNR/SSIM, LOE against ``low_dir`` when given,
    else against the reference, and CEIQ); ``unpaired`` needs ``low_dir`` (LOE
    and CEIQ). ``labels_dir`` adds mIoU from ``pred_labels_dir`` maps or, if
    absent, from the SSN's argmax segmentation of each enhanced image.
    """
    import torch

    from .dataset import list_images, load_label_map, match_stems
    from .imagecore import load_image

    if mode not in ("paired", "unpaired"):
        raise ValueError(f"unknown mode {mode!r}")
    preds = list_images(pred_dir)
    if mode == "paired":
        if ref_dir is None:
            raise ValueError("paired mode needs a reference directory")
        refs = list_images(ref_dir)
        stems, _ = match_stems(preds, refs, "reference")
    else:
        if low_dir is None:
            raise ValueError("unpaired mode needs a low-light directory")
        refs = {}
        stems = sorted(preds)
    lows = list_images(low_dir) if low_dir is not None else {}
    if low_dir is not None:
        stems, _ = match_stems({s: preds[s] for s in stems}, lows, "low-light")
    labels = list_images(labels_dir) if labels_dir is not None else {}
    pred_labels = list_images(pred_labels_dir) if pred_labels_dir is not None else {}
    if not stems:
        raise EmptyDataset(f"no matched images under {pred_dir}")
    if labels and not pred_labels and ssn is None:
        from .ssn import SsnConfig, build_ssn

        ssn = build_ssn(SsnConfig(num_classes=num_classes))

    def score(stem):
        O = load_image(preds[stem], dtype=torch.float64)
        row = dict.fromkeys(METRIC_FIELDS)
        if stem in refs:
            GT = load_image(refs[stem], dtype=O.dtype)
            row["psnr"] = psnr(O, GT)
            if min(O.shape[-2:]) >= SSIM_WINDOW:
                row["ssim"] = ssim(O, GT)
        base = load_image(lows[stem], dtype=O.dtype) if stem in lows else (GT if stem in refs else None)
        if base is not None:
            row["loe"] = loe(base, O)
        row["ceiq"] = ceiq(O)
        if stem in labels:
            gt_map = load_label_map(labels[stem], num_classes)
            if stem in pred_labels:
                p_map = load_label_map(pred_labels[stem], num_classes)
            else:
                p_map = _segment(ssn, O)
            row["miou"] = miou(p_map, gt_map, num_classes)[1]
        return stem, row

    with ThreadPoolExecutor(max_workers=worker_count()) as pool:
        rows = dict(pool.map(score, stems))
    return MetricReport.from_rows({s: rows[s] for s in stems})
