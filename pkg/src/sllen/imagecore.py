"""Image tensors, disk I/O, gradient operators and the Retinex illumination map.

Images are plain ``torch.Tensor`` objects laid out channel-first, ``(C, H, W)``
with ``C`` equal to 3 (RGB) or 1 (GRAY) and values nominally in ``[0, 1]``.
Every operator here also accepts a leading batch axis, ``(N, C, H, W)``.
"""
from __future__ import annotations

import os
import struct
import tempfile
from pathlib import Path
from typing import NamedTuple

import numpy as np
import torch
from PIL import Image, UnidentifiedImageError

from .errors import CorruptImage, DegenerateShape, ShapeMismatch, UnsupportedFormat

RGB = "RGB"
GRAY = "GRAY"

RETINEX_EPS = 1e-4
UMAP_MAGIC = b"UMAP"
_UMAP_HEADER = struct.Struct("<4sHHHH")

_SUPPORTED = {"PNG", "JPEG"}


class GradientField(NamedTuple):
    gx: torch.Tensor
    gy: torch.Tensor


def color_space(img: torch.Tensor) -> str:
    """Return the color tag implied by the channel axis."""
    c = img.shape[-3]
    if c == 3:
        return RGB
    if c == 1:
        return GRAY
    raise ShapeMismatch(f"expected 1 or 3 channels, got {c}")


def load_image(path, dtype=torch.float32) -> torch.Tensor:
    """Read an 8/16-bit PNG or a JPEG into a ``(C, H, W)`` tensor in [0, 1]."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(path)
    try:
        with Image.open(path) as im:
            if im.format not in _SUPPORTED:
                raise UnsupportedFormat(f"{path}: {im.format} is not PNG/JPEG")
            im.load()
            mode = im.mode
            if mode in ("I;16", "I;16B", "I;16L", "I"):
                arr = np.asarray(im, dtype=np.float64) / 65535.0
                arr = arr[None]
            elif mode in ("L", "1"):
                arr = np.asarray(im.convert("L"), dtype=np.float64)[None] / 255.0
            else:
                arr = np.asarray(im.convert("RGB"), dtype=np.float64).transpose(2, 0, 1) / 255.0
    except (UnidentifiedImageError, OSError, SyntaxError) as exc:
        if isinstance(exc, FileNotFoundError):
            raise
        raise CorruptImage(f"{path}: {exc}") from exc
    out = torch.from_numpy(np.ascontiguousarray(arr)).to(dtype)
    if not torch.isfinite(out).all():
        raise CorruptImage(f"{path}: non-finite pixel values")
    return out


def to_uint8(img: torch.Tensor) -> np.ndarray:
    """Clamp to [0, 1] and quantize to an HWC (or HW) uint8 array."""
    arr = img.detach().to(torch.float64).clamp(0.0, 1.0).cpu().numpy()
    arr = np.rint(arr * 255.0).astype(np.uint8)
    if arr.shape[0] == 1:
        return arr[0]
    return arr.transpose(1, 2, 0)


def _atomic_write(path: Path, write) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=".tmp-", suffix=path.suffix)
    os.close(fd)
    try:
        write(tmp)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_image(img: torch.Tensor, path) -> None:
    """Write ``img`` as an 8-bit image; the format follows the file suffix."""
    if not torch.isfinite(img).all():
        raise ValueError("cannot save an image with non-finite values")
    if img.dim() != 3:
        raise ShapeMismatch(f"expected (C, H, W), got {tuple(img.shape)}")
    arr = to_uint8(img)
    path = Path(path)
    fmt = "JPEG" if path.suffix.lower() in (".jpg", ".jpeg") else "PNG"
    _atomic_write(path, lambda tmp: Image.fromarray(arr).save(tmp, format=fmt))


def spatial_gradients(img: torch.Tensor) -> GradientField:
    """Forward differences along width (gx) and height (gy).

    The last column of gx and the last row of gy are zero (replicate padding).
    """
    h, w = img.shape[-2:]
    if h < 2 or w < 2:
        raise DegenerateShape(f"need H, W >= 2, got {h}x{w}")
    gx = torch.zeros_like(img)
    gy = torch.zeros_like(img)
    gx[..., :, :-1] = img[..., :, 1:] - img[..., :, :-1]
    gy[..., :-1, :] = img[..., 1:, :] - img[..., :-1, :]
    return GradientField(gx, gy)


def avg_gradient(img: torch.Tensor) -> torch.Tensor:
    """Per-channel mean of ``(|gx| + |gy|) / 2``; shape ``(C,)`` or ``(N, C)``."""
    gx, gy = spatial_gradients(img)
    return ((gx.abs() + gy.abs()) * 0.5).mean(dim=(-2, -1))


def retinex_decompose(low: torch.Tensor, enhanced: torch.Tensor, eps: float = RETINEX_EPS) -> torch.Tensor:
    """Illumination map ``U = low / (enhanced + eps)``."""
    if low.shape != enhanced.shape:
        raise ShapeMismatch(f"low {tuple(low.shape)} vs enhanced {tuple(enhanced.shape)}")
    if eps < 0:
        raise ValueError("eps must be non-negative")
    return low / (enhanced + eps)


DISPLAY_STEP = 1.0 / 255.0


def normalize_for_display(u: torch.Tensor, min_range: float = DISPLAY_STEP) -> torch.Tensor:
    """Collapse channels and min-max normalize to a ``(1, H, W)`` map.

    A map whose range is below ``min_range`` (one 8-bit step by default) has no
    meaningful normalization and renders as 0.5.
    """
    g = u.detach().to(torch.float64)
    if g.dim() == 3:
        g = g.mean(dim=0, keepdim=True)
    lo, hi = g.min(), g.max()
    if not torch.isfinite(hi - lo) or float(hi - lo) <= min_range:
        return torch.full_like(g, 0.5)
    return (g - lo) / (hi - lo)


def write_umap(u: torch.Tensor, path) -> None:
    """Dump raw illumination values: 12-byte header then little-endian float32."""
    if u.dim() == 2:
        u = u[None]
    c, h, w = u.shape
    if max(c, h, w) > 0xFFFF:
        raise ShapeMismatch("UMAP dimensions must fit in 16 bits")
    payload = u.detach().to(torch.float32).cpu().numpy().astype("<f4").tobytes()
    header = _UMAP_HEADER.pack(UMAP_MAGIC, c, h, w, 0)

    def write(tmp):
        with open(tmp, "wb") as fh:
            fh.write(header)
            fh.write(payload)

    _atomic_write(Path(path), write)


def read_umap(path) -> torch.Tensor:
    data = Path(path).read_bytes()
    if len(data) < _UMAP_HEADER.size:
        raise CorruptImage(f"{path}: truncated UMAP header")
    magic, c, h, w, _ = _UMAP_HEADER.unpack_from(data)
    if magic != UMAP_MAGIC:
        raise CorruptImage(f"{path}: bad magic {magic!r}")
    body = data[_UMAP_HEADER.size:]
    if len(body) != 4 * c * h * w:
        raise CorruptImage(f"{path}: expected {c * h * w} floats, found {len(body) // 4}")
    arr = np.frombuffer(body, dtype="<f4").reshape(c, h, w)
    return torch.from_numpy(arr.copy())
