"""Manifest-plus-float32 parameter files used for SSN weights and checkpoints.

Layout (UTF-8 text header, then raw data)::

    SLLEN-BLOB 1
    meta {"json": "object on one line"}
    <name> <dim0> <dim1> ...        one manifest line per block
    end
    <little-endian float32 data of every block, in manifest order>
"""
from __future__ import annotations

import json
import os
import tempfile
from collections import OrderedDict
from pathlib import Path

import numpy as np
import torch

from .errors import WeightLoadError

MAGIC = "SLLEN-BLOB 1"


def save_blob(path, tensors, meta=None) -> None:
    path = Path(path)
    lines = [MAGIC, "meta " + json.dumps(meta or {}, sort_keys=True)]
    chunks = []
    for name, t in tensors.items():
        if any(ch.isspace() for ch in name):
            raise ValueError(f"block name may not contain whitespace: {name!r}")
        arr = t.detach().cpu().to(torch.float32).numpy().astype("<f4")
        lines.append(" ".join([name, *map(str, arr.shape)]))
        chunks.append(arr.tobytes())
    lines.append("end")
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=".tmp-")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(("\n".join(lines) + "\n").encode())
            for c in chunks:
                fh.write(c)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load_blob(path):
    """Return ``(OrderedDict name -> float32 tensor, meta dict)``."""
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as exc:
        raise WeightLoadError(f"{path}: {exc}") from exc
    pos = 0
    header = []
    while True:
        nl = data.find(b"\n", pos)
        if nl < 0:
            raise WeightLoadError(f"{path}: truncated manifest")
        line = data[pos:nl].decode("utf-8", errors="replace")
        pos = nl + 1
        if line == "end":
            break
        header.append(line)
    if not header or header[0] != MAGIC:
        raise WeightLoadError(f"{path}: not a parameter blob")
    if len(header) < 2 or not header[1].startswith("meta "):
        raise WeightLoadError(f"{path}: missing meta line")
    try:
        meta = json.loads(header[1][5:])
    except json.JSONDecodeError as exc:
        raise WeightLoadError(f"{path}: bad meta line: {exc}") from exc
    tensors = OrderedDict()
    for line in header[2:]:
        name, *dims = line.split()
        try:
            shape = tuple(int(d) for d in dims)
        except ValueError as exc:
            raise WeightLoadError(f"{path}: bad manifest line {line!r}") from exc
        n = int(np.prod(shape)) if shape else 1
        end = pos + 4 * n
        if end > len(data):
            raise WeightLoadError(f"{path}: data ends inside block {name}")
        arr = np.frombuffer(data, dtype="<f4", count=n, offset=pos).reshape(shape)
        tensors[name] = torch.from_numpy(arr.copy())
        pos = end
    if pos != len(data):
        raise WeightLoadError(f"{path}: {len(data) - pos} trailing bytes after last block")
    return tensors, meta


def load_into(module: torch.nn.Module, tensors, prefix: str = "", path="<blob>") -> None:
    """Copy blocks named ``prefix + key`` into ``module``; any manifest mismatch is fatal."""
    state = module.state_dict()
    wanted = {prefix + k: v for k, v in state.items()}
    have = {k: v for k, v in tensors.items() if k.startswith(prefix)}
    missing = sorted(set(wanted) - set(have))
    extra = sorted(set(have) - set(wanted))
    if missing or extra:
        raise WeightLoadError(f"{path}: manifest mismatch (missing={missing[:5]}, unexpected={extra[:5]})")
    for k, v in wanted.items():
        if tuple(have[k].shape) != tuple(v.shape):
            raise WeightLoadError(f"{path}: block {k} has shape {tuple(have[k].shape)}, expected {tuple(v.shape)}")
    with torch.no_grad():
        for k, v in state.items():
            v.copy_(have[prefix + k].to(v.dtype))
