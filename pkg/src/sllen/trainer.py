"""Optimization loop, checkpoints, ablation runs and inference timing."""
from __future__ import annotations

import csv
import hashlib
import itertools
import json
import logging
import re
import statistics
import time
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Optional

import torch
import torch.nn.functional as F

from .dataset import DEFAULT_BATCH_SIZE, Batch, iterate_batches
from .errors import ConfigError, EmptyDataset, InvalidParam, NoReference
from .losses import CSV_HEADER, FeatureExtractor, LossBreakdown, LossWeights, total_loss
from .metrics import PSNR_CAP, SSIM_WINDOW, ceiq, loe, psnr, ssim
from .net import SLLEN, NetConfig, Variant, count_parameters, load_network, save_network
from .ssn import SsnConfig, build_ssn, ssn_forward

log = logging.getLogger(__name__)

CKPT_RE = re.compile(r"ckpt-(\d+)\.bin$")


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-4
    batch_size: int = DEFAULT_BATCH_SIZE
    steps: int = 1000
    seed: int = 0
    variant: Variant = Variant.FULL
    loss_weights: LossWeights = LossWeights()
    adam_betas: tuple = (0.9, 0.999)
    adam_eps: float = 1e-8
    checkpoint_every: int = 0
    patch: Optional[int] = None
    grad_clip: Optional[float] = None
    base_channels: int = 32
    attention_dk: int = 64
    num_classes: int = 21
    flip: bool = False
    ssn_weights: Optional[str] = None

    def __post_init__(self):
        object.__setattr__(self, "variant", Variant(self.variant))
        object.__setattr__(self, "adam_betas", tuple(self.adam_betas))
        if isinstance(self.loss_weights, dict):
            object.__setattr__(self, "loss_weights", LossWeights.from_dict(self.loss_weights))
        if not self.lr > 0:
            raise ConfigError("lr must be > 0")
        if self.steps < 1:
            raise ConfigError("steps must be >= 1")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.checkpoint_every < 0:
            raise ConfigError("checkpoint_every must be >= 0")

    def net_config(self) -> NetConfig:
        return NetConfig(base_channels=self.base_channels, attention_dk=self.attention_dk,
                         variant=self.variant, seed=self.seed, num_classes=self.num_classes)

    def ssn_config(self) -> SsnConfig:
        return SsnConfig(num_classes=self.num_classes, seed=self.seed, weights_path=self.ssn_weights)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["variant"] = self.variant.value
        d["adam_betas"] = list(self.adam_betas)
        d["loss_weights"] = asdict(self.loss_weights)
        return d

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown training keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class RunLog:
    rows: list = field(default_factory=list)
    step_seconds: list = field(default_factory=list)
    config: dict = field(default_factory=dict)
    checkpoint: Optional[Path] = None

    def column(self, name):
        return [r[name] for r in self.rows]


@dataclass
class TrainingSetup:
    """Everything one optimization run touches."""

    net: SLLEN
    ssn: object
    feat: FeatureExtractor
    optimizer: torch.optim.Optimizer
    cfg: TrainConfig


def make_optimizer(net, cfg: TrainConfig):
    return torch.optim.Adam(net.parameters(), lr=cfg.lr, betas=cfg.adam_betas, eps=cfg.adam_eps)


def setup(cfg: TrainConfig) -> TrainingSetup:
    net = SLLEN(cfg.net_config())
    ssn = build_ssn(cfg.ssn_config())
    feat = FeatureExtractor(seed=cfg.seed + 1)
    return TrainingSetup(net, ssn, feat, make_optimizer(net, cfg), cfg)


def train_step(net, ssn, feat, optimizer, batch: Batch, weights: LossWeights = LossWeights(),
               step: Optional[int] = None, grad_clip: Optional[float] = None) -> LossBreakdown:
    """One forward/backward/ADAM update; returns the losses before the update."""
    if batch.references is None:
        raise NoReference("supervised training needs reference images")
    net.train()
    S, B = ssn_forward(ssn, batch.lows)
    trace = net(batch.lows, S, B)
    losses = total_loss(trace, batch.references, batch.lows, weights, feat)
    losses.check_finite(step)
    optimizer.zero_grad(set_to_none=True)
    losses.total.backward()
    if grad_clip is not None:
        torch.nn.utils.clip_grad_norm_(net.parameters(), grad_clip)
    optimizer.step()
    return LossBreakdown(*(getattr(losses, k).detach() for k in ("l_s", "l_vgg", "l_kd", "l_itv", "l_gra", "total")))


def _adam_tensors(net, optimizer):
    out = {}
    names = {id(p): n for n, p in net.named_parameters()}
    for p in net.parameters():
        st = optimizer.state.get(p)
        if st:
            out[f"adam.{names[id(p)]}.exp_avg"] = st["exp_avg"]
            out[f"adam.{names[id(p)]}.exp_avg_sq"] = st["exp_avg_sq"]
    return out


def save_checkpoint(path, ts: TrainingSetup, step: int) -> Path:
    path = Path(path)
    save_network(path, ts.net, extra=_adam_tensors(ts.net, ts.optimizer),
                 meta={"step": step, "train_config": ts.cfg.to_dict(),
                       "ssn_config": {"num_classes": ts.ssn.cfg.num_classes, "seed": ts.ssn.cfg.seed}})
    return path


def _resumable_keys(d):
    return {k: v for k, v in d.items() if k not in ("steps", "checkpoint_every")}


def load_checkpoint(path, cfg: TrainConfig) -> tuple:
    """Restore network and ADAM state; returns ``(TrainingSetup, step)``."""
    net, tensors, meta = load_network(path, expected=cfg.net_config())
    saved = meta.get("train_config", {})
    if _resumable_keys(saved) != _resumable_keys(cfg.to_dict()):
        raise ConfigError(f"{path}: checkpoint was written with a different training config")
    ts = TrainingSetup(net, build_ssn(cfg.ssn_config()), FeatureExtractor(seed=cfg.seed + 1),
                       make_optimizer(net, cfg), cfg)
    step = int(meta["step"])
    if step > 0:
        for name, p in net.named_parameters():
            m = tensors.get(f"adam.{name}.exp_avg")
            v = tensors.get(f"adam.{name}.exp_avg_sq")
            if m is None or v is None:
                continue
            ts.optimizer.state[p] = {
                "step": torch.tensor(float(step)),
                "exp_avg": m.to(p.dtype).clone(),
                "exp_avg_sq": v.to(p.dtype).clone(),
            }
    return ts, step


def latest_checkpoint(run_dir) -> Optional[Path]:
    best = None
    for p in Path(run_dir).glob("ckpt-*.bin"):
        m = CKPT_RE.search(p.name)
        if m and (best is None or int(m.group(1)) > best[0]):
            best = (int(m.group(1)), p)
    return best[1] if best else None


def _read_log(path, upto):
    rows = []
    if not path.exists():
        return rows
    with open(path, newline="", encoding="utf-8") as fh:
        for r in csv.DictReader(fh):
            if int(r["step"]) <= upto:
                rows.append({k: (int(v) if k == "step" else float(v)) for k, v in r.items()})
    return rows


def _write_log(path, rows):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(CSV_HEADER)
        for r in rows:
            w.writerow([r["step"], *(repr(r[k]) for k in CSV_HEADER[1:])])


def fit(cfg: TrainConfig, pairs, run_dir=None, resume: bool = False) -> RunLog:
    """Train for ``cfg.steps`` steps; rows are numbered 1..steps.

    With ``run_dir`` the run writes ``config.snapshot``, ``log.csv`` and
    ``ckpt-<step>.bin`` files; ``resume=True`` continues from the newest
    checkpoint, replaying the seed-defined batch order.
    """
    if not pairs:
        raise EmptyDataset("no training pairs")
    run_dir = Path(run_dir) if run_dir is not None else None
    start = 0
    rows = []
    ts = None
    if run_dir is not None:
        run_dir.mkdir(parents=True, exist_ok=True)
        ckpt = latest_checkpoint(run_dir) if resume else None
        if ckpt is not None:
            ts, start = load_checkpoint(ckpt, cfg)
            rows = _read_log(run_dir / "log.csv", start)
            log.info("resuming from %s at step %d", ckpt, start)
        snap = run_dir / "config.snapshot"
        if not (resume and snap.exists()):
            snap.write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")
    if ts is None:
        ts = setup(cfg)
    runlog = RunLog(rows=rows, config=cfg.to_dict())
    stream = iterate_batches(pairs, cfg.batch_size, cfg.patch, cfg.seed, flip=cfg.flip)
    stream = itertools.islice(stream, start, None)
    last_ckpt = None
    for step in range(start + 1, cfg.steps + 1):
        batch = next(stream)
        t0 = time.perf_counter()
        losses = train_step(ts.net, ts.ssn, ts.feat, ts.optimizer, batch, cfg.loss_weights,
                            step=step, grad_clip=cfg.grad_clip)
        runlog.step_seconds.append(time.perf_counter() - t0)
        runlog.rows.append({"step": step, **losses.values()})
        if run_dir is not None and cfg.checkpoint_every and step % cfg.checkpoint_every == 0:
            last_ckpt = save_checkpoint(run_dir / f"ckpt-{step}.bin", ts, step)
    if run_dir is not None:
        if last_ckpt is None or not last_ckpt.name.endswith(f"-{cfg.steps}.bin"):
            last_ckpt = save_checkpoint(run_dir / f"ckpt-{cfg.steps}.bin", ts, cfg.steps)
        _write_log(run_dir / "log.csv", runlog.rows)
        runlog.checkpoint = last_ckpt
    runlog.net = ts.net
    runlog.setup = ts
    return runlog


def pad_to_multiple(img, multiple: int = 8):
    """Reflect-pad the last two axes up to a multiple; returns ``(padded, (h, w))``."""
    h, w = img.shape[-2:]
    ph, pw = (-h) % multiple, (-w) % multiple
    if not (ph or pw):
        return img, (h, w)
    x = img[None] if img.dim() == 3 else img
    mode = "reflect" if ph < h and pw < w else "replicate"
    x = F.pad(x, (0, pw, 0, ph), mode=mode)
    return (x[0] if img.dim() == 3 else x), (h, w)


def enhance_image(net: SLLEN, ssn, img: torch.Tensor) -> torch.Tensor:
    """Enhance one ``(3, H, W)`` image of any size (padding is cropped back)."""
    net.eval()
    dtype = next(net.parameters()).dtype
    x, (h, w) = pad_to_multiple(img.to(dtype), max(8, net.cfg.multiple))
    with torch.no_grad():
        S, B = ssn_forward(ssn, x[None])
        O = net(x[None], S, B).O[0]
    return O[..., :h, :w]


def holdout_split(pairs, fraction: float = 0.2):
    """Deterministic split by stem hash: ``(train, heldout)``."""
    def key(p):
        return int(hashlib.md5(p.id.encode()).hexdigest(), 16)

    buckets = int(round(1 / fraction))
    held = [p for p in pairs if key(p) % buckets == 0]
    train = [p for p in pairs if key(p) % buckets != 0]
    if not held and len(pairs) > 1:
        first = min(pairs, key=key)
        held = [first]
        train = [p for p in pairs if p is not first]
    if not train:
        train = list(held)
    return train, held


def evaluate_pairs(net, ssn, pairs) -> dict:
    rows = []
    for p in pairs:
        O = enhance_image(net, ssn, p.low).to(torch.float64)
        row = {"loe": loe(p.low, O), "ceiq": ceiq(O)}
        if p.reference is not None:
            row["psnr"] = psnr(O, p.reference)
            if min(O.shape[-2:]) >= SSIM_WINDOW:
                row["ssim"] = ssim(O, p.reference)
        rows.append(row)
    out = {}
    for k in ("psnr", "ssim", "loe", "ceiq"):
        vals = [r[k] for r in rows if k in r]
        out[k] = statistics.fmean(vals) if vals else None
    return out


ABLATION_COLUMNS = ["name", "params", "psnr", "ssim", "loe", "ceiq", "final_total"]


def run_ablation(cfg_base: TrainConfig, pairs, out_dir=None) -> list:
    """Train FULL, SLLEN-1, SLLEN-2 and SLLEN-3 from one seed and data order."""
    train, held = holdout_split(pairs)
    rows = []
    for v in (Variant.FULL, Variant.NO_HSF, Variant.NO_IEF, Variant.UNET):
        cfg = replace(cfg_base, variant=v)
        runlog = fit(cfg, train)
        metrics = evaluate_pairs(runlog.net, runlog.setup.ssn, held)
        rows.append({"name": v.label, "params": count_parameters(runlog.net), **metrics,
                     "final_total": runlog.rows[-1]["total"]})
    if out_dir is not None:
        write_table(rows, Path(out_dir) / "ablation.csv")
    return rows


LOSS_ABLATIONS = (
    ("all losses", {}),
    ("w/o L_kd", {"lambda_kd": 0.0}),
    ("w/o L_itv", {"lambda_itv": 0.0}),
    ("w/o L_gra", {"lambda_gra": 0.0}),
)


def loss_ablation(cfg_base: TrainConfig, pairs, out_dir=None) -> list:
    train, held = holdout_split(pairs)
    rows = []
    for name, zeroed in LOSS_ABLATIONS:
        cfg = replace(cfg_base, variant=Variant.FULL,
                      loss_weights=replace(cfg_base.loss_weights, **zeroed))
        runlog = fit(cfg, train)
        metrics = evaluate_pairs(runlog.net, runlog.setup.ssn, held)
        rows.append({"name": name, "params": count_parameters(runlog.net), **metrics,
                     "final_total": runlog.rows[-1]["total"]})
    if out_dir is not None:
        write_table(rows, Path(out_dir) / "ablation.csv")
    return rows


def write_table(rows, path, columns=ABLATION_COLUMNS) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(columns)
        for r in rows:
            w.writerow(["" if r.get(c) is None else r[c] for c in columns])


def time_inference(net: SLLEN, sizes, repeats: int = 5, ssn=None) -> list:
    """Median wall-clock seconds per forward pass (SSN included) after one warm-up."""
    if repeats < 3:
        raise InvalidParam("repeats must be >= 3")
    if ssn is None:
        ssn = build_ssn(SsnConfig(num_classes=net.cfg.num_classes, seed=net.cfg.seed))
    net.eval()
    dtype = next(net.parameters()).dtype
    rows = []
    for size in sizes:
        h, w = (size, size) if isinstance(size, int) else size
        x = torch.rand(1, 3, h, w, generator=torch.Generator().manual_seed(0)).to(dtype)
        times = []
        with torch.no_grad():
            for i in range(repeats + 1):
                t0 = time.perf_counter()
                S, B = ssn_forward(ssn, x)
                net(x, S, B)
                if i:
                    times.append(time.perf_counter() - t0)
        rows.append({"height": h, "width": w, "median_s": statistics.median(times), "repeats": repeats})
    return rows
