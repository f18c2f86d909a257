"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Run with ``pytest tests/test_acceptance.py -v`` (the lines are printed even
without ``-s``) or directly with ``python3 tests/test_acceptance.py``.
"""
import csv
import math
import sys
import time
from pathlib import Path

import numpy as np
import pytest
import torch

sys.path.insert(0, str(Path(__file__).parent))

from _oracles import grad_check, loe_brute, miou_brute, ssim_direct  # noqa: E402
from sllen import cli, trainer  # noqa: E402
from sllen.dataset import synthetic_pairs  # noqa: E402
from sllen.imagecore import avg_gradient, load_image, save_image  # noqa: E402
from sllen.losses import (FeatureExtractor, IdentityExtractor, gra_loss, itv_loss, kd_loss,  # noqa: E402
                          perceptual_loss, smooth_loss)
from sllen.metrics import loe, miou, psnr, ssim  # noqa: E402
from sllen.net import FFB, HSBAB, SLLEN, NetConfig, Variant, build_unet, count_parameters, power_transform  # noqa: E402
from sllen.ssn import SsnConfig, build_ssn  # noqa: E402
from sllen.trainer import TrainConfig, fit  # noqa: E402

D64 = torch.float64


class Checks:
    def __init__(self):
        self.failed = []

    def __call__(self, name, ok, detail=""):
        if not ok:
            self.failed.append(f"{name} {detail}".strip())


def _report(capsys, number, title, checks, elapsed, budget):
    ok = not checks.failed and elapsed < budget
    why = "; ".join(checks.failed) if checks.failed else ""
    if elapsed >= budget:
        why = (why + "; " if why else "") + f"runtime {elapsed:.1f}s over {budget}s"
    line = f"[{'PASS' if ok else 'FAIL'}] criterion {number}: {title} ({elapsed:.2f}s)" + (f" :: {why}" if why else "")
    if capsys is None:
        print(line)
    else:
        with capsys.disabled():
            print("\n" + line)
    return ok, line


def _rand(*shape, seed=0):
    return torch.rand(*shape, generator=torch.Generator().manual_seed(seed), dtype=D64)


def criterion_1(capsys=None):
    t0 = time.perf_counter()
    c = Checks()
    O = _rand(2, 3, 8, 8)
    c("l_s(O,O)", smooth_loss(O, O).item() == 0.0)
    c("l_vgg(O,O)", perceptual_loss(O, O, FeatureExtractor(seed=0).double()).item() == 0.0)
    E = [_rand(1, 4, 8, 8), _rand(1, 8, 4, 4, seed=1)]
    c("kd matched", kd_loss(E, [e.clone() for e in reversed(E)]).item() == 0.0)
    c("itv constant", itv_loss(torch.full((2, 3, 5, 5), 0.37, dtype=D64)).item() == 0.0)
    W = 6
    ramp = 0.051 * W / (W - 1) * 2 * torch.arange(W, dtype=D64)
    img = ramp.expand(1, 3, W, W).clone()
    c("fixture avg gradient", torch.allclose(avg_gradient(img), torch.full((1, 3), 0.051, dtype=D64), rtol=0, atol=1e-15))
    c("gra at G", gra_loss(img, 0.051).item() <= 1e-15, f"{gra_loss(img, 0.051).item():.3g}")
    return _report(capsys, 1, "loss fixed points", c, time.perf_counter() - t0, 1.0)


def criterion_2(capsys=None):
    t0 = time.perf_counter()
    c = Checks()
    U = torch.tensor([[[0.0, 1.0], [0.0, 1.0]]], dtype=D64)
    c("itv hand", itv_loss(U).item() == 0.5, str(itv_loss(U).item()))
    W = 6
    ramps = [g * W / (W - 1) * 2 * torch.arange(W, dtype=D64) for g in (0.061, 0.051, 0.041)]
    img = torch.stack([r.expand(W, W) for r in ramps])[None]
    v = gra_loss(img, 0.051).item()
    c("gra hand", abs(v - 0.02 / 3) <= 1e-9, f"{v:.12f}")
    c("avg gradient 2x2", avg_gradient(U).tolist() == [0.25])
    out = power_transform(torch.full((1, 1, 1, 1), 3.0, dtype=D64), torch.tensor([[2.0]], dtype=D64),
                          torch.tensor([[0.5]], dtype=D64)).item()
    # the 1e-6 rectification floor contributes 0.5 * 2 * 3 * 1e-6
    c("RSAEB hand", abs(out - 4.5) <= 1e-5, f"{out:.9f}")
    return _report(capsys, 2, "hand-value checks", c, time.perf_counter() - t0, 1.0)


def criterion_3(capsys=None):
    t0 = time.perf_counter()
    c = Checks()
    g = torch.Generator().manual_seed(0)
    O = (torch.rand(1, 3, 8, 8, generator=g, dtype=D64) * 0.8 + 0.1).requires_grad_()
    GT = torch.rand(1, 3, 8, 8, generator=g, dtype=D64)
    feat = FeatureExtractor(seed=0).double()
    D = [torch.rand(1, 4, 4, 4, generator=g, dtype=D64).requires_grad_()]
    E = [torch.rand(1, 4, 4, 4, generator=g, dtype=D64)]
    terms = {
        "l_s": (lambda: smooth_loss(O, GT), [O]),
        "l_vgg": (lambda: perceptual_loss(O, GT, feat), [O]),
        "l_kd": (lambda: kd_loss(E, D), D),
        "l_itv": (lambda: itv_loss(O), [O]),
        "l_gra": (lambda: gra_loss(O), [O]),
    }
    worst_terms = {}
    for name, (f, leaves) in terms.items():
        worst, n = grad_check(f, leaves, count=24, floor=1e-8)
        worst_terms[name] = worst
        c(name, n >= 20 and worst < 1e-4, f"rel {worst:.2e}")
    L = (torch.rand(2, 4, 3, 3, generator=g, dtype=D64) + 0.2).requires_grad_()
    alpha = (torch.rand(2, 4, generator=g, dtype=D64) + 0.5).requires_grad_()
    beta = (torch.rand(2, 4, generator=g, dtype=D64) + 0.5).requires_grad_()
    worst, n = grad_check(lambda: power_transform(L, alpha, beta), [L, alpha, beta], count=24, floor=1e-8)
    c("RSAEB power", n >= 20 and worst < 1e-3, f"rel {worst:.2e}")
    torch.manual_seed(0)
    net = SLLEN(NetConfig(base_channels=4, seed=1)).double()
    with torch.no_grad():
        for p in net.parameters():
            p.add_(0.05 * torch.randn_like(p))
    x = torch.rand(1, 3, 16, 16, generator=torch.Generator().manual_seed(0)).double()
    S, B = build_ssn(SsnConfig(seed=0)).double()(x)
    worst_e2e, n = grad_check(lambda: net(x, S, B).O, list(net.parameters()), count=24)
    c("end-to-end", n >= 20 and worst_e2e < 1e-3, f"rel {worst_e2e:.2e}")
    return _report(capsys, 3, f"gradient verification (loss max rel {max(worst_terms.values()):.1e}, "
                   f"e2e {worst_e2e:.1e})", c, time.perf_counter() - t0, 60.0)


def criterion_4(capsys=None):
    t0 = time.perf_counter()
    c = Checks()
    ssn = build_ssn(SsnConfig(seed=0))
    x = torch.rand(2, 3, 32, 32, generator=torch.Generator().manual_seed(1))
    S, B = ssn(x)
    for v in Variant:
        net = SLLEN(NetConfig(base_channels=8, variant=v))
        with torch.no_grad():
            if hasattr(net, "hsbab"):
                torch.nn.init.normal_(net.hsbab.v.weight, std=0.1)
            tr = net(x, S, B)
        c(f"O range {v.value}", bool(((tr.O >= 0) & (tr.O <= 1)).all()))
        n = len(tr.E)
        c(f"E/D shapes {v.value}", all(tr.E[i].shape == tr.D[n - 1 - i].shape for i in range(n)))
        if tr.attention is not None:
            err = (tr.attention.sum(-1) - 1).abs().max().item()
            c("attention rows", err <= 1e-6, f"{err:.2e}")
        if tr.W_map is not None:
            lo = torch.minimum(tr.L_H_prime, tr.L_B_prime)
            hi = torch.maximum(tr.L_H_prime, tr.L_B_prime)
            c(f"F convex {v.value}", bool(((tr.F >= lo - 1e-6) & (tr.F <= hi + 1e-6)).all()))
    ffb = FFB(8)
    for m in (ffb.conv_h, ffb.conv_b, ffb.conv_w):
        torch.nn.init.normal_(m.weight, std=0.3)
    F_, W, h, b = ffb(torch.randn(2, 8, 6, 6), torch.randn(2, 8, 6, 6))
    c("F convex random", bool(((F_ >= torch.minimum(h, b) - 1e-6) & (F_ <= torch.maximum(h, b) + 1e-6)).all()))
    blk = HSBAB(8, 16, d_k=4)
    torch.nn.init.normal_(blk.q.weight, std=3.0)
    _, A = blk(torch.randn(3, 8, 5, 7), torch.randn(3, 16, 5, 7))
    c("attention rows random", (A.sum(-1) - 1).abs().max().item() <= 1e-6)
    cfg = NetConfig(base_channels=8, variant="unet", seed=5)
    c("SLLEN-3 == U-Net", torch.equal(SLLEN(cfg).enhance(x), build_unet(cfg)(x)))
    p = {v: count_parameters(SLLEN(NetConfig(base_channels=16, variant=v))) for v in Variant}
    c("param ordering", p[Variant.UNET] < p[Variant.NO_HSF] <= p[Variant.FULL]
      and p[Variant.UNET] < p[Variant.NO_IEF] <= p[Variant.FULL], str({k.value: n for k, n in p.items()}))
    return _report(capsys, 4, "structural invariants", c, time.perf_counter() - t0, 10.0)


def _overfit(seed):
    pairs = synthetic_pairs(4, 32, gamma=2.5, scale=0.6)
    runlog = fit(TrainConfig(steps=500, base_channels=16, seed=seed), pairs)
    net = runlog.net.eval()
    lows = torch.stack([p.low for p in pairs])
    refs = torch.stack([p.reference for p in pairs])
    S, B = runlog.setup.ssn(lows)
    with torch.no_grad():
        O = net(lows, S, B).O
    return runlog, psnr(O, refs)


def criterion_5(capsys=None):
    t0 = time.perf_counter()
    c = Checks()
    run_a, db = _overfit(0)
    run_b, _ = _overfit(0)
    first, last = run_a.rows[0]["l_s"], run_a.rows[-1]["l_s"]
    ratio = last / first
    c("l_s ratio", ratio <= 0.10, f"{ratio:.3f}")
    c("psnr", db >= 25.0, f"{db:.2f} dB")
    drift = max(abs(a[k] - b[k]) for a, b in zip(run_a.rows, run_b.rows) for k in ("l_s", "total"))
    c("rerun", drift <= 1e-6, f"{drift:.2e}")
    return _report(capsys, 5, f"convergence (l_s {ratio:.1%} of initial, PSNR {db:.2f} dB, rerun drift {drift:.1e})",
                   c, time.perf_counter() - t0, 300.0)


def criterion_6(capsys=None):
    t0 = time.perf_counter()
    c = Checks()
    rng = np.random.default_rng(0)
    x = rng.random((3, 8, 8)) * 0.5
    for e, expect in ((0.1, 20.0), (0.5, 10 * math.log10(4)), (0.25, 10 * math.log10(16))):
        c(f"psnr {e}", abs(psnr(x + e, x) - expect) <= 1e-9)
    c("psnr cap", psnr(x, x) == 100.0)
    worst = 0.0
    for s in range(5):
        a = np.random.default_rng(s).random((3, 16, 18))
        b = 0.6 * a + 0.4 * np.random.default_rng(100 + s).random((3, 16, 18))
        worst = max(worst, abs(ssim(a, b) - ssim_direct(a, b)))
    c("ssim oracle", worst <= 1e-6, f"{worst:.2e}")
    for s in range(50):
        r = np.random.default_rng(s)
        h, w = r.integers(1, 4), r.integers(1, 5)
        low, out = r.integers(0, 4, (3, h, w)) / 3.0, r.integers(0, 4, (3, h, w)) / 3.0
        if loe(low, out) != loe_brute(low, out):
            c("loe brute", False, f"seed {s}")
            break
    pred, gt = np.array([[0, 0], [1, 1]]), np.array([[0, 1], [1, 1]])
    mean = miou(pred, gt, 2)[1]
    c("miou 7/12", mean == 7 / 12 == miou_brute(pred, gt)[1], repr(mean))
    for s in range(20):
        r = np.random.default_rng(s)
        low, out = r.random((3, 3, 4)), r.random((3, 3, 4))
        if loe(low, out) != loe(low, np.exp(3 * out) - 0.5):
            c("loe remap", False, f"seed {s}")
            break
    return _report(capsys, 6, "metric oracles", c, time.perf_counter() - t0, 30.0)


def criterion_7(capsys=None, tmp=None):
    import tempfile

    t0 = time.perf_counter()
    c = Checks()
    pairs = synthetic_pairs(4, 16)
    cfg = dict(base_channels=8, batch_size=3, seed=11)
    a = fit(TrainConfig(steps=20, **cfg), pairs)
    b = fit(TrainConfig(steps=20, **cfg), pairs)
    drift = max(abs(x[k] - y[k]) for x, y in zip(a.rows, b.rows) for k in ("l_s", "l_vgg", "l_kd", "l_itv", "l_gra", "total"))
    c("identical runs", drift <= 1e-6, f"{drift:.2e}")
    ssn0 = build_ssn(SsnConfig(seed=11))
    feat0 = FeatureExtractor(seed=12)
    c("SSN frozen", all(torch.equal(p, q) for p, q in zip(a.setup.ssn.parameters(), ssn0.parameters())))
    c("extractor frozen", all(torch.equal(p, q) for p, q in zip(a.setup.feat.parameters(), feat0.parameters())))
    with tempfile.TemporaryDirectory() as d:
        fit(TrainConfig(steps=10, checkpoint_every=5, **cfg), pairs, Path(d))
        r = fit(TrainConfig(steps=20, checkpoint_every=5, **cfg), pairs, Path(d), resume=True)
    rdrift = max(abs(x["total"] - y["total"]) for x, y in zip(a.rows, r.rows))
    pdrift = max((p - q).abs().max().item() for p, q in zip(a.net.parameters(), r.net.parameters()))
    c("resume curve", rdrift <= 1e-6, f"{rdrift:.2e}")
    c("resume params", pdrift <= 1e-6, f"{pdrift:.2e}")
    return _report(capsys, 7, f"determinism and freezing (resume drift {max(rdrift, pdrift):.1e})", c,
                   time.perf_counter() - t0, 120.0)


def criterion_8(capsys=None):
    import tempfile
    import warnings

    t0 = time.perf_counter()
    c = Checks()
    with tempfile.TemporaryDirectory() as d:
        d = Path(d)
        (d / "data" / "low").mkdir(parents=True)
        (d / "data" / "ref").mkdir()
        for p in synthetic_pairs(2, 16):
            save_image(p.low, d / "data" / "low" / f"{p.id}.png")
            save_image(p.reference, d / "data" / "ref" / f"{p.id}.png")
        base = ["--out", str(d / "run"), "train", "--data", str(d / "data"), "--base-channels", "4"]
        c("exit 0", cli.main(base + ["--steps", "2"]) == 0)
        c("exit 1 missing data", cli.main(["train", "--data", str(d / "nope")]) == 1)
        c("exit 1 bad flag", cli.main(["train", "--bogus"]) == 1)
        (d / "empty").mkdir()
        c("exit 2", cli.main(["--out", str(d / "ev"), "evaluate", "--pred", str(d / "empty"), "--ref", str(d / "empty")]) == 2)
        real = trainer.total_loss

        def poisoned(*a, **k):
            out = real(*a, **k)
            out.l_gra = out.l_gra * float("inf")
            return out

        trainer.total_loss = poisoned
        try:
            c("exit 3", cli.main(["--out", str(d / "nan")] + base[2:] + ["--steps", "2"]) == 3)
        finally:
            trainer.total_loss = real
        (d / "sizes").mkdir()
        for s in range(65, 73):
            save_image(torch.rand(3, s, s), d / "sizes" / f"s{s}.png")
        ck = d / "run" / "default" / "ckpt-2.bin"
        c("enhance", cli.main(["--out", str(d / "enh"), "enhance", "--checkpoint", str(ck), "--input", str(d / "sizes")]) == 0)
        for s in range(65, 73):
            f = d / "enh" / f"s{s}.png"
            if not f.exists() or load_image(f).shape != (3, s, s):
                c("enhance dims", False, f"size {s}")
        ref = str(d / "data" / "ref")
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            c("evaluate exit", cli.main(["--out", str(d / "ev"), "evaluate", "--pred", ref, "--ref", ref]) == 0)
        avg = list(csv.DictReader(open(d / "ev" / "metrics.csv", encoding="utf-8")))[-1]
        c("evaluate identical", float(avg["psnr"]) == 100.0 and float(avg["ssim"]) == 1.0 and float(avg["loe"]) == 0.0,
          str(avg))
    return _report(capsys, 8, "CLI contract", c, time.perf_counter() - t0, 60.0)


CRITERIA = [criterion_1, criterion_2, criterion_3, criterion_4, criterion_5, criterion_6, criterion_7, criterion_8]


@pytest.mark.parametrize("n", range(1, 9))
def test_criterion(n, capsys):
    ok, line = CRITERIA[n - 1](capsys)
    assert ok, line


if __name__ == "__main__":
    results = [f() for f in CRITERIA]
    sys.exit(0 if all(ok for ok, _ in results) else 1)
