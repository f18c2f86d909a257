import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from PIL import Image

from _oracles import forward_gradients
from sllen.errors import CorruptImage, DegenerateShape, ShapeMismatch, UnsupportedFormat
from sllen.imagecore import (GRAY, RGB, avg_gradient, color_space, load_image, normalize_for_display,
                             read_umap, retinex_decompose, save_image, spatial_gradients, write_umap)


def test_load_black_png(tmp_path):
    p = tmp_path / "k.png"
    Image.fromarray(np.zeros((4, 4, 3), np.uint8)).save(p)
    img = load_image(p)
    assert img.shape == (3, 4, 4)
    assert torch.count_nonzero(img) == 0


def test_load_scaling_endpoints(tmp_path):
    arr = np.zeros((2, 2, 3), np.uint8)
    arr[0, 0] = 255
    arr[1, 1] = 128
    p = tmp_path / "v.png"
    Image.fromarray(arr).save(p)
    img = load_image(p, dtype=torch.float64)
    assert img[0, 0, 0].item() == 1.0
    assert img[0, 1, 1].item() == pytest.approx(128 / 255, abs=1e-15)


def test_load_gray_and_16bit(tmp_path):
    p = tmp_path / "g.png"
    Image.fromarray(np.full((3, 5), 51, np.uint8)).save(p)
    g = load_image(p, dtype=torch.float64)
    assert g.shape == (1, 3, 5) and color_space(g) == GRAY
    assert g[0, 0, 0].item() == pytest.approx(0.2)
    p16 = tmp_path / "w.png"
    Image.fromarray(np.full((2, 2), 65535, np.uint16)).save(p16)
    assert load_image(p16, dtype=torch.float64).max().item() == 1.0


def test_load_errors(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_image(tmp_path / "missing.png")
    bmp = tmp_path / "x.bmp"
    Image.fromarray(np.zeros((2, 2, 3), np.uint8)).save(bmp)
    with pytest.raises(UnsupportedFormat):
        load_image(bmp)
    bad = tmp_path / "bad.png"
    bad.write_bytes(b"\x89PNG\r\n\x1a\n garbage")
    with pytest.raises(CorruptImage):
        load_image(bad)


def test_save_clamps_and_roundtrips(tmp_path):
    p = tmp_path / "z.png"
    save_image(torch.zeros(3, 4, 4), p)
    assert torch.count_nonzero(load_image(p)) == 0
    save_image(torch.full((3, 2, 2), 1.2), p)
    assert torch.all(load_image(p) == 1.0)
    x = torch.rand(3, 16, 16, generator=torch.Generator().manual_seed(3), dtype=torch.float64) * 1.4 - 0.2
    save_image(x, p)
    err = (load_image(p, dtype=torch.float64) - x.clamp(0, 1)).abs().max().item()
    assert err <= 1 / 510 + 1e-12
    assert not list(tmp_path.glob(".tmp-*"))


def test_color_space():
    assert color_space(torch.zeros(3, 2, 2)) == RGB
    with pytest.raises(ShapeMismatch):
        color_space(torch.zeros(2, 2, 2))


def test_gradients_hand_values():
    x = torch.tensor([[[0.0, 1.0], [0.0, 1.0]]], dtype=torch.float64)
    gx, gy = spatial_gradients(x)
    assert gx.tolist() == [[[1.0, 0.0], [1.0, 0.0]]]
    assert gy.tolist() == [[[0.0, 0.0], [0.0, 0.0]]]
    assert avg_gradient(x).tolist() == [0.25]


def test_ramp_and_constant():
    W = 7
    ramp = (torch.arange(W, dtype=torch.float64) / (W - 1)).expand(3, 5, W).clone()
    gx, gy = spatial_gradients(ramp)
    assert torch.allclose(gx[..., :-1], torch.full_like(gx[..., :-1], 1 / (W - 1)), rtol=0, atol=1e-15)
    assert torch.all(gx[..., -1] == 0) and torch.all(gy == 0)
    c = torch.full((3, 4, 4), 0.3)
    assert avg_gradient(c).tolist() == [0.0, 0.0, 0.0]


def test_degenerate_shape():
    with pytest.raises(DegenerateShape):
        spatial_gradients(torch.zeros(3, 1, 5))


def test_gradients_match_loop_oracle():
    x = torch.rand(3, 6, 9, generator=torch.Generator().manual_seed(0), dtype=torch.float64)
    gx, gy = spatial_gradients(x)
    ox, oy = forward_gradients(x.numpy())
    assert np.array_equal(gx.numpy(), ox) and np.array_equal(gy.numpy(), oy)


def test_batched_avg_gradient_shape():
    assert avg_gradient(torch.rand(2, 3, 8, 8)).shape == (2, 3)


arrays = st.integers(0, 2 ** 31 - 1).map(
    lambda s: torch.rand(2, 3, 5, 6, generator=torch.Generator().manual_seed(s), dtype=torch.float64)
)


@settings(max_examples=30, deadline=None)
@given(arrays, st.floats(-3, 3), st.floats(-3, 3))
def test_gradient_linearity(xy, a, b):
    X, Y = xy[0], xy[1]
    lhs = spatial_gradients(a * X + b * Y)
    gX, gY = spatial_gradients(X), spatial_gradients(Y)
    for k in range(2):
        assert torch.allclose(lhs[k], a * gX[k] + b * gY[k], rtol=0, atol=1e-12)


@settings(max_examples=30, deadline=None)
@given(arrays, st.floats(-2, 2))
def test_avg_gradient_translation_invariant(xy, c):
    X = xy[0]
    assert torch.allclose(avg_gradient(X + c), avg_gradient(X), rtol=0, atol=1e-12)


def test_retinex_examples():
    low = torch.full((3, 2, 2), 0.2, dtype=torch.float64)
    assert torch.all(retinex_decompose(low, 2 * low, eps=0.0) == 0.5)
    U = retinex_decompose(torch.full((1, 1, 1), 0.1, dtype=torch.float64), torch.zeros(1, 1, 1, dtype=torch.float64))
    assert U.item() == pytest.approx(1000.0, rel=1e-12)
    x = torch.rand(3, 4, 4, dtype=torch.float64) * 0.9 + 0.1
    assert (retinex_decompose(x, x) - 1).abs().max().item() <= 1e-4 / 0.1
    with pytest.raises(ShapeMismatch):
        retinex_decompose(torch.zeros(3, 2, 2), torch.zeros(3, 2, 3))


@settings(max_examples=30, deadline=None)
@given(arrays)
def test_retinex_positive(xy):
    low = xy[0] + 1e-3
    U = retinex_decompose(low, xy[1])
    assert torch.all(U > 0) and torch.isfinite(U).all()


def test_normalize_for_display():
    assert torch.all(normalize_for_display(torch.ones(3, 4, 4)) == 0.5)
    u = torch.tensor([[[0.0, 2.0], [1.0, 2.0]]])
    n = normalize_for_display(u)
    assert n.min() == 0 and n.max() == 1 and n[0, 1, 0] == 0.5


def test_umap_roundtrip(tmp_path):
    u = torch.rand(3, 5, 7)
    write_umap(u, tmp_path / "a.umap")
    assert torch.equal(read_umap(tmp_path / "a.umap"), u)
    raw = (tmp_path / "a.umap").read_bytes()
    assert raw[:4] == b"UMAP" and len(raw) == 12 + 4 * u.numel()
