import numpy as np
import pytest
from conftest import smooth_texture
from hypothesis import given, settings
from hypothesis import strategies as st

from spermnet.flow import (
    FarnebackParams,
    FlowError,
    FlowField,
    estimate_flow,
    flow_hue_value,
    flow_to_rgb,
    polynomial_expansion,
    read_flo,
    write_flo,
)
from spermnet.media import GrayFrame

MARGIN = 16


def shifted_pair(size, dx, dy, seed=0):
    t = smooth_texture(size, seed)
    return GrayFrame.from_array(t), GrayFrame.from_array(np.roll(t, (dy, dx), axis=(0, 1)))


def block_matching(prev, nxt, block=16, search=6):
    """Exhaustive integer SSD block matching; returns per-block (dx, dy)."""
    h, w = prev.shape
    found = []
    for y in range(search, h - block - search + 1, block):
        for x in range(search, w - block - search + 1, block):
            ref = prev[y : y + block, x : x + block]
            best = None
            for dy in range(-search, search + 1):
                for dx in range(-search, search + 1):
                    cand = nxt[y + dy : y + dy + block, x + dx : x + dx + block]
                    ssd = ((cand - ref) ** 2).sum()
                    if best is None or ssd < best[0]:
                        best = (ssd, dx, dy)
            found.append(best[1:])
    return np.array(found)


def interior(a):
    return a[MARGIN:-MARGIN, MARGIN:-MARGIN]


def test_params_defaults_and_validation():
    p = FarnebackParams()
    assert (p.pyr_scale, p.levels, p.winsize, p.iterations, p.poly_n, p.poly_sigma) == (0.5, 3, 15, 3, 5, 1.2)
    for bad in [dict(pyr_scale=1.0), dict(levels=0), dict(winsize=4), dict(poly_n=6), dict(poly_sigma=0)]:
        with pytest.raises(FlowError):
            FarnebackParams(**bad)


def test_expansion_constant():
    e = polynomial_expansion(GrayFrame.from_array(np.full((20, 20), 0.4)))
    np.testing.assert_allclose(e.c, 0.4, atol=1e-12)
    for plane in (e.b1, e.b2, e.a11, e.a12, e.a22):
        np.testing.assert_allclose(plane, 0.0, atol=1e-12)


def test_expansion_linear_ramp():
    ys, xs = np.mgrid[0:24, 0:24].astype(float)
    e = polynomial_expansion(GrayFrame.from_array(0.01 * xs))
    sl = np.s_[3:-3, 3:-3]
    np.testing.assert_allclose(e.b1[sl], 0.01, atol=1e-12)
    np.testing.assert_allclose(e.b2[sl], 0.0, atol=1e-12)
    for plane in (e.a11, e.a12, e.a22):
        np.testing.assert_allclose(plane[sl], 0.0, atol=1e-12)


@pytest.mark.parametrize("poly_n", [5, 7])
def test_expansion_pure_quadratic(poly_n):
    ys, xs = np.mgrid[0:30, 0:30].astype(float)
    alpha = 0.003
    e = polynomial_expansion(GrayFrame.from_array(alpha * xs**2), FarnebackParams(poly_n=poly_n))
    sl = np.s_[poly_n:-poly_n, poly_n:-poly_n]
    np.testing.assert_allclose(e.a11[sl], alpha, atol=1e-10)


def test_expansion_rejects_small_frame():
    with pytest.raises(FlowError):
        polynomial_expansion(GrayFrame.from_array(np.zeros((4, 20))))


@settings(max_examples=25, deadline=None)
@given(st.lists(st.floats(-0.01, 0.01), min_size=6, max_size=6), st.integers(0, 15), st.integers(0, 15))
def test_expansion_exact_on_quadratics(coef, px, py):
    # f(p) with p = (x, y) around a chosen centre; coefficients of the local model are analytic
    c0, bx, by, qxx, qxy, qyy = coef
    ys, xs = np.mgrid[0:32, 0:32].astype(float)
    f = c0 + bx * xs + by * ys + qxx * xs**2 + 2 * qxy * xs * ys + qyy * ys**2
    e = polynomial_expansion(GrayFrame.from_array(f))
    x0, y0 = 8 + px, 8 + py
    assert abs(e.a11[y0, x0] - qxx) <= 1e-5
    assert abs(e.a12[y0, x0] - qxy) <= 1e-5
    assert abs(e.a22[y0, x0] - qyy) <= 1e-5
    assert abs(e.b1[y0, x0] - (bx + 2 * qxx * x0 + 2 * qxy * y0)) <= 1e-5
    assert abs(e.b2[y0, x0] - (by + 2 * qyy * y0 + 2 * qxy * x0)) <= 1e-5
    assert abs(e.c[y0, x0] - f[y0, x0]) <= 1e-5


def test_zero_flow_on_identical_frames():
    g = GrayFrame.from_array(smooth_texture(64, 3))
    f = estimate_flow(g, g)
    assert max(np.abs(f.u).max(), np.abs(f.v).max()) <= 1e-3


def test_recovers_translation_3_1():
    a, b = shifted_pair(128, 3, 1)
    f = estimate_flow(a, b)
    err = np.hypot(interior(f.u) - 3, interior(f.v) - 1)
    assert (err <= 0.5).mean() >= 0.8
    oracle = block_matching(a.data, b.data)
    med = np.median(oracle, axis=0)
    assert tuple(med) == (3, 1)
    assert abs(np.median(interior(f.u)) - med[0]) <= 0.5
    assert abs(np.median(interior(f.v)) - med[1]) <= 0.5


def test_recovers_translation_minus_2_0():
    a, b = shifted_pair(128, -2, 0, seed=5)
    f = estimate_flow(a, b)
    assert -2.5 <= np.median(interior(f.u)) <= -1.5
    assert -0.5 <= np.median(interior(f.v)) <= 0.5


@pytest.mark.parametrize("dx,dy", [(1, 0), (0, -3), (4, 2), (-4, -4), (2, -1)])
def test_antisymmetry(dx, dy):
    a, b = shifted_pair(96, dx, dy, seed=abs(dx * 10 + dy))
    fwd = estimate_flow(a, b)
    bwd = estimate_flow(b, a)
    assert abs(np.median(interior(fwd.u)) + np.median(interior(bwd.u))) <= 0.5
    assert abs(np.median(interior(fwd.v)) + np.median(interior(bwd.v))) <= 0.5


def test_initial_flow_seed_is_used():
    a, b = shifted_pair(64, 3, 0, seed=2)
    p = FarnebackParams(levels=1, iterations=1)
    seeded = estimate_flow(a, b, p, FlowField(np.full((64, 64), 3.0), np.zeros((64, 64))))
    assert abs(np.median(interior(seeded.u)) - 3) < 0.05


def test_estimate_flow_errors():
    a = GrayFrame.from_array(np.zeros((32, 32)))
    with pytest.raises(FlowError):
        estimate_flow(a, GrayFrame.from_array(np.zeros((32, 30))))
    bad = np.zeros((32, 32))
    bad[3, 3] = np.nan
    with pytest.raises(FlowError):
        estimate_flow(a, GrayFrame.from_array(bad))


def test_flow_to_rgb_zero_is_black():
    img = flow_to_rgb(FlowField.zeros(8, 5))
    assert img.data.shape == (5, 8, 3) and not img.data.any()


def test_flow_to_rgb_uniform_direction():
    img = flow_to_rgb(FlowField(np.ones((4, 4)), np.zeros((4, 4))))
    assert (img.data == img.data[0, 0]).all()
    np.testing.assert_array_equal(img.data[0, 0], [255, 0, 0])


def test_flow_to_rgb_two_pixels():
    field = FlowField(np.array([[1.0, 0.0]]), np.array([[0.0, 1.0]]))
    hue, value = flow_hue_value(field)
    np.testing.assert_allclose(hue[0], [0.0, 90.0])
    np.testing.assert_allclose(value[0], [1.0, 1.0])
    img = flow_to_rgb(field).data[0]
    # hue 90 at full saturation/value: R = 255 * (1 - |1.5 mod 2 - 1|) = 127.5
    np.testing.assert_array_equal(img[0], [255, 0, 0])
    np.testing.assert_array_equal(img[1], [128, 255, 0])
    assert img.max(axis=-1).tolist() == [255, 255]


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1), st.floats(0.01, 100.0))
def test_flow_to_rgb_scale_invariant(seed, scale):
    r = np.random.default_rng(seed)
    u, v = r.normal(size=(6, 7)), r.normal(size=(6, 7))
    a = flow_to_rgb(FlowField(u, v)).data.astype(int)
    b = flow_to_rgb(FlowField(u * scale, v * scale)).data.astype(int)
    # rounding to 8 bits may flip by one level
    assert np.abs(a - b).max() <= 1


def test_flo_round_trip(tmp_path, rng):
    f = FlowField(rng.normal(size=(5, 7)).astype(np.float32).astype(float),
                  rng.normal(size=(5, 7)).astype(np.float32).astype(float))
    write_flo(f, tmp_path / "x.flo")
    raw = (tmp_path / "x.flo").read_bytes()
    assert raw[:4] == b"PIEH" and int.from_bytes(raw[4:8], "little") == 7 and int.from_bytes(raw[8:12], "little") == 5
    g = read_flo(tmp_path / "x.flo")
    np.testing.assert_array_equal(g.u, f.u)
    np.testing.assert_array_equal(g.v, f.v)
    (tmp_path / "bad.flo").write_bytes(b"XXXX" + raw[4:])
    with pytest.raises(FlowError):
        read_flo(tmp_path / "bad.flo")
