import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from patchmvs.cost import COST_MAX, GrayImage, MatchWindow, bilateral_weight, build_cost_matrix, ncc_cost
from patchmvs.geometry import PlaneHypothesis, backproject, random_hypothesis
from patchmvs.io import PlaneSpec, SynthSpec, synth_scene

FLAT = 1e12  # sigmas this large make every bilateral weight 1.0


def plain_ncc_cost(p: np.ndarray, h: np.ndarray) -> float:
    """Unweighted 1 - NCC by explicit double loops."""
    n = p.size
    mp = sum(p.flat) / n
    mh = sum(h.flat) / n
    cov = vpp = vhh = 0.0
    for a, b in zip(p.flat, h.flat):
        cov += (a - mp) * (b - mh)
        vpp += (a - mp) ** 2
        vhh += (b - mh) ** 2
    return 1.0 - cov / math.sqrt(vpp * vhh)


def bilinear(img, u, v):
    h, w = img.shape
    fx, fy = u - 0.5, v - 0.5
    x0, y0 = math.floor(fx), math.floor(fy)
    ax, ay = fx - x0, fy - y0
    c = lambda xx, yy: img[min(max(yy, 0), h - 1), min(max(xx, 0), w - 1)]  # noqa: E731
    top = c(x0, y0) * (1 - ax) + c(x0 + 1, y0) * ax
    bot = c(x0, y0 + 1) * (1 - ax) + c(x0 + 1, y0 + 1) * ax
    return top * (1 - ay) + bot * ay


def oracle_cost(ref, src, px, H, radius, skip, sigma_I, sigma_x):
    x, y = px
    hgt, wid = ref.shape
    offs = [k * skip for k in range(-(radius // skip), radius // skip + 1)]
    ws, ps, hs = [], [], []
    for oy in offs:
        for ox in offs:
            if not (0 <= x + ox < wid and 0 <= y + oy < hgt):
                continue
            q = H @ np.array([x + 0.5 + ox, y + 0.5 + oy, 1.0])
            if q[2] <= 0:
                return COST_MAX
            u, v = q[0] / q[2], q[1] / q[2]
            if not (0 <= u < src.shape[1] and 0 <= v < src.shape[0]):
                return COST_MAX
            p = ref[y + oy, x + ox]
            ws.append(math.exp(-abs(p - ref[y, x]) * 255 / (2 * sigma_I**2) - math.hypot(ox, oy) / (2 * sigma_x**2)))
            ps.append(p)
            hs.append(bilinear(src, u, v))
    w = np.array(ws) / sum(ws)
    p, h = np.array(ps), np.array(hs)
    mp, mh = w @ p, w @ h
    vp, vh = w @ (p - mp) ** 2, w @ (h - mh) ** 2
    if vp < 1e-12 or vh < 1e-12:
        return COST_MAX
    return float(np.clip(1 - (w @ ((p - mp) * (h - mh))) / math.sqrt(vp * vh), 0, 2))


def test_bilateral_weight_examples():
    assert bilateral_weight(0.0, 0.0, 3.0, 30.0) == 1.0
    assert bilateral_weight(18.0, 0.0, 3.0, 30.0) == pytest.approx(math.exp(-1), rel=1e-15)
    assert bilateral_weight(0.0, 1800.0, 3.0, 30.0) == pytest.approx(math.exp(-1), rel=1e-15)


@settings(max_examples=200, deadline=None)
@given(st.floats(0, 255), st.floats(0, 10), st.floats(0.5, 10), st.floats(1, 100))
def test_bilateral_weight_in_unit_interval(dI, dx, sI, sx):
    w = bilateral_weight(dI, dx, sI, sx)
    assert 0 < w <= 1 or (w == 0 and dI / (2 * sI * sI) > 700)


def test_window_offsets():
    np.testing.assert_array_equal(MatchWindow(5, 2).offsets(), [-4, -2, 0, 2, 4])
    np.testing.assert_array_equal(MatchWindow(5, 1).offsets(), np.arange(-5, 6))
    with pytest.raises(ValueError):
        MatchWindow(0, 1)


def test_flat_weights_match_plain_ncc(rng):
    win = MatchWindow(5, 1)
    for _ in range(150):
        ref = rng.random((11, 11))
        src = rng.random((11, 11))
        c = ncc_cost(GrayImage(ref), GrayImage(src), (5, 5), np.eye(3), win, FLAT, FLAT)
        expected = min(max(plain_ncc_cost(ref, src), 0.0), 2.0)
        assert abs(c - expected) < 1e-9


def test_self_match_inverse_and_constant(rng):
    img = rng.random((30, 30))
    g = GrayImage(img)
    assert ncc_cost(g, g, (15, 15), np.eye(3)) == pytest.approx(0.0, abs=1e-9)
    assert ncc_cost(g, GrayImage(1 - img), (15, 15), np.eye(3)) == pytest.approx(2.0, abs=1e-9)
    flat = GrayImage(np.full((30, 30), 0.4))
    assert ncc_cost(flat, g, (15, 15), np.eye(3)) == COST_MAX
    assert ncc_cost(g, flat, (15, 15), np.eye(3)) == COST_MAX


def test_out_of_bounds_is_cost_max(rng):
    g = GrayImage(rng.random((30, 30)))
    H = np.eye(3)
    H[0, 2] = 12.0
    assert ncc_cost(g, g, (15, 15), H) == COST_MAX
    H[0, 2] = 10.0  # rightmost sample lands at u = 29.5, still inside
    assert ncc_cost(g, g, (15, 15), H) < COST_MAX


def test_matches_bilateral_oracle_under_random_warps(rng):
    for _ in range(200):
        ref = rng.random((24, 24))
        src = rng.random((24, 24))
        H = np.eye(3) + rng.normal(scale=0.02, size=(3, 3))
        H[2, 2] = 1.0
        H[:2, 2] += rng.uniform(-3, 3, size=2)
        px = (int(rng.integers(0, 24)), int(rng.integers(0, 24)))
        radius, skip = int(rng.integers(1, 6)), int(rng.integers(1, 3))
        c = ncc_cost(GrayImage(ref), GrayImage(src), px, H, MatchWindow(radius, skip), 3.0, 30.0)
        assert abs(c - oracle_cost(ref, src, px, H, radius, skip, 3.0, 30.0)) < 1e-9


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 2**31), st.integers(0, 19), st.integers(0, 19))
def test_cost_range(seed, x, y):
    rng = np.random.default_rng(seed)
    ref, src = rng.random((20, 20)), rng.random((20, 20))
    H = np.eye(3) + rng.normal(scale=0.05, size=(3, 3))
    c = ncc_cost(GrayImage(ref), GrayImage(src), (x, y), H)
    assert 0.0 <= c <= COST_MAX


def _smooth_texture(rng, n=64):
    f = np.fft.fft2(rng.normal(size=(n, n)))
    k = np.fft.fftfreq(n)
    f *= np.exp(-(k[:, None] ** 2 + k[None, :] ** 2) / (2 * 0.05**2))
    img = np.real(np.fft.ifft2(f))
    return (img - img.min()) / (img.max() - img.min())


def test_skip_one_and_two_agree_on_smooth_texture(rng):
    ref = _smooth_texture(rng)
    src = np.clip(np.roll(ref, 1, axis=1) + rng.normal(scale=0.01, size=ref.shape), 0, 1)
    H = np.eye(3)
    for x, y in [(20, 20), (32, 40), (45, 25)]:
        a = ncc_cost(GrayImage(ref), GrayImage(src), (x, y), H, MatchWindow(5, 1))
        b = ncc_cost(GrayImage(ref), GrayImage(src), (x, y), H, MatchWindow(5, 2))
        assert abs(a - b) < 0.15


def test_gray_image_validation():
    with pytest.raises(ValueError):
        GrayImage(np.array([[0.0, 1.5]]))
    with pytest.raises(ValueError):
        GrayImage(np.array([[np.nan]]))
    with pytest.raises(ValueError):
        GrayImage(np.zeros(4))


@pytest.fixture(scope="module")
def plane_scene():
    spec = SynthSpec(
        planes=[PlaneSpec([0, 0, 5.0], [0.2, 0.1, -1.0], [1, 0, 0], (6, 6), 0.4)],
        positions=np.array([[0, 0, 0], [0.4, 0, 0], [-0.4, 0.1, 0]], float),
        look_at=np.array([0, 0, 5.0]),
        width=64,
        height=48,
        focal=60.0,
        depth_range=(2.0, 9.0),
    )
    return synth_scene(spec)


def test_cost_matrix_true_plane_beats_random(plane_scene, rng):
    scene, gt = plane_scene
    ref = scene.views[0]
    sources = [(GrayImage(v.luma), v.cam) for v in scene.views[1:]]
    px = (32, 24)
    true_h = PlaneHypothesis(gt.depth[0][24, 32], gt.normal[0][24, 32])
    hyps = [true_h] + [random_hypothesis(rng, ref.cam, px) for _ in range(7)]
    M = build_cost_matrix(GrayImage(ref.luma), ref.cam, sources, px, hyps)
    assert M.shape == (8, 2)
    assert np.all((M >= 0) & (M <= COST_MAX))
    assert np.all(M[0] < 0.1)
    assert np.all(M[1:].mean(axis=0) > M[0])
    # the oracle hypothesis really lies on the plane
    X = ref.cam.cam_to_world(backproject(ref.cam, px, true_h.depth))
    pl = SynthSpec  # noqa: F841  (keeps the import used for readers)
    n = np.array([0.2, 0.1, -1.0]) / np.linalg.norm([0.2, 0.1, -1.0])
    assert abs((X - [0, 0, 5.0]) @ n) < 1e-9


def test_cost_matrix_identical_hypotheses_rows_equal(plane_scene, rng):
    scene, _ = plane_scene
    ref = scene.views[0]
    h = random_hypothesis(rng, ref.cam, (10, 10))
    M = build_cost_matrix(GrayImage(ref.luma), ref.cam, [(GrayImage(scene.views[1].luma), scene.views[1].cam)], (10, 10), [h] * 8)
    assert np.all(M == M[0])


def test_cost_matrix_needs_eight_hypotheses(plane_scene):
    scene, _ = plane_scene
    ref = scene.views[0]
    with pytest.raises(ValueError):
        build_cost_matrix(GrayImage(ref.luma), ref.cam, [(GrayImage(ref.luma), ref.cam)], (1, 1), [])
