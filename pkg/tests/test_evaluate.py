import csv
import io

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from patchmvs.evaluate import (
    CURVE_HEADER,
    EmptyCloud,
    ErrorStats,
    convergence_curve,
    curve_csv,
    depth_error_stats,
    format_table,
    plane_distances,
    point_cloud_error,
    scene_diagonal,
)
from patchmvs.io import DimensionMismatch, PlaneSpec, synth_scene
from patchmvs.solver import SolverConfig

from test_solver import small_spec

PLANES = [
    PlaneSpec([0, 0, 5.0], [0, 0, -1.0], [1, 0, 0], (2, 1), 0.5),
    PlaneSpec([3, 0, 6.0], [1, 0, -1.0], [0, 1, 0], (1, 1), 0.5),
]


def on_plane(rng, pl, n):
    a = rng.uniform(-pl.half_size[0], pl.half_size[0], n)
    b = rng.uniform(-pl.half_size[1], pl.half_size[1], n)
    return pl.center + a[:, None] * pl.u_axis + b[:, None] * pl.v_axis


def test_depth_stats_examples(rng):
    gt = rng.uniform(1, 5, size=(20, 30))
    ones = np.ones(gt.shape, bool)
    s = depth_error_stats(gt, ones, gt, [1e-9, 0.1])
    assert s.fractions == (1.0, 1.0) and s.completeness == 1.0
    s = depth_error_stats(gt + 0.05, ones, gt, [0.02, 0.1])
    assert s.fractions == (0.0, 1.0)
    mask = rng.random(gt.shape) < 0.3
    s = depth_error_stats(gt, mask, gt, [np.inf])
    assert s.completeness == pytest.approx(mask.mean(), abs=1e-15)
    assert s.fraction(np.inf) == s.completeness
    with pytest.raises(DimensionMismatch):
        depth_error_stats(gt[:-1], ones[:-1], gt, [0.1])


def test_depth_stats_relative_and_gt_mask(rng):
    gt = np.full((4, 4), 2.0)
    gt[0, 0] = 0.0  # no ground truth here
    est = gt * 1.008
    s = depth_error_stats(est, np.ones((4, 4), bool), gt, [0.005, 0.01], relative=True)
    assert s.fractions == (0.0, 1.0)
    assert depth_error_stats(est, np.ones((4, 4), bool), np.zeros((4, 4)), [0.1]).completeness == 0.0


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**31))
def test_depth_stats_permutation_invariant(seed):
    rng = np.random.default_rng(seed)
    gt = rng.uniform(1, 3, size=60) * (rng.random(60) < 0.9)
    est = gt + rng.normal(scale=0.02, size=60)
    valid = rng.random(60) < 0.8
    perm = rng.permutation(60)
    taus = [0.005, 0.02, np.inf]
    a = depth_error_stats(est.reshape(6, 10), valid.reshape(6, 10), gt.reshape(6, 10), taus)
    b = depth_error_stats(est[perm].reshape(10, 6), valid[perm].reshape(10, 6), gt[perm].reshape(10, 6), taus)
    assert a == b
    assert a.fractions[-1] == a.completeness


def test_point_cloud_error_examples(rng):
    pts = np.concatenate([on_plane(rng, pl, 200) for pl in PLANES])
    mean, p95 = point_cloud_error(pts, PLANES)
    assert mean < 1e-12 and p95 < 1e-12
    shifted = np.concatenate([on_plane(rng, pl, 200) + 0.01 * pl.normal for pl in PLANES])
    assert point_cloud_error(shifted, PLANES)[0] == pytest.approx(0.01, abs=1e-9)
    with pytest.raises(EmptyCloud):
        point_cloud_error(np.zeros((0, 3)), PLANES)


def test_point_cloud_p95_matches_sort_oracle(rng):
    clean = on_plane(rng, PLANES[0], 400)
    outliers = clean[:40] + rng.normal(size=(40, 3))
    pts = np.concatenate([clean, outliers])
    d = plane_distances(pts, PLANES)
    srt = np.sort(d)
    k = 0.95 * (len(d) - 1)
    lo = int(np.floor(k))
    want = srt[lo] + (k - lo) * (srt[min(lo + 1, len(d) - 1)] - srt[lo])
    assert point_cloud_error(pts, PLANES)[1] == pytest.approx(want, rel=1e-12)
    perm = rng.permutation(len(pts))
    np.testing.assert_allclose(point_cloud_error(pts[perm], PLANES), point_cloud_error(pts, PLANES), rtol=1e-12)


def test_plane_distance_respects_extent():
    pl = PLANES[0]
    beyond = pl.center + 3.0 * pl.u_axis  # 1 unit past the edge, in plane
    assert plane_distances(beyond[None], [pl])[0] == pytest.approx(1.0, rel=1e-12)


def test_scene_diagonal():
    pl = PlaneSpec([0, 0, 0.0], [0, 0, 1.0], [1, 0, 0], (3, 2), 0.5)
    assert scene_diagonal([pl]) == pytest.approx(np.hypot(6, 4), rel=1e-12)


def test_curve_rows_and_csv():
    scene, gt = synth_scene(small_spec())
    rows = convergence_curve(scene, gt.depth[0], SolverConfig(iterations=3), "scp", thresholds=(0.01, 0.05))
    assert len(rows) == 6
    assert [r[0] for r in rows] == [1, 1, 2, 2, 3, 3]
    assert all(r[1] == "scp" and 0 <= r[3] <= r[4] <= 1 for r in rows)
    text = curve_csv(rows)
    assert text.splitlines()[0] == "iteration,scheme,threshold,accuracy,completeness"
    parsed = list(csv.reader(io.StringIO(text)))
    assert tuple(parsed[0]) == CURVE_HEADER and len(parsed) == 7


def test_format_table():
    s = ErrorStats((0.005, 0.01), (1.0, 0.5), 1.0)
    out = format_table([("0000", s), ("0001", s)]).splitlines()
    assert out[0].split() == ["image", "<0.5%", "<1%", "complete"]
    assert out[1].split() == ["0000", "100.0", "50.0", "100.0"]
    assert len({len(line) for line in out}) == 1
    assert format_table([]) == ""
