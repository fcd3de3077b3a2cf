"""Depth-map and point-cloud error metrics, and per-iteration convergence curves."""

from __future__ import annotations

import csv
import io as _io
from dataclasses import dataclass, replace
from typing import Iterable, Optional, Sequence

import numpy as np

from .io import DimensionMismatch, PlaneSpec
from .solver import SolverConfig, estimate_depth_map

CURVE_HEADER = ("iteration", "scheme", "threshold", "accuracy", "completeness")
TABLE_THRESHOLDS = (0.005, 0.01, 0.02, 0.05)


class EmptyCloud(ValueError):
    pass


@dataclass
class ErrorStats:
    thresholds: tuple
    fractions: tuple
    completeness: float

    def fraction(self, tau: float) -> float:
        return self.fractions[self.thresholds.index(tau)]


def depth_error_stats(
    est_depth: np.ndarray,
    est_valid: np.ndarray,
    gt_depth: np.ndarray,
    thresholds: Sequence[float],
    gt_valid: Optional[np.ndarray] = None,
    relative: bool = False,
) -> ErrorStats:
    """Fraction of GT-valid pixels that are estimated and within each threshold.

    With ``relative=True`` the error is ``|d_est - d_gt| / d_gt``. GT validity
    defaults to ``gt_depth > 0``.
    """
    est_depth = np.asarray(est_depth, dtype=np.float64)
    gt_depth = np.asarray(gt_depth, dtype=np.float64)
    est_valid = np.asarray(est_valid, dtype=bool)
    if est_depth.shape != gt_depth.shape or est_valid.shape != gt_depth.shape:
        raise DimensionMismatch(f"estimate {est_depth.shape} vs ground truth {gt_depth.shape}")
    gv = gt_depth > 0 if gt_valid is None else np.asarray(gt_valid, dtype=bool)
    n = int(gv.sum())
    if n == 0:
        return ErrorStats(tuple(thresholds), tuple(0.0 for _ in thresholds), 0.0)
    e = np.abs(est_depth[gv] - gt_depth[gv])
    if relative:
        e = e / gt_depth[gv]
    ok = est_valid[gv]
    fr = tuple(float(np.count_nonzero(ok & (e < tau)) / n) for tau in thresholds)
    return ErrorStats(tuple(thresholds), fr, float(np.count_nonzero(ok) / n))


def convergence_curve(
    scene,
    gt_depth: np.ndarray,
    cfg: SolverConfig = SolverConfig(),
    scheme: str = "acp",
    ref_id: int = 0,
    thresholds: Sequence[float] = (0.01,),
) -> list[tuple]:
    """Solve once and record relative-depth accuracy after every full iteration.

    Rows are ``(iteration, scheme, threshold, accuracy, completeness)`` with
    1-based iterations, measured on the raw (unfiltered) state.
    """
    cfg = replace(cfg, scheme=scheme)
    rows = []

    def record(t, state):
        s = depth_error_stats(state.depth, state.cost < 2.0, gt_depth, thresholds, relative=True)
        for tau, fr in zip(s.thresholds, s.fractions):
            rows.append((t + 1, scheme, tau, fr, s.completeness))

    estimate_depth_map(scene, ref_id, cfg, on_iteration=record)
    return rows


def curve_csv(rows: Iterable[tuple]) -> str:
    buf = _io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CURVE_HEADER)
    for it, scheme, tau, acc, comp in rows:
        w.writerow((it, scheme, repr(float(tau)), f"{acc:.6f}", f"{comp:.6f}"))
    return buf.getvalue()


def plane_distances(points: np.ndarray, planes: Sequence[PlaneSpec]) -> np.ndarray:
    """Distance from each point to the nearest plane rectangle."""
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    best = np.full(len(points), np.inf)
    for pl in planes:
        rel = points - pl.center
        a = np.clip(rel @ pl.u_axis, -pl.half_size[0], pl.half_size[0])
        b = np.clip(rel @ pl.v_axis, -pl.half_size[1], pl.half_size[1])
        closest = pl.center + a[:, None] * pl.u_axis + b[:, None] * pl.v_axis
        best = np.minimum(best, np.linalg.norm(points - closest, axis=1))
    return best


def point_cloud_error(points, gt_planes: Sequence[PlaneSpec]) -> tuple[float, float]:
    """``(mean, 95th percentile)`` distance to the ground-truth planes.

    ``points`` is an ``(N, 3)`` array or anything with a ``positions`` array.
    """
    pos = getattr(points, "positions", points)
    pos = np.asarray(pos, dtype=np.float64).reshape(-1, 3)
    if len(pos) == 0:
        raise EmptyCloud("point cloud is empty")
    d = plane_distances(pos, gt_planes)
    return float(d.mean()), float(np.percentile(d, 95))


def scene_diagonal(planes: Sequence[PlaneSpec]) -> float:
    """Diagonal of the axis-aligned box around all plane rectangles."""
    corners = np.concatenate([pl.corners() for pl in planes])
    return float(np.linalg.norm(corners.max(axis=0) - corners.min(axis=0)))


def format_table(rows: Sequence[tuple[str, ErrorStats]]) -> str:
    """Aligned percentage table, one row per image."""
    if not rows:
        return ""
    taus = rows[0][1].thresholds
    head = ["image"] + [f"<{tau * 100:g}%" for tau in taus] + ["complete"]
    body = [[name] + [f"{f * 100:.1f}" for f in s.fractions] + [f"{s.completeness * 100:.1f}"] for name, s in rows]
    widths = [max(len(r[c]) for r in [head] + body) for c in range(len(head))]
    fmt = lambda r: "  ".join(v.rjust(w) for v, w in zip(r, widths))  # noqa: E731
    return "\n".join([fmt(head)] + [fmt(r) for r in body])
