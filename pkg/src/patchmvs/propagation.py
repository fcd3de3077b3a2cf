"""Red/black checkerboard scheduling and the 8-region candidate sampler.

Each pixel looks in four directions. In every direction a *near* region
(a V of 7 cells opening away from the pixel) and a *far* region (11 cells
on the axis, out to 23 pixels) each contribute the candidate with the
lowest stored cost. All offsets have odd ``|dx| + |dy|`` so a pixel only
ever reads pixels of the opposite checker color.
"""

from __future__ import annotations

import enum
from typing import Optional

import numpy as np
from numba import njit

from .geometry import CameraModel, PlaneHypothesis, Pixel


class CheckerColor(enum.IntEnum):
    RED = 0  # (x + y) even
    BLACK = 1


class Direction(enum.IntEnum):
    UP = 0
    DOWN = 1
    LEFT = 2
    RIGHT = 3


class Band(enum.IntEnum):
    NEAR = 0
    FAR = 1


def color_of(x: int, y: int) -> CheckerColor:
    return CheckerColor((x + y) & 1)


_NEAR_UP = [(0, -1), (-1, -2), (1, -2), (-2, -3), (2, -3), (-3, -4), (3, -4)]
_FAR_UP = [(0, -(2 * k + 1)) for k in range(1, 12)]
# symmetric baseline: one fixed cell per slot at distances 1 and 5
_SYM_NEAR_UP = [(0, -1)]
_SYM_FAR_UP = [(0, -5)]


def _rotate(offsets, direction: Direction):
    if direction == Direction.UP:
        return list(offsets)
    if direction == Direction.DOWN:
        return [(-dx, -dy) for dx, dy in offsets]
    if direction == Direction.LEFT:
        return [(dy, -dx) for dx, dy in offsets]
    return [(-dy, dx) for dx, dy in offsets]


def region_offsets(direction: Direction, band: Band, scheme: str = "acp") -> list[tuple[int, int]]:
    """Candidate offsets for one region, in tie-break order."""
    if scheme == "acp":
        base = _NEAR_UP if band == Band.NEAR else _FAR_UP
    elif scheme == "scp":
        base = _SYM_NEAR_UP if band == Band.NEAR else _SYM_FAR_UP
    else:
        raise ValueError(f"unknown propagation scheme {scheme!r}")
    return _rotate(base, Direction(direction))


def all_regions(scheme: str = "acp") -> list[tuple[Direction, Band, list[tuple[int, int]]]]:
    return [(d, b, region_offsets(d, b, scheme)) for d in Direction for b in Band]


def region_table(scheme: str = "acp") -> tuple[np.ndarray, np.ndarray]:
    """Padded ``(8, L, 2)`` offset table and per-region counts for the kernels.

    ``scheme="none"`` yields empty regions (refinement-only ablation).
    """
    if scheme == "none":
        return np.zeros((8, 1, 2), np.int64), np.zeros(8, np.int64)
    regions = [offs for _, _, offs in all_regions(scheme)]
    L = max(len(r) for r in regions)
    table = np.zeros((8, L, 2), np.int64)
    counts = np.zeros(8, np.int64)
    for i, offs in enumerate(regions):
        table[i, : len(offs)] = offs
        counts[i] = len(offs)
    return table, counts


@njit(cache=True, inline="always")
def region_best_kernel(cost, x, y, table, counts, r):
    """Flat index of the lowest-cost in-bounds candidate of region ``r``, or -1."""
    h, w = cost.shape
    best = -1
    best_c = 0.0
    for k in range(counts[r]):
        nx = x + table[r, k, 0]
        ny = y + table[r, k, 1]
        if nx < 0 or nx >= w or ny < 0 or ny >= h:
            continue
        c = cost[ny, nx]
        if best < 0 or c < best_c:
            best = ny * w + nx
            best_c = c
    return best


@njit(cache=True, inline="always")
def reanchor_kernel(K_inv, x, y, sx, sy, d_s, n0, n1, n2, dmin, dmax, out_n):
    """Depth at pixel ``(x, y)`` of the sender's plane; normal written to ``out_n``.

    Falls back to the sender's depth clamped to range when the intersection is
    out of range or the plane does not face the receiving ray; a non-facing
    normal is mirrored about the plane perpendicular to the ray.
    """
    rx = K_inv[0, 0] * (x + 0.5) + K_inv[0, 1] * (y + 0.5) + K_inv[0, 2]
    ry = K_inv[1, 0] * (x + 0.5) + K_inv[1, 1] * (y + 0.5) + K_inv[1, 2]
    rz = K_inv[2, 0] * (x + 0.5) + K_inv[2, 1] * (y + 0.5) + K_inv[2, 2]
    qx = K_inv[0, 0] * (sx + 0.5) + K_inv[0, 1] * (sy + 0.5) + K_inv[0, 2]
    qy = K_inv[1, 0] * (sx + 0.5) + K_inv[1, 1] * (sy + 0.5) + K_inv[1, 2]
    qz = K_inv[2, 0] * (sx + 0.5) + K_inv[2, 1] * (sy + 0.5) + K_inv[2, 2]
    s = d_s / qz
    num = n0 * qx * s + n1 * qy * s + n2 * qz * s
    den = n0 * rx + n1 * ry + n2 * rz
    out_n[0] = n0
    out_n[1] = n1
    out_n[2] = n2
    if den < 0.0:
        z = num / den * rz
        if z >= dmin and z <= dmax:
            return z
        return min(max(d_s, dmin), dmax)
    rn = np.sqrt(rx * rx + ry * ry + rz * rz)
    ux = rx / rn
    uy = ry / rn
    uz = rz / rn
    dot = n0 * ux + n1 * uy + n2 * uz
    if dot > 0.0:
        out_n[0] = n0 - 2.0 * dot * ux
        out_n[1] = n1 - 2.0 * dot * uy
        out_n[2] = n2 - 2.0 * dot * uz
        m = np.sqrt(out_n[0] ** 2 + out_n[1] ** 2 + out_n[2] ** 2)
        out_n[0] /= m
        out_n[1] /= m
        out_n[2] /= m
    else:
        out_n[0] = -ux
        out_n[1] = -uy
        out_n[2] = -uz
    return min(max(d_s, dmin), dmax)


def sample_region_best(cost_map: np.ndarray, px, offsets) -> Optional[Pixel]:
    """In-bounds candidate with the lowest stored cost (ties: first in order)."""
    table = np.zeros((1, max(1, len(offsets)), 2), np.int64)
    if len(offsets):
        table[0, : len(offsets)] = offsets
    counts = np.array([len(offsets)], np.int64)
    cost_map = np.ascontiguousarray(cost_map, dtype=np.float64)
    idx = region_best_kernel(cost_map, int(px[0]), int(px[1]), table, counts, 0)
    if idx < 0:
        return None
    w = cost_map.shape[1]
    return Pixel(idx % w, idx // w)


def gather_hypotheses(
    cam: CameraModel,
    depth: np.ndarray,
    normals: np.ndarray,
    cost_map: np.ndarray,
    px,
    scheme: str = "acp",
) -> list[tuple[PlaneHypothesis, Pixel]]:
    """One re-anchored hypothesis per region that has an in-bounds candidate."""
    out = []
    K_inv = cam.K_inv
    n_out = np.empty(3)
    for _, _, offs in all_regions(scheme):
        src = sample_region_best(cost_map, px, offs)
        if src is None:
            continue
        n0, n1, n2 = (float(v) for v in normals[src.y, src.x])
        d = reanchor_kernel(
            K_inv, int(px[0]), int(px[1]), src.x, src.y, float(depth[src.y, src.x]), n0, n1, n2,
            cam.depth_min, cam.depth_max, n_out,
        )
        out.append((PlaneHypothesis(d, n_out.copy()), src))
    return out
