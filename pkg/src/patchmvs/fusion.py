"""Consistency-checked fusion of per-image depth/normal maps into a point cloud."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .geometry import CameraModel


@dataclass(frozen=True)
class FusionParams:
    f_rel_depth: float = 0.01
    f_ang: float = 30.0  # degrees
    f_con: int = 2
    # disparity-style threshold; only used when ``disparity_scale``
    # (baseline * focal) is given, replacing the relative-depth test
    f_eps_disparity: float = 0.3
    disparity_scale: Optional[float] = None

    def __post_init__(self):
        if not self.f_rel_depth > 0:
            raise ValueError("f_rel_depth must be positive")
        if not 0 < self.f_ang < 90:
            raise ValueError("f_ang must lie in (0, 90) degrees")
        if int(self.f_con) != self.f_con or self.f_con < 1:
            raise ValueError("f_con must be an integer >= 1")
        if self.disparity_scale is not None and not self.disparity_scale > 0:
            raise ValueError("disparity_scale must be positive")


@dataclass
class FusedPoint:
    position: np.ndarray
    normal: np.ndarray
    color: tuple
    support: int


@dataclass
class PointCloud:
    """Struct-of-arrays cloud; ``emitter[i] = (view, y, x)`` of the pixel that emitted point ``i``."""

    positions: np.ndarray
    normals: np.ndarray
    colors: np.ndarray
    support: np.ndarray
    emitter: np.ndarray

    def __len__(self) -> int:
        return len(self.positions)

    def __getitem__(self, i) -> FusedPoint:
        return FusedPoint(self.positions[i], self.normals[i], tuple(int(c) for c in self.colors[i]), int(self.support[i]))

    def __iter__(self):
        return (self[i] for i in range(len(self)))

    @classmethod
    def empty(cls) -> "PointCloud":
        return cls(np.zeros((0, 3)), np.zeros((0, 3)), np.zeros((0, 3), np.uint8), np.zeros(0, np.int64), np.zeros((0, 3), np.int64))

    def histogram(self, n_views: int) -> np.ndarray:
        """Number of points per support count ``0..n_views-1``."""
        return np.bincount(self.support, minlength=n_views)[:n_views]


@dataclass
class _ViewGeom:
    cam: CameraModel
    depth: np.ndarray
    valid: np.ndarray
    points: np.ndarray  # world positions (H, W, 3)
    normals: np.ndarray  # world normals (H, W, 3)


def _pixel_rays(cam: CameraModel) -> np.ndarray:
    ys, xs = np.mgrid[0 : cam.height, 0 : cam.width].astype(np.float64)
    pix = np.stack([xs + 0.5, ys + 0.5, np.ones_like(xs)], axis=-1)
    rays = pix @ cam.K_inv.T
    return rays / rays[..., 2:3]


def _view_geom(cam: CameraModel, depth: np.ndarray, normal: np.ndarray, valid: np.ndarray) -> _ViewGeom:
    depth = np.asarray(depth, dtype=np.float64)
    if depth.shape != (cam.height, cam.width):
        raise ValueError(f"map shape {depth.shape} does not match camera {cam.height}x{cam.width}")
    X_cam = _pixel_rays(cam) * depth[..., None]
    return _ViewGeom(
        cam,
        depth,
        np.asarray(valid, dtype=bool) & (depth > 0),
        cam.cam_to_world(X_cam),
        np.asarray(normal, dtype=np.float64) @ cam.R,  # R^T n, row-wise
    )


def _consistency(ref: _ViewGeom, src: _ViewGeom, X: np.ndarray, N: np.ndarray, params: FusionParams):
    """Vectorized test for world points ``X`` with world normals ``N`` against ``src``.

    Returns ``(ok, qy, qx)`` with the source pixel each point lands on.
    """
    Xs = src.cam.world_to_cam(X)
    z = Xs[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        uv = src.cam.project(Xs)
    ok = (z > 0) & np.isfinite(uv).all(axis=1)
    u = np.where(ok, uv[:, 0], -1.0)
    v = np.where(ok, uv[:, 1], -1.0)
    ok &= (u >= 0) & (u < src.cam.width) & (v >= 0) & (v < src.cam.height)
    qx = np.where(ok, np.floor(u), 0).astype(np.int64)
    qy = np.where(ok, np.floor(v), 0).astype(np.int64)
    ok &= src.valid[qy, qx]
    d_src = src.depth[qy, qx]
    with np.errstate(divide="ignore", invalid="ignore"):
        if params.disparity_scale is None:
            ok &= np.abs(z - d_src) / d_src <= params.f_rel_depth
        else:
            ok &= params.disparity_scale * np.abs(1.0 / z - 1.0 / d_src) <= params.f_eps_disparity
    cos_min = np.cos(np.deg2rad(params.f_ang))
    ok &= np.einsum("ij,ij->i", N, src.normals[qy, qx]) >= cos_min * np.linalg.norm(N, axis=1)
    return ok, qy, qx


def check_consistency(
    ref_map,
    ref_cam: CameraModel,
    src_map,
    src_cam: CameraModel,
    px,
    params: FusionParams = FusionParams(),
) -> bool:
    """Whether the ref pixel's point re-projects onto an agreeing src pixel.

    Maps are any objects with ``depth``, ``normal`` and ``valid`` arrays.
    """
    ref = _view_geom(ref_cam, ref_map.depth, ref_map.normal, ref_map.valid)
    src = _view_geom(src_cam, src_map.depth, src_map.normal, src_map.valid)
    x, y = int(px[0]), int(px[1])
    if not ref.valid[y, x]:
        return False
    ok, _, _ = _consistency(ref, src, ref.points[y, x][None], ref.normals[y, x][None], params)
    return bool(ok[0])


def fuse(scene, maps: Sequence, params: FusionParams = FusionParams()) -> PointCloud:
    """Fuse one map per scene view into a duplicate-free point cloud.

    References are visited in input order. A valid, not yet consumed pixel
    is emitted when at least ``f_con`` other views agree with it; the point is
    the component-wise median of the agreeing 3-D points and the normal their
    normalized mean. Agreeing source pixels are marked consumed.
    """
    if len(maps) != len(scene.views):
        raise ValueError(f"need one map per view, got {len(maps)} maps for {len(scene.views)} views")
    geoms = [_view_geom(v.cam, m.depth, m.normal, m.valid) for v, m in zip(scene.views, maps)]
    consumed = [np.zeros_like(g.valid) for g in geoms]
    n_views = len(geoms)
    out = []
    for i, ref in enumerate(geoms):
        ys, xs = np.nonzero(ref.valid & ~consumed[i])
        if ys.size == 0:
            continue
        X = ref.points[ys, xs]
        N = ref.normals[ys, xs]
        stack_X = np.full((ys.size, n_views, 3), np.nan)
        stack_N = np.zeros((ys.size, n_views, 3))
        stack_X[:, i] = X
        stack_N[:, i] = N
        hits = []
        support = np.zeros(ys.size, np.int64)
        for j, src in enumerate(geoms):
            if j == i:
                continue
            ok, qy, qx = _consistency(ref, src, X, N, params)
            support += ok
            stack_X[ok, j] = src.points[qy[ok], qx[ok]]
            stack_N[ok, j] = src.normals[qy[ok], qx[ok]]
            hits.append((j, ok, qy, qx))
        emit = support >= params.f_con
        if not emit.any():
            continue
        for j, ok, qy, qx in hits:
            take = ok & emit
            consumed[j][qy[take], qx[take]] = True
        consumed[i][ys[emit], xs[emit]] = True
        pos = np.nanmedian(stack_X[emit], axis=1)
        nrm = stack_N[emit].sum(axis=1)
        nrm /= np.linalg.norm(nrm, axis=1, keepdims=True)
        rgb = scene.views[i].rgb[ys[emit], xs[emit]]
        colors = np.round(np.clip(rgb, 0, 1) * 255).astype(np.uint8)
        emitter = np.stack([np.full(emit.sum(), i), ys[emit], xs[emit]], axis=1)
        out.append((pos, nrm, colors, support[emit], emitter))
    if not out:
        return PointCloud.empty()
    return PointCloud(*(np.concatenate(parts) for parts in zip(*out)))
