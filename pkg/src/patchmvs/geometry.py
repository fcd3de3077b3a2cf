"""Pinhole cameras, plane hypotheses and plane-induced homographies.

Conventions: pixel ``(x, y)`` has its center at ``(x + 0.5, y + 0.5)``;
"depth" is the z coordinate in the camera frame; plane normals are
expressed in the reference camera frame.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
from numba import njit

from ._random import next_uniform, state_from_generator


class DegeneratePlane(ValueError):
    """The plane passes through the reference camera center."""


class Pixel(NamedTuple):
    x: int
    y: int


@dataclass
class CameraModel:
    K: np.ndarray
    R: np.ndarray
    t: np.ndarray
    width: int
    height: int
    depth_min: float
    depth_max: float

    def __post_init__(self):
        self.K = np.asarray(self.K, dtype=np.float64).reshape(3, 3)
        self.R = np.asarray(self.R, dtype=np.float64).reshape(3, 3)
        self.t = np.asarray(self.t, dtype=np.float64).reshape(3)
        self.width = int(self.width)
        self.height = int(self.height)
        self.depth_min = float(self.depth_min)
        self.depth_max = float(self.depth_max)

    def validate(self, tol: float = 1e-9) -> None:
        """Raise ``ValueError`` describing the first violated invariant."""
        K = self.K
        if abs(K[1, 0]) > 0 or abs(K[2, 0]) > 0 or abs(K[2, 1]) > 0:
            raise ValueError("K must be upper-triangular")
        if not (K[0, 0] > 0 and K[1, 1] > 0):
            raise ValueError("K focal lengths must be positive")
        if K[2, 2] != 1.0:
            raise ValueError("K[2][2] must equal 1")
        err = np.abs(self.R.T @ self.R - np.eye(3)).max()
        if err >= tol:
            raise ValueError(f"R is not orthonormal (max deviation {err:.3g})")
        if abs(np.linalg.det(self.R) - 1.0) > tol:
            raise ValueError("det(R) must be +1")
        if not (0 < self.depth_min < self.depth_max):
            raise ValueError("need 0 < depth_min < depth_max")
        if self.width <= 0 or self.height <= 0:
            raise ValueError("image extent must be positive")

    @property
    def K_inv(self) -> np.ndarray:
        return np.linalg.inv(self.K)

    @property
    def center(self) -> np.ndarray:
        """Camera center in world coordinates."""
        return -self.R.T @ self.t

    def world_to_cam(self, X: np.ndarray) -> np.ndarray:
        return np.asarray(X) @ self.R.T + self.t

    def cam_to_world(self, X: np.ndarray) -> np.ndarray:
        return (np.asarray(X) - self.t) @ self.R

    def project(self, X_cam: np.ndarray) -> np.ndarray:
        """Project camera-frame points to continuous pixel coordinates."""
        X_cam = np.asarray(X_cam, dtype=np.float64)
        q = X_cam @ self.K.T
        return q[..., :2] / q[..., 2:3]

    def project_world(self, X: np.ndarray) -> np.ndarray:
        return self.project(self.world_to_cam(X))

    def ray(self, px) -> np.ndarray:
        """Unit viewing direction through the center of pixel ``px``."""
        r = self.K_inv @ np.array([px[0] + 0.5, px[1] + 0.5, 1.0])
        return r / np.linalg.norm(r)

    def scaled(self, factor: float) -> "CameraModel":
        """Camera for the image resized by ``factor`` (pixel-center preserving)."""
        S = np.diag([factor, factor, 1.0])
        return CameraModel(
            S @ self.K,
            self.R.copy(),
            self.t.copy(),
            max(1, int(round(self.width * factor))),
            max(1, int(round(self.height * factor))),
            self.depth_min,
            self.depth_max,
        )


@dataclass
class PlaneHypothesis:
    depth: float
    normal: np.ndarray

    def __post_init__(self):
        self.depth = float(self.depth)
        self.normal = np.asarray(self.normal, dtype=np.float64).reshape(3)

    def is_valid(self, cam: CameraModel, px) -> bool:
        n = self.normal
        return (
            abs(np.linalg.norm(n) - 1.0) <= 1e-9
            and float(n @ cam.ray(px)) < 0.0
            and cam.depth_min <= self.depth <= cam.depth_max
        )


def relative_pose(ref: CameraModel, src: CameraModel) -> tuple[np.ndarray, np.ndarray]:
    """Pose mapping ref-camera coordinates to src-camera coordinates."""
    R_rel = src.R @ ref.R.T
    t_rel = src.t - R_rel @ ref.t
    return R_rel, t_rel


def backproject(cam: CameraModel, px, depth: float) -> np.ndarray:
    """Camera-frame point at ``depth`` along the ray through the pixel center."""
    r = cam.K_inv @ np.array([px[0] + 0.5, px[1] + 0.5, 1.0])
    return r * (depth / r[2])


def homography_parts(ref: CameraModel, src: CameraModel) -> tuple[np.ndarray, np.ndarray]:
    """Plane-independent factors ``K_src R_rel K_ref^-1`` and ``K_src t_rel``."""
    R_rel, t_rel = relative_pose(ref, src)
    return src.K @ R_rel @ ref.K_inv, src.K @ t_rel


@njit(cache=True, inline="always")
def homography_kernel(KR, Kt, K_ref_inv, n, X, H):
    """Write the plane-induced homography into ``H``; return False if degenerate.

    The plane passes through ``X`` (ref frame) with normal ``n``, so its points
    satisfy ``n . P = dp`` and map as ``P_src = (R_rel + t_rel n^T / dp) P``.
    """
    dp = n[0] * X[0] + n[1] * X[1] + n[2] * X[2]
    if abs(dp) < 1e-12:
        return False
    for j in range(3):
        m = (K_ref_inv[0, j] * n[0] + K_ref_inv[1, j] * n[1] + K_ref_inv[2, j] * n[2]) / dp
        H[0, j] = KR[0, j] + Kt[0] * m
        H[1, j] = KR[1, j] + Kt[1] * m
        H[2, j] = KR[2, j] + Kt[2] * m
    return True


def plane_homography(ref: CameraModel, src: CameraModel, px, h: PlaneHypothesis) -> np.ndarray:
    """Homography taking homogeneous ref pixel coordinates into ``src``."""
    KR, Kt = homography_parts(ref, src)
    X = backproject(ref, px, h.depth)
    H = np.empty((3, 3))
    if not homography_kernel(KR, Kt, ref.K_inv, h.normal, X, H):
        raise DegeneratePlane(f"plane through camera center at pixel {tuple(px)}")
    return H


@njit(cache=True)
def sample_facing_normal(state, ray):
    """Uniform unit normal on the hemisphere facing against ``ray``."""
    z = 1.0 - 2.0 * next_uniform(state)
    phi = 2.0 * math.pi * next_uniform(state)
    r = math.sqrt(max(0.0, 1.0 - z * z))
    n = np.empty(3)
    n[0] = r * math.cos(phi)
    n[1] = r * math.sin(phi)
    n[2] = z
    dot = n[0] * ray[0] + n[1] * ray[1] + n[2] * ray[2]
    if dot > 0.0:
        n[0] = -n[0]
        n[1] = -n[1]
        n[2] = -n[2]
    elif dot == 0.0:
        n[0] = -ray[0]
        n[1] = -ray[1]
        n[2] = -ray[2]
    return n


@njit(cache=True)
def perturb_normal(state, normal, ray, angle_max):
    """Rotate ``normal`` by a uniform angle in [0, angle_max] about a random
    perpendicular axis, retrying up to 8 times to keep it camera-facing."""
    out = normal.copy()
    if angle_max <= 0.0:
        return out
    # orthonormal basis perpendicular to the normal
    if abs(normal[0]) < 0.9:
        a0, a1, a2 = 0.0, -normal[2], normal[1]
    else:
        a0, a1, a2 = normal[2], 0.0, -normal[0]
    s = math.sqrt(a0 * a0 + a1 * a1 + a2 * a2)
    a0 /= s
    a1 /= s
    a2 /= s
    b0 = normal[1] * a2 - normal[2] * a1
    b1 = normal[2] * a0 - normal[0] * a2
    b2 = normal[0] * a1 - normal[1] * a0
    for _ in range(8):
        theta = angle_max * next_uniform(state)
        phi = 2.0 * math.pi * next_uniform(state)
        # tilt n by theta toward the in-plane direction d(phi)
        c = math.cos(theta)
        sn = math.sin(theta)
        d0 = -math.sin(phi) * a0 + math.cos(phi) * b0
        d1 = -math.sin(phi) * a1 + math.cos(phi) * b1
        d2 = -math.sin(phi) * a2 + math.cos(phi) * b2
        m0 = normal[0] * c + d0 * sn
        m1 = normal[1] * c + d1 * sn
        m2 = normal[2] * c + d2 * sn
        norm = math.sqrt(m0 * m0 + m1 * m1 + m2 * m2)
        m0 /= norm
        m1 /= norm
        m2 /= norm
        if m0 * ray[0] + m1 * ray[1] + m2 * ray[2] < 0.0:
            out[0] = m0
            out[1] = m1
            out[2] = m2
            return out
    return out


@njit(cache=True)
def perturb_depth(state, depth, depth_frac, dmin, dmax):
    lo = depth * (1.0 - depth_frac)
    hi = depth * (1.0 + depth_frac)
    d = lo + (hi - lo) * next_uniform(state)
    return min(max(d, dmin), dmax)


def random_hypothesis(rng: np.random.Generator, cam: CameraModel, px) -> PlaneHypothesis:
    """Uniform depth in the camera range and a uniform camera-facing normal."""
    state = state_from_generator(rng)
    depth = cam.depth_min + (cam.depth_max - cam.depth_min) * rng.random()
    n = sample_facing_normal(state, cam.ray(px))
    return PlaneHypothesis(depth, n)


def perturb_hypothesis(
    rng: np.random.Generator,
    cam: CameraModel,
    px,
    h: PlaneHypothesis,
    depth_frac: float,
    angle_max: float,
) -> PlaneHypothesis:
    state = state_from_generator(rng)
    d = perturb_depth(state, h.depth, depth_frac, cam.depth_min, cam.depth_max)
    n = perturb_normal(state, h.normal, cam.ray(px), angle_max)
    return PlaneHypothesis(d, n)
