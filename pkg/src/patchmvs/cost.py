"""Bilaterally weighted NCC matching cost and per-pixel cost matrices."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from numba import njit

from .geometry import CameraModel, PlaneHypothesis, backproject, homography_kernel, homography_parts

COST_MAX = 2.0
# luma differences enter the bilateral weight on a 0..255 scale
LUMA_SCALE = 255.0


@dataclass
class GrayImage:
    luma: np.ndarray

    def __post_init__(self):
        self.luma = np.ascontiguousarray(self.luma, dtype=np.float64)
        if self.luma.ndim != 2:
            raise ValueError("luma must be a 2-D array")
        if not np.all(np.isfinite(self.luma)) or self.luma.min(initial=0.0) < 0 or self.luma.max(initial=0.0) > 1:
            raise ValueError("luma values must be finite and within [0, 1]")

    @property
    def width(self) -> int:
        return self.luma.shape[1]

    @property
    def height(self) -> int:
        return self.luma.shape[0]


@dataclass(frozen=True)
class MatchWindow:
    radius: int = 5
    skip: int = 2

    def __post_init__(self):
        if self.radius < 1 or self.skip < 1:
            raise ValueError("window radius and skip must be >= 1")

    def offsets(self) -> np.ndarray:
        """1-D sample offsets: multiples of ``skip`` within ``radius``, including 0."""
        k = self.radius // self.skip
        return np.arange(-k, k + 1, dtype=np.int64) * self.skip


@njit(cache=True, inline="always")
def bilateral_weight(delta_I, delta_x, sigma_I, sigma_x):
    return math.exp(-delta_I / (2.0 * sigma_I * sigma_I) - delta_x / (2.0 * sigma_x * sigma_x))


@njit(cache=True)
def prepare_ref_patch(ref, x, y, offs, sigma_I, sigma_x, dxs, dys, ws, ps):
    """Collect in-bounds reference samples around ``(x, y)`` and their weights.

    Fills the output arrays (offsets as floats) and returns
    ``(count, mean, variance)`` of the weighted reference patch. Weights are
    normalized to sum to one.
    """
    h, w = ref.shape
    center = ref[y, x]
    n = 0
    sw = 0.0
    for oy in offs:
        yy = y + oy
        if yy < 0 or yy >= h:
            continue
        for ox in offs:
            xx = x + ox
            if xx < 0 or xx >= w:
                continue
            p = ref[yy, xx]
            wt = bilateral_weight(abs(p - center) * LUMA_SCALE, math.sqrt(ox * ox + oy * oy), sigma_I, sigma_x)
            dxs[n] = ox
            dys[n] = oy
            ws[n] = wt
            ps[n] = p
            sw += wt
            n += 1
    mp = 0.0
    for s in range(n):
        ws[s] /= sw
        mp += ws[s] * ps[s]
    vp = 0.0
    for s in range(n):
        d = ps[s] - mp
        vp += ws[s] * d * d
    return n, mp, vp


def pad_image(luma: np.ndarray) -> np.ndarray:
    """Replicate a 1-pixel border so bilinear lookups need no clamping."""
    return np.pad(np.ascontiguousarray(luma, dtype=np.float64), 1, mode="edge")


@njit(cache=True, inline="always")
def _inside(h00, h01, h02, h10, h11, h12, h20, h21, h22, cx, cy, sh, sw):
    # division-free test of 0 <= u < sw, 0 <= v < sh with q2 > 0
    q2 = h20 * cx + h21 * cy + h22
    if q2 <= 0.0:
        return False
    a = h00 * cx + h01 * cy + h02
    b = h10 * cx + h11 * cy + h12
    return a >= 0.0 and a < sw * q2 and b >= 0.0 and b < sh * q2


# reassociation lets LLVM vectorize the sample loop; NaN/inf semantics are
# left intact
_FASTMATH = {"reassoc", "contract", "arcp", "nsz"}


@njit(cache=True, inline="always")
def _bilinear(srcs, j, fx, fy):
    # padded coordinates are >= 0.5, so truncation is floor
    ix = np.uint64(fx)
    iy = np.uint64(fy)
    ax = fx - ix
    ay = fy - iy
    p00 = srcs[j, iy, ix]
    p01 = srcs[j, iy, ix + np.uint64(1)]
    p10 = srcs[j, iy + np.uint64(1), ix]
    p11 = srcs[j, iy + np.uint64(1), ix + np.uint64(1)]
    top = p00 + ax * (p01 - p00)
    bot = p10 + ax * (p11 - p10)
    return top + ay * (bot - top)


@njit(cache=True, inline="always")
def _ncc_finish(eh, ehh, eph, mp, vp):
    vh = ehh - eh * eh
    if vh < 1e-12:
        return COST_MAX
    c = 1.0 - (eph - mp * eh) / math.sqrt(vp * vh)
    if c < 0.0:
        return 0.0
    if c > COST_MAX:
        return COST_MAX
    return c


@njit(cache=True, nogil=True)
def _ncc_checked(srcs, j, sh, sw, h00, h01, h02, h10, h11, h12, h20, h21, h22, x, y, n, dxs, dys, ws, ps, mp, vp):
    # slow path for windows whose warp may leave the source
    cx = x + 0.5
    cy = y + 0.5
    eh = 0.0
    ehh = 0.0
    eph = 0.0
    for s in range(n):
        px = cx + dxs[s]
        py = cy + dys[s]
        q2 = h20 * px + h21 * py + h22
        if q2 <= 0.0:
            return COST_MAX
        u = (h00 * px + h01 * py + h02) / q2
        v = (h10 * px + h11 * py + h12) / q2
        if not (u >= 0.0 and u < sw and v >= 0.0 and v < sh):
            return COST_MAX
        val = _bilinear(srcs, j, u + 0.5, v + 0.5)
        wt = ws[s]
        eh += wt * val
        ehh += wt * val * val
        eph += wt * ps[s] * val
    return _ncc_finish(eh, ehh, eph, mp, vp)


@njit(cache=True, nogil=True, fastmath=_FASTMATH)
def ncc_kernel(srcs, j, sh, sw, h00, h01, h02, h10, h11, h12, h20, h21, h22, x, y, n, dxs, dys, ws, ps, mp, vp, reach):
    """Cost of the prepared reference patch against source ``j`` warped through H.

    ``srcs`` stacks the source lumas padded by one replicated pixel (see
    :func:`pad_image`); ``sh x sw`` is the unpadded extent of source ``j`` and
    ``reach`` the largest window offset. Bilinear samples clamp at the edge.
    """
    if vp < 1e-12:
        return COST_MAX
    cx = x + 0.5
    cy = y + 0.5
    # numerators and denominator are affine over the window, so in-bounds
    # corners imply every sample is in bounds
    if not (
        _inside(h00, h01, h02, h10, h11, h12, h20, h21, h22, cx - reach, cy - reach, sh, sw)
        and _inside(h00, h01, h02, h10, h11, h12, h20, h21, h22, cx + reach, cy - reach, sh, sw)
        and _inside(h00, h01, h02, h10, h11, h12, h20, h21, h22, cx - reach, cy + reach, sh, sw)
        and _inside(h00, h01, h02, h10, h11, h12, h20, h21, h22, cx + reach, cy + reach, sh, sw)
    ):
        return _ncc_checked(srcs, j, sh, sw, h00, h01, h02, h10, h11, h12, h20, h21, h22, x, y, n, dxs, dys, ws, ps, mp, vp)
    b0 = h00 * cx + h01 * cy + h02
    b1 = h10 * cx + h11 * cy + h12
    b2 = h20 * cx + h21 * cy + h22
    eh = 0.0
    ehh = 0.0
    eph = 0.0
    for s in range(n):
        dx = dxs[s]
        dy = dys[s]
        inv = 1.0 / (b2 + h20 * dx + h21 * dy)
        val = _bilinear(srcs, j, (b0 + h00 * dx + h01 * dy) * inv + 0.5, (b1 + h10 * dx + h11 * dy) * inv + 0.5)
        wt = ws[s]
        eh += wt * val
        ehh += wt * val * val
        eph += wt * ps[s] * val
    return _ncc_finish(eh, ehh, eph, mp, vp)


@njit(cache=True)
def ncc_warped(srcs, j, sh, sw, H, x, y, n, dxs, dys, ws, ps, mp, vp, reach):
    return ncc_kernel(
        srcs, j, sh, sw, H[0, 0], H[0, 1], H[0, 2], H[1, 0], H[1, 1], H[1, 2], H[2, 0], H[2, 1], H[2, 2],
        x, y, n, dxs, dys, ws, ps, mp, vp, reach,
    )


def _patch_buffers(offs: np.ndarray):
    m = len(offs) ** 2
    return (np.empty(m), np.empty(m), np.empty(m), np.empty(m))


def ncc_cost(
    ref: GrayImage,
    src: GrayImage,
    px,
    H: np.ndarray,
    win: MatchWindow = MatchWindow(),
    sigma_I: float = 3.0,
    sigma_x: float = 30.0,
) -> float:
    """``1 - NCC`` between the reference window at ``px`` and its warp into ``src``.

    Returns ``COST_MAX`` when a warped sample leaves ``src`` or either patch
    has (near) zero weighted variance.
    """
    offs = win.offsets()
    dxs, dys, ws, ps = _patch_buffers(offs)
    n, mp, vp = prepare_ref_patch(ref.luma, int(px[0]), int(px[1]), offs, sigma_I, sigma_x, dxs, dys, ws, ps)
    H = np.ascontiguousarray(H, dtype=np.float64)
    x, y = int(px[0]), int(px[1])
    reach = float(offs.max())
    return ncc_warped(pad_image(src.luma)[None], 0, src.height, src.width, H, x, y, n, dxs, dys, ws, ps, mp, vp, reach)


def build_cost_matrix(
    ref: GrayImage,
    ref_cam: CameraModel,
    sources: list[tuple[GrayImage, CameraModel]],
    px,
    hyps: list[PlaneHypothesis],
    win: MatchWindow = MatchWindow(),
    sigma_I: float = 3.0,
    sigma_x: float = 30.0,
) -> np.ndarray:
    """8 x N matrix of costs: row ``i`` is hypothesis ``i``, column ``j`` source ``j``."""
    if len(hyps) != 8:
        raise ValueError(f"expected 8 hypotheses, got {len(hyps)}")
    if not sources:
        raise ValueError("need at least one source view")
    offs = win.offsets()
    dxs, dys, ws, ps = _patch_buffers(offs)
    x, y = int(px[0]), int(px[1])
    n, mp, vp = prepare_ref_patch(ref.luma, x, y, offs, sigma_I, sigma_x, dxs, dys, ws, ps)
    parts = [homography_parts(ref_cam, cam) for _, cam in sources]
    padded = [pad_image(img.luma)[None] for img, _ in sources]
    reach = float(offs.max())
    K_ref_inv = ref_cam.K_inv
    M = np.full((8, len(sources)), COST_MAX)
    H = np.empty((3, 3))
    for i, h in enumerate(hyps):
        X = backproject(ref_cam, px, h.depth)
        for j, (img, cam) in enumerate(sources):
            KR, Kt = parts[j]
            if homography_kernel(KR, Kt, K_ref_inv, h.normal, X, H):
                M[i, j] = ncc_warped(padded[j], 0, img.height, img.width, H, x, y, n, dxs, dys, ws, ps, mp, vp, reach)
    return M
