"""Per-reference-image PatchMatch driver.

The state of every pixel is a plane hypothesis (depth, normal), its
aggregated cost, the per-view costs of that hypothesis, and the view
selection history of the previous iteration. Red and black pixels are
updated in alternating phases; inside a phase pixels are independent, and
every random draw comes from a stream keyed by ``(seed, x, y, t)``, so the
result is identical for any thread count.
"""

from __future__ import annotations

import logging
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
from numba import njit

from ._random import next_uniform, stream_key
from .cost import COST_MAX, MatchWindow, ncc_kernel, pad_image, prepare_ref_patch
from .geometry import homography_parts, perturb_depth, perturb_normal, sample_facing_normal
from .propagation import CheckerColor, reanchor_kernel, region_best_kernel, region_table
from .viewsel import (
    ViewSelParams,
    aggregate_row,
    classify_kernel,
    importance_kernel,
    modified_kernel,
    select_best_kernel,
    tau_mc_value,
)

logger = logging.getLogger(__name__)

SCHEMES = ("acp", "scp", "none")


class SceneTooSmall(ValueError):
    """The reference image has no source views to match against."""


@dataclass(frozen=True)
class SolverConfig:
    iterations: int = 6
    viewsel: ViewSelParams = field(default_factory=ViewSelParams)
    window: MatchWindow = field(default_factory=MatchWindow)
    sigma_I: float = 3.0
    sigma_x: float = 30.0
    bisection_iters: int = 3
    depth_frac: float = 0.02
    angle_max: float = 0.1
    seed: int = 0
    scheme: str = "acp"
    # "joint": multi-hypothesis view selection; "uniform": fixed equal weights
    view_selection: str = "joint"
    # what to do when no view gets weight: "cost_max" or "uniform"
    empty_selection: str = "cost_max"
    threads: Optional[int] = None

    def __post_init__(self):
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if not (0 <= self.bisection_iters <= self.iterations):
            raise ValueError("bisection_iters must lie in [0, iterations]")
        if self.scheme not in SCHEMES:
            raise ValueError(f"scheme must be one of {SCHEMES}")
        if self.view_selection not in ("joint", "uniform"):
            raise ValueError("view_selection must be 'joint' or 'uniform'")
        if self.empty_selection not in ("cost_max", "uniform"):
            raise ValueError("empty_selection must be 'cost_max' or 'uniform'")
        if self.threads is not None and self.threads < 1:
            raise ValueError("threads must be >= 1")


@dataclass
class DepthNormalMap:
    depth: np.ndarray
    normal: np.ndarray
    best_cost: np.ndarray
    valid: np.ndarray

    @property
    def width(self) -> int:
        return self.depth.shape[1]

    @property
    def height(self) -> int:
        return self.depth.shape[0]


@dataclass
class SolverState:
    """Per-pixel PatchMatch state plus the packed scene arrays the kernels read."""

    ref: np.ndarray
    srcs: np.ndarray  # (N, Hmax + 2, Wmax + 2) edge-padded source lumas
    dims: np.ndarray  # (N, 2) unpadded source height, width
    KR: np.ndarray
    Kt: np.ndarray
    K_inv: np.ndarray
    depth_min: float
    depth_max: float
    depth: np.ndarray
    normal: np.ndarray
    cost: np.ndarray
    view_costs: np.ndarray
    prev_sel: np.ndarray
    prev_v: np.ndarray

    @property
    def n_views(self) -> int:
        return self.srcs.shape[0]

    def to_map(self) -> DepthNormalMap:
        return DepthNormalMap(self.depth.copy(), self.normal.copy(), self.cost.copy(), self.cost < COST_MAX)


# ---------------------------------------------------------------- kernels


@njit(cache=True, inline="always")
def _ray(K_inv, x, y, r):
    for i in range(3):
        r[i] = K_inv[i, 0] * (x + 0.5) + K_inv[i, 1] * (y + 0.5) + K_inv[i, 2]


@njit(cache=True, inline="always")
def _hyp_cost(srcs, dims, reach, j, KR, Kt, K_inv, r, d, n0, n1, n2, x, y, np_, dxs, dys, ws, ps, mp, vp):
    """Cost of plane (depth ``d`` along ray ``r``, normal ``n``) against source ``j``.

    Builds ``H = KR + Kt (K_inv^T n)^T / dp`` in registers; no array views.
    """
    s = d / r[2]
    dp = n0 * r[0] * s + n1 * r[1] * s + n2 * d
    if abs(dp) < 1e-12:
        return COST_MAX
    m0 = (K_inv[0, 0] * n0 + K_inv[1, 0] * n1 + K_inv[2, 0] * n2) / dp
    m1 = (K_inv[0, 1] * n0 + K_inv[1, 1] * n1 + K_inv[2, 1] * n2) / dp
    m2 = (K_inv[0, 2] * n0 + K_inv[1, 2] * n1 + K_inv[2, 2] * n2) / dp
    t0 = Kt[j, 0]
    t1 = Kt[j, 1]
    t2 = Kt[j, 2]
    return ncc_kernel(
        srcs, j, dims[j, 0], dims[j, 1],
        KR[j, 0, 0] + t0 * m0, KR[j, 0, 1] + t0 * m1, KR[j, 0, 2] + t0 * m2,
        KR[j, 1, 0] + t1 * m0, KR[j, 1, 1] + t1 * m1, KR[j, 1, 2] + t1 * m2,
        KR[j, 2, 0] + t2 * m0, KR[j, 2, 1] + t2 * m1, KR[j, 2, 2] + t2 * m2,
        x, y, np_, dxs, dys, ws, ps, mp, vp, reach,
    )


@njit(cache=True)
def _unit(r, u):
    m = math.sqrt(r[0] * r[0] + r[1] * r[1] + r[2] * r[2])
    u[0] = r[0] / m
    u[1] = r[1] / m
    u[2] = r[2] / m


@njit(cache=True)
def bisection_candidates(d, t, dmin, dmax):
    """Midpoints of [lo, d] and [d, hi] for an interval of width range / 2**t around d."""
    half = 0.5 * (dmax - dmin) / (2.0**t)
    lo = max(dmin, d - half)
    hi = min(dmax, d + half)
    return 0.5 * (lo + d), 0.5 * (d + hi)


@njit(cache=True)
def refine_pixel(
    srcs, dims, reach, KR, Kt, K_inv, dmin, dmax, x, y, t, d, n, c, psimod, total,
    bisection_iters, depth_frac, angle_max, seed,
    np_, dxs, dys, ws, ps, mp, vp, cand_d, cand_n, cand_costs, r, u,
):
    """Try refinement candidates around ``(d, n)`` with fixed view weights.

    Returns the index of the winning candidate (-1 keeps the current one)
    and its aggregated cost. Candidate per-view costs are NaN where the view
    carries no weight.
    """
    nv = psimod.shape[0]
    b1, b2 = bisection_candidates(d, t, dmin, dmax)
    nc = 0
    cand_d[0] = b1
    cand_d[1] = b2
    for k in range(3):
        cand_n[0, k] = n[k]
        cand_n[1, k] = n[k]
    nc = 2
    if t >= bisection_iters:
        state = np.empty(1, np.uint64)
        state[0] = stream_key(seed, x, y, t)
        d_rand = dmin + (dmax - dmin) * next_uniform(state)
        n_rand = sample_facing_normal(state, u)
        d_pert = perturb_depth(state, d, depth_frac, dmin, dmax)
        n_pert = perturb_normal(state, n, u, angle_max)
        # (d_rand, n), (d, n_rand), (d_rand, n_rand), (d_pert, n), (d, n_pert), (d_pert, n_pert)
        cand_d[2] = d_rand
        cand_d[3] = d
        cand_d[4] = d_rand
        cand_d[5] = d_pert
        cand_d[6] = d
        cand_d[7] = d_pert
        for k in range(3):
            cand_n[2, k] = n[k]
            cand_n[3, k] = n_rand[k]
            cand_n[4, k] = n_rand[k]
            cand_n[5, k] = n[k]
            cand_n[6, k] = n_pert[k]
            cand_n[7, k] = n_pert[k]
        nc = 8
    best = -1
    best_c = c
    for i in range(nc):
        acc = 0.0
        for j in range(nv):
            if psimod[j] > 0.0:
                m = _hyp_cost(srcs, dims, reach, j, KR, Kt, K_inv, r, cand_d[i], cand_n[i, 0], cand_n[i, 1], cand_n[i, 2], x, y, np_, dxs, dys, ws, ps, mp, vp)
                cand_costs[i, j] = m
                acc += psimod[j] * m
            else:
                cand_costs[i, j] = np.nan
        agg = acc / total
        if agg < best_c:
            best = i
            best_c = agg
    return best, best_c


@njit(cache=True, nogil=True)
def _half_iteration_rows(
    y0, ystep, color, t, srcs, dims, reach, ref, KR, Kt, K_inv, dmin, dmax,
    depth, normal, cost, view_costs, prev_sel, prev_v,
    table, counts, offs, sigma_I, sigma_x,
    tau, n1, n2, tau_up, beta, k, fallback_all, uniform_views, empty_uniform,
    bisection_iters, depth_frac, angle_max, seed,
):
    h, w = depth.shape
    nv = KR.shape[0]
    m = offs.shape[0] * offs.shape[0]
    dxs = np.empty(m)
    dys = np.empty(m)
    ws = np.empty(m)
    ps = np.empty(m)
    for y in range(y0, h, ystep):
        hyp_d = np.empty(8)
        hyp_n = np.empty((8, 3))
        M = np.empty((8, nv))
        sel = np.empty(nv, np.bool_)
        psi = np.empty(nv)
        psimod = np.empty(nv)
        finals = np.empty(9)
        cand_d = np.empty(8)
        cand_n = np.empty((8, 3))
        cand_costs = np.empty((8, nv))
        r = np.empty(3)
        u = np.empty(3)
        n_tmp = np.empty(3)
        for x in range((y + color) & 1, w, 2):
            np_, mp, vp = prepare_ref_patch(ref, x, y, offs, sigma_I, sigma_x, dxs, dys, ws, ps)
            _ray(K_inv, x, y, r)
            _unit(r, u)

            # lazily complete costs of the current hypothesis
            vc = view_costs[y, x]
            for j in range(nv):
                if np.isnan(vc[j]):
                    vc[j] = _hyp_cost(srcs, dims, reach, j, KR, Kt, K_inv, r, depth[y, x], normal[y, x, 0], normal[y, x, 1], normal[y, x, 2], x, y, np_, dxs, dys, ws, ps, mp, vp)

            for i in range(8):
                idx = region_best_kernel(cost, x, y, table, counts, i)
                if idx < 0:
                    hyp_d[i] = depth[y, x]
                    for q in range(3):
                        hyp_n[i, q] = normal[y, x, q]
                    for j in range(nv):
                        M[i, j] = vc[j]
                    continue
                sy = idx // w
                sx = idx - sy * w
                hyp_d[i] = reanchor_kernel(
                    K_inv, x, y, sx, sy, depth[sy, sx], normal[sy, sx, 0], normal[sy, sx, 1], normal[sy, sx, 2], dmin, dmax, n_tmp
                )
                for q in range(3):
                    hyp_n[i, q] = n_tmp[q]
                for j in range(nv):
                    M[i, j] = _hyp_cost(srcs, dims, reach, j, KR, Kt, K_inv, r, hyp_d[i], hyp_n[i, 0], hyp_n[i, 1], hyp_n[i, 2], x, y, np_, dxs, dys, ws, ps, mp, vp)

            # view selection
            v_t = -1
            if uniform_views:
                for j in range(nv):
                    sel[j] = True
                    psimod[j] = 1.0
                total = float(nv)
            else:
                classify_kernel(M, tau, n1, n2, tau_up, sel)
                v_t = importance_kernel(M, sel, beta, k, psi)
                pv = prev_v[y, x]
                in_prev = pv >= 0 and ((prev_sel[y, x] >> pv) & 1) == 1
                total = modified_kernel(psi, sel, pv, in_prev, fallback_all, psimod)
                if total <= 0.0 and empty_uniform:
                    for j in range(nv):
                        psimod[j] = 1.0
                    total = float(nv)

            if total > 0.0:
                for i in range(8):
                    acc = 0.0
                    for j in range(nv):
                        if psimod[j] > 0.0:
                            acc += psimod[j] * M[i, j]
                    finals[i] = acc / total
                finals[8] = aggregate_row(vc, psimod, total)
            else:
                for i in range(9):
                    finals[i] = COST_MAX
            best = select_best_kernel(finals)
            c = finals[best]
            if best < 8:
                d = hyp_d[best]
                for q in range(3):
                    n_tmp[q] = hyp_n[best, q]
                for j in range(nv):
                    vc[j] = M[best, j]
            else:
                d = depth[y, x]
                for q in range(3):
                    n_tmp[q] = normal[y, x, q]

            if total > 0.0:
                ri, rc = refine_pixel(
                    srcs, dims, reach, KR, Kt, K_inv, dmin, dmax, x, y, t, d, n_tmp, c, psimod, total,
                    bisection_iters, depth_frac, angle_max, seed,
                    np_, dxs, dys, ws, ps, mp, vp, cand_d, cand_n, cand_costs, r, u,
                )
                if ri >= 0:
                    d = cand_d[ri]
                    for q in range(3):
                        n_tmp[q] = cand_n[ri, q]
                    for j in range(nv):
                        vc[j] = cand_costs[ri, j]
                    c = rc

            depth[y, x] = d
            for q in range(3):
                normal[y, x, q] = n_tmp[q]
            cost[y, x] = c
            mask = 0
            for j in range(nv):
                if sel[j]:
                    mask |= 1 << j
            prev_sel[y, x] = mask
            prev_v[y, x] = v_t


@njit(cache=True, nogil=True)
def _initialize_rows(y0, ystep, srcs, dims, reach, ref, KR, Kt, K_inv, dmin, dmax, depth, normal, cost, view_costs, offs, sigma_I, sigma_x, seed):
    h, w = depth.shape
    nv = KR.shape[0]
    m = offs.shape[0] * offs.shape[0]
    for y in range(y0, h, ystep):
        dxs = np.empty(m)
        dys = np.empty(m)
        ws = np.empty(m)
        ps = np.empty(m)
        r = np.empty(3)
        u = np.empty(3)
        state = np.empty(1, np.uint64)
        for x in range(w):
            state[0] = stream_key(seed, x, y, -1)
            _ray(K_inv, x, y, r)
            _unit(r, u)
            d = dmin + (dmax - dmin) * next_uniform(state)
            n = sample_facing_normal(state, u)
            depth[y, x] = d
            for q in range(3):
                normal[y, x, q] = n[q]
            np_, mp, vp = prepare_ref_patch(ref, x, y, offs, sigma_I, sigma_x, dxs, dys, ws, ps)
            acc = 0.0
            for j in range(nv):
                c = _hyp_cost(srcs, dims, reach, j, KR, Kt, K_inv, r, d, n[0], n[1], n[2], x, y, np_, dxs, dys, ws, ps, mp, vp)
                view_costs[y, x, j] = c
                acc += c
            cost[y, x] = acc / nv


@njit(cache=True)
def _median_kernel(depth, valid, out):
    h, w = depth.shape
    buf = np.empty(16)
    for y in range(h):
        for x in range(w):
            if not valid[y, x]:
                out[y, x] = depth[y, x]
                continue
            m = 0
            for oy in range(-1, 3):
                yy = y + oy
                if yy < 0 or yy >= h:
                    continue
                for ox in range(-1, 3):
                    xx = x + ox
                    if xx < 0 or xx >= w or not valid[yy, xx]:
                        continue
                    buf[m] = depth[yy, xx]
                    m += 1
            sub = np.sort(buf[:m])
            out[y, x] = sub[(m - 1) // 2]


# ---------------------------------------------------------------- driver


def resolve_threads(threads: Optional[int]) -> int:
    """Worker count for ``threads`` (None means one per CPU)."""
    if threads is None:
        return max(1, os.cpu_count() or 1)
    if threads < 1:
        raise ValueError("threads must be >= 1")
    return int(threads)


def _run_rows(kernel, height: int, threads: Optional[int], *args) -> None:
    """Run ``kernel(y0, ystep, *args)`` on interleaved row sets, one per worker.

    The kernels release the GIL; rows touched by different workers are
    disjoint, so the result does not depend on the worker count.
    """
    n = min(resolve_threads(threads), max(1, height))
    if n == 1:
        kernel(0, 1, *args)
        return
    with ThreadPoolExecutor(max_workers=n) as pool:
        for f in [pool.submit(kernel, i, n, *args) for i in range(n)]:
            f.result()


def _stack_sources(lumas) -> np.ndarray:
    padded = [pad_image(luma) for luma in lumas]
    hm = max(p.shape[0] for p in padded)
    wm = max(p.shape[1] for p in padded)
    out = np.zeros((len(padded), hm, wm))
    for i, p in enumerate(padded):
        out[i, : p.shape[0], : p.shape[1]] = p
    return out


def initialize(scene, ref_id: int, cfg: SolverConfig = SolverConfig()) -> SolverState:
    """Random hypotheses everywhere; costs averaged uniformly over all source views."""
    ref_view = scene.views[ref_id]
    sources = [v for i, v in enumerate(scene.views) if i != ref_id]
    if not sources:
        raise SceneTooSmall("need at least one source view besides the reference")
    if len(sources) > 63:
        raise ValueError("at most 63 source views are supported")
    cam = ref_view.cam
    parts = [homography_parts(cam, v.cam) for v in sources]
    h, w = ref_view.luma.shape
    nv = len(sources)
    state = SolverState(
        ref=np.ascontiguousarray(ref_view.luma, dtype=np.float64),
        srcs=_stack_sources([v.luma for v in sources]),
        dims=np.array([v.luma.shape for v in sources], dtype=np.int64),
        KR=np.ascontiguousarray([p[0] for p in parts]),
        Kt=np.ascontiguousarray([p[1] for p in parts]),
        K_inv=np.ascontiguousarray(cam.K_inv),
        depth_min=cam.depth_min,
        depth_max=cam.depth_max,
        depth=np.empty((h, w)),
        normal=np.empty((h, w, 3)),
        cost=np.empty((h, w)),
        view_costs=np.empty((h, w, nv)),
        prev_sel=np.zeros((h, w), np.int64),
        prev_v=np.full((h, w), -1, np.int64),
    )
    _run_rows(
        _initialize_rows, h, cfg.threads,
        state.srcs, state.dims, float(cfg.window.offsets().max()), state.ref, state.KR, state.Kt, state.K_inv, state.depth_min, state.depth_max,
        state.depth, state.normal, state.cost, state.view_costs,
        cfg.window.offsets(), cfg.sigma_I, cfg.sigma_x, cfg.seed,
    )
    return state


def half_iteration(state: SolverState, color: CheckerColor, t: int, cfg: SolverConfig = SolverConfig()) -> None:
    """Update every pixel of ``color`` in place from the opposite color's state."""
    if not 0 <= t < cfg.iterations:
        raise ValueError("iteration index out of range")
    p = cfg.viewsel
    table, counts = region_table(cfg.scheme)
    _run_rows(
        _half_iteration_rows, state.depth.shape[0], cfg.threads,
        int(color), int(t), state.srcs, state.dims, float(cfg.window.offsets().max()), state.ref, state.KR, state.Kt, state.K_inv,
        state.depth_min, state.depth_max,
        state.depth, state.normal, state.cost, state.view_costs, state.prev_sel, state.prev_v,
        table, counts, cfg.window.offsets(), cfg.sigma_I, cfg.sigma_x,
        tau_mc_value(float(t), p.tau_mc_init, p.alpha), p.n1, p.n2, p.tau_up, p.beta, p.k,
        p.fallback_all_unselected, cfg.view_selection == "uniform", cfg.empty_selection == "uniform",
        cfg.bisection_iters, cfg.depth_frac, cfg.angle_max, cfg.seed,
    )


def median_filter_4x4(dmap: DepthNormalMap) -> DepthNormalMap:
    """Lower median of valid depths over offsets {-1, 0, 1, 2}^2; normals untouched."""
    out = np.empty_like(dmap.depth, dtype=np.float64)
    _median_kernel(np.ascontiguousarray(dmap.depth, dtype=np.float64), np.ascontiguousarray(dmap.valid), out)
    return DepthNormalMap(out, dmap.normal.copy(), dmap.best_cost.copy(), dmap.valid.copy())


def estimate_depth_map(
    scene,
    ref_id: int,
    cfg: SolverConfig = SolverConfig(),
    on_iteration: Optional[Callable[[int, SolverState], None]] = None,
) -> DepthNormalMap:
    """Full PatchMatch run for one reference image.

    ``on_iteration(t, state)`` is called after each full red+black iteration
    with the raw (unfiltered) state.
    """
    state = initialize(scene, ref_id, cfg)
    for t in range(cfg.iterations):
        half_iteration(state, CheckerColor.RED, t, cfg)
        half_iteration(state, CheckerColor.BLACK, t, cfg)
        if on_iteration is not None:
            on_iteration(t, state)
    return median_filter_4x4(state.to_map())
