"""``patchmvs`` command line: synth, estimate, fuse and eval.

Exit codes: 0 success, 1 input/output errors, 2 malformed arguments or config.
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from dataclasses import fields, replace
from pathlib import Path
from typing import Optional

import numpy as np

from . import io as mvsio
from .cost import COST_MAX, MatchWindow
from .evaluate import (
    TABLE_THRESHOLDS,
    EmptyCloud,
    convergence_curve,
    curve_csv,
    depth_error_stats,
    format_table,
)
from .fusion import FusionParams, fuse
from .solver import DepthNormalMap, SolverConfig, estimate_depth_map
from .viewsel import ViewSelParams


class UsageError(ValueError):
    """Bad arguments or config contents (exit code 2)."""


INPUT_ERRORS = (
    OSError,
    mvsio.MalformedCamera,
    mvsio.MalformedHeader,
    mvsio.DimensionMismatch,
    mvsio.DegenerateSpec,
    json.JSONDecodeError,
    EmptyCloud,
)

_SOLVER_KEYS = {f.name for f in fields(SolverConfig)} - {"viewsel", "window"}
_VIEWSEL_KEYS = {f.name for f in fields(ViewSelParams)}
_WINDOW_KEYS = {"window_radius": "radius", "window_skip": "skip"}
CONFIG_KEYS = sorted(_SOLVER_KEYS | _VIEWSEL_KEYS | set(_WINDOW_KEYS))


def load_config(path, base: SolverConfig = SolverConfig()) -> SolverConfig:
    """Apply a flat JSON object of overrides to ``base``; unknown keys are rejected."""
    data = json.loads(Path(path).read_text())
    if not isinstance(data, dict):
        raise UsageError(f"{path}: config must be a JSON object")
    return config_from_dict(data, base, str(path))


def config_from_dict(data: dict, base: SolverConfig = SolverConfig(), source: str = "config") -> SolverConfig:
    solver, viewsel, window = {}, {}, {}
    for key, value in data.items():
        if isinstance(value, (dict, list)) or value is None:
            raise UsageError(f"{source}: value of {key!r} must be a number, string or boolean")
        if key in _SOLVER_KEYS:
            solver[key] = value
        elif key in _VIEWSEL_KEYS:
            viewsel[key] = value
        elif key in _WINDOW_KEYS:
            window[_WINDOW_KEYS[key]] = value
        else:
            raise UsageError(f"{source}: unknown config key {key!r}")
    try:
        return replace(
            base,
            viewsel=replace(base.viewsel, **viewsel),
            window=replace(base.window, **window),
            **solver,
        )
    except (TypeError, ValueError) as exc:
        raise UsageError(f"{source}: {exc}") from None


def _add_estimate(sub):
    p = sub.add_parser("estimate", help="estimate a depth/normal map for every image")
    p.add_argument("--scene", required=True, type=Path)
    p.add_argument("--out", required=True, type=Path)
    p.add_argument("--iters", type=int)
    p.add_argument("--downsample", type=float, default=1.0)
    p.add_argument("--scheme", choices=("acp", "scp"))
    p.add_argument("--seed", type=int)
    p.add_argument("--threads", type=int)
    p.add_argument("--config", type=Path)
    p.set_defaults(func=cmd_estimate)


def _add_fuse(sub):
    d = FusionParams()
    p = sub.add_parser("fuse", help="fuse depth maps into a PLY point cloud")
    p.add_argument("--scene", required=True, type=Path)
    p.add_argument("--maps", required=True, type=Path)
    p.add_argument("--out", required=True, type=Path)
    p.add_argument("--frel", type=float, default=d.f_rel_depth)
    p.add_argument("--fang", type=float, default=d.f_ang)
    p.add_argument("--fcon", type=int, default=d.f_con)
    p.set_defaults(func=cmd_fuse)


def _add_synth(sub):
    p = sub.add_parser("synth", help="render a synthetic scene with ground truth")
    p.add_argument("--spec", type=Path, help="scene JSON (default: bundled reference scene)")
    p.add_argument("--out", required=True, type=Path)
    p.set_defaults(func=cmd_synth)


def _add_eval(sub):
    p = sub.add_parser("eval", help="compare estimated depth maps against ground truth")
    p.add_argument("--est", required=True, type=Path)
    p.add_argument("--gt", required=True, type=Path, help="gt/ directory or a scene directory containing it")
    p.add_argument("--curve", type=Path, help="also write ACP/SCP convergence CSV (needs a scene directory)")
    p.add_argument("--iters", type=int, default=SolverConfig().iterations)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--threads", type=int)
    p.add_argument("--ref", default=None, help="reference image name for the curve (default: first)")
    p.set_defaults(func=cmd_eval)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="patchmvs", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    _add_synth(sub)
    _add_estimate(sub)
    _add_fuse(sub)
    _add_eval(sub)
    return parser


def _solver_config(args) -> SolverConfig:
    cfg = SolverConfig()
    if args.config is not None:
        cfg = load_config(args.config, cfg)
    overrides = {k: v for k, v in (("iterations", args.iters), ("scheme", args.scheme), ("seed", args.seed), ("threads", args.threads)) if v is not None}
    try:
        if args.iters is not None and args.iters < cfg.bisection_iters:
            overrides["bisection_iters"] = args.iters
        return replace(cfg, **overrides)
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def cmd_estimate(args) -> int:
    cfg = _solver_config(args)
    if not 0 < args.downsample <= 1:
        raise UsageError("--downsample must lie in (0, 1]")
    scene = mvsio.read_scene(args.scene).downsampled(args.downsample)
    args.out.mkdir(parents=True, exist_ok=True)
    for i, view in enumerate(scene.views):
        t0 = time.perf_counter()
        m = estimate_depth_map(scene, i, cfg)
        dt = time.perf_counter() - t0
        mvsio.write_pfm(args.out / f"depth_{view.name}.pfm", m.depth)
        mvsio.write_pfm(args.out / f"normal_{view.name}.pfm", m.normal)
        mvsio.write_pfm(args.out / f"cost_{view.name}.pfm", m.best_cost)
        print(f"{view.name}: {view.cam.width}x{view.cam.height} {dt:.2f} s, {m.valid.mean() * 100:.1f}% valid")
    return 0


def read_maps(maps_dir: Path, names) -> list[DepthNormalMap]:
    out = []
    for name in names:
        paths = [maps_dir / f"{kind}_{name}.pfm" for kind in ("depth", "normal", "cost")]
        for p in paths[:2]:
            if not p.is_file():
                raise mvsio.MissingFile(f"missing map {p}")
        depth = mvsio.read_pfm(paths[0]).astype(np.float64)
        normal = mvsio.read_pfm(paths[1]).astype(np.float64)
        cost = mvsio.read_pfm(paths[2]).astype(np.float64) if paths[2].is_file() else np.zeros_like(depth)
        if normal.shape != depth.shape + (3,) or cost.shape != depth.shape:
            raise mvsio.DimensionMismatch(f"maps for {name} have inconsistent shapes")
        out.append(DepthNormalMap(depth, normal, cost, (cost < COST_MAX) & (depth > 0)))
    return out


def _match_map_size(scene, maps):
    """Downsample the scene when the maps were estimated at reduced resolution."""
    v0, m0 = scene.views[0], maps[0]
    if m0.depth.shape == v0.luma.shape:
        return scene
    factor = m0.depth.shape[1] / v0.cam.width
    scaled = scene.downsampled(factor)
    if scaled.views[0].luma.shape != m0.depth.shape:
        raise mvsio.DimensionMismatch(f"maps {m0.depth.shape} do not match images {v0.luma.shape}")
    return scaled


def cmd_fuse(args) -> int:
    try:
        params = FusionParams(f_rel_depth=args.frel, f_ang=args.fang, f_con=args.fcon)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    scene = mvsio.read_scene(args.scene)
    maps = read_maps(args.maps, [v.name for v in scene.views])
    scene = _match_map_size(scene, maps)
    cloud = fuse(scene, maps, params)
    args.out.parent.mkdir(parents=True, exist_ok=True)
    mvsio.write_ply(args.out, cloud.positions, cloud.normals, cloud.colors)
    print(f"{len(cloud)} points")
    hist = cloud.histogram(len(scene.views))
    for s in range(params.f_con, len(scene.views)):
        print(f"  support {s}: {hist[s]}")
    if len(cloud) == 0:
        mvsio.warn("fusion produced no points")
    return 0


def cmd_synth(args) -> int:
    spec = mvsio.reference_spec() if args.spec is None else mvsio.SynthSpec.load(args.spec)
    scene, _ = mvsio.synth_scene(spec, args.out)
    print(f"wrote {len(scene)} views to {args.out}")
    return 0


def _gt_dir(path: Path) -> tuple[Path, Optional[Path]]:
    if (path / "gt").is_dir():
        return path / "gt", path
    return path, (path.parent if (path.parent / "images").is_dir() else None)


def cmd_eval(args) -> int:
    gt_dir, scene_dir = _gt_dir(args.gt)
    gt = mvsio.read_ground_truth(gt_dir)
    rows = []
    for name, (gt_depth, _) in gt.items():
        dpath = args.est / f"depth_{name}.pfm"
        if not dpath.is_file():
            continue
        depth = mvsio.read_pfm(dpath).astype(np.float64)
        cpath = args.est / f"cost_{name}.pfm"
        valid = (mvsio.read_pfm(cpath) < COST_MAX) if cpath.is_file() else np.ones(depth.shape, bool)
        valid &= depth > 0
        rows.append((name, depth_error_stats(depth, valid, gt_depth, TABLE_THRESHOLDS, relative=True)))
    if not rows:
        raise mvsio.MissingFile(f"no estimated depth maps in {args.est} match {gt_dir}")
    print(format_table(rows))
    if args.curve is not None:
        if scene_dir is None:
            raise UsageError("--curve needs --gt to point at a scene directory")
        scene = mvsio.read_scene(scene_dir)
        names = [v.name for v in scene.views]
        ref = names[0] if args.ref is None else args.ref
        if ref not in names or ref not in gt:
            raise UsageError(f"unknown reference image {ref!r}")
        cfg = SolverConfig(iterations=args.iters, seed=args.seed, threads=args.threads,
                           bisection_iters=min(SolverConfig().bisection_iters, args.iters))
        curve = []
        for scheme in ("acp", "scp"):
            curve += convergence_curve(scene, gt[ref][0], cfg, scheme, names.index(ref), TABLE_THRESHOLDS)
        args.curve.write_text(curve_csv(curve))
        print(f"wrote convergence curve to {args.curve}")
    return 0


def main(argv: Optional[list[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except INPUT_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
