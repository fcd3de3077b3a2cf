"""Scene directories, camera files, PFM/PLY serialization and synthetic scenes.

Scene layout::

    scene/images/NNNN.png
    scene/cams/NNNN.txt

Camera file (whitespace separated)::

    extrinsic
    r11 r12 r13 t1
    r21 r22 r23 t2
    r31 r32 r33 t3
    intrinsic
    fx  s   cx
    0   fy  cy
    0   0   1
    depth_min depth_max
    [width height]
"""

from __future__ import annotations

import json
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
from PIL import Image

from .geometry import CameraModel

IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg")


class MissingFile(FileNotFoundError):
    pass


class MalformedCamera(ValueError):
    pass


class DimensionMismatch(ValueError):
    pass


class MalformedHeader(ValueError):
    pass


class DegenerateSpec(ValueError):
    pass


def rgb_to_luma(rgb: np.ndarray) -> np.ndarray:
    rgb = np.asarray(rgb, dtype=np.float64)
    return np.clip(0.2126 * rgb[..., 0] + 0.7152 * rgb[..., 1] + 0.0722 * rgb[..., 2], 0.0, 1.0)


@dataclass
class View:
    name: str
    rgb: np.ndarray  # (H, W, 3) float in [0, 1]
    cam: CameraModel
    luma: np.ndarray = field(init=False)

    def __post_init__(self):
        self.rgb = np.asarray(self.rgb, dtype=np.float64)
        self.luma = rgb_to_luma(self.rgb)


@dataclass
class Scene:
    views: list[View]

    def __len__(self) -> int:
        return len(self.views)

    def downsampled(self, factor: float) -> "Scene":
        """Resize every image and its intrinsics by ``factor``."""
        if factor == 1.0:
            return self
        if not 0 < factor <= 1.0:
            raise ValueError("downsample factor must lie in (0, 1]")
        out = []
        for v in self.views:
            cam = v.cam.scaled(factor)
            img = Image.fromarray(np.round(v.rgb * 255).astype(np.uint8))
            img = img.resize((cam.width, cam.height), Image.Resampling.BOX)
            out.append(View(v.name, np.asarray(img, dtype=np.float64) / 255.0, cam))
        return Scene(out)


# ---------------------------------------------------------------- cameras


def format_camera(cam: CameraModel) -> str:
    lines = ["extrinsic"]
    for i in range(3):
        lines.append(" ".join(repr(float(v)) for v in (*cam.R[i], cam.t[i])))
    lines.append("intrinsic")
    for i in range(3):
        lines.append(" ".join(repr(float(v)) for v in cam.K[i]))
    lines.append(f"{cam.depth_min!r} {cam.depth_max!r}")
    lines.append(f"{cam.width} {cam.height}")
    return "\n".join(lines) + "\n"


def write_camera(path, cam: CameraModel) -> None:
    Path(path).write_text(format_camera(cam))


def parse_camera(text: str, width: int, height: int, source: str = "<camera>") -> CameraModel:
    """Parse a camera file body; ``width``/``height`` come from the image."""
    lines = [ln.split() for ln in text.splitlines()]
    lines = [ln for ln in lines if ln]

    def numbers(idx: int, count: int) -> list[float]:
        if idx >= len(lines):
            raise MalformedCamera(f"{source}: missing line {idx + 1}")
        row = lines[idx]
        if len(row) != count:
            raise MalformedCamera(f"{source}: line {idx + 1}: expected {count} fields, got {len(row)}")
        try:
            return [float(v) for v in row]
        except ValueError as exc:
            raise MalformedCamera(f"{source}: line {idx + 1}: {exc}") from None

    if not lines or lines[0] != ["extrinsic"]:
        raise MalformedCamera(f"{source}: line 1: expected 'extrinsic'")
    Rt = np.array([numbers(i, 4) for i in (1, 2, 3)])
    if len(lines) < 5 or lines[4] != ["intrinsic"]:
        raise MalformedCamera(f"{source}: line 5: expected 'intrinsic'")
    K = np.array([numbers(i, 3) for i in (5, 6, 7)])
    dmin, dmax = numbers(8, 2)
    if len(lines) > 9:
        w, h = numbers(9, 2)
        if (int(w), int(h)) != (width, height):
            raise DimensionMismatch(f"{source}: camera is {int(w)}x{int(h)} but image is {width}x{height}")
    R = Rt[:, :3]
    if np.abs(R.T @ R - np.eye(3)).max() > 1e-6:
        raise MalformedCamera(f"{source}: lines 2-4: rotation is not orthonormal")
    cam = CameraModel(K, R, Rt[:, 3], width, height, dmin, dmax)
    try:
        cam.validate(tol=1e-6)
    except ValueError as exc:
        raise MalformedCamera(f"{source}: {exc}") from None
    return cam


def read_image(path) -> np.ndarray:
    with Image.open(path) as img:
        return np.asarray(img.convert("RGB"), dtype=np.float64) / 255.0


def write_image(path, rgb: np.ndarray) -> None:
    Image.fromarray(np.round(np.clip(rgb, 0, 1) * 255).astype(np.uint8)).save(path)


def read_scene(path) -> Scene:
    root = Path(path)
    img_dir, cam_dir = root / "images", root / "cams"
    for d in (img_dir, cam_dir):
        if not d.is_dir():
            raise MissingFile(f"missing directory {d}")
    images = sorted(p for p in img_dir.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)
    views = []
    for img_path in images:
        cam_path = cam_dir / f"{img_path.stem}.txt"
        if not cam_path.is_file():
            raise MissingFile(f"missing camera file {cam_path}")
        rgb = read_image(img_path)
        cam = parse_camera(cam_path.read_text(), rgb.shape[1], rgb.shape[0], str(cam_path))
        views.append(View(img_path.stem, rgb, cam))
    if len(views) < 2:
        raise MissingFile(f"{img_dir}: a scene needs at least 2 images, found {len(views)}")
    return Scene(views)


def write_scene(path, scene: Scene) -> None:
    root = Path(path)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "cams").mkdir(parents=True, exist_ok=True)
    for v in scene.views:
        write_image(root / "images" / f"{v.name}.png", v.rgb)
        write_camera(root / "cams" / f"{v.name}.txt", v.cam)


# ---------------------------------------------------------------- PFM


def write_pfm(path, data: np.ndarray) -> Path:
    """Write a 1- or 3-channel float map (little-endian, rows bottom-to-top)."""
    arr = np.asarray(data)
    if arr.ndim == 3 and arr.shape[2] == 1:
        arr = arr[..., 0]
    if arr.ndim == 2:
        tag = "Pf"
    elif arr.ndim == 3 and arr.shape[2] == 3:
        tag = "PF"
    else:
        raise ValueError(f"PFM needs shape (H, W) or (H, W, 3), got {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError("PFM data must be finite")
    h, w = arr.shape[:2]
    body = np.ascontiguousarray(np.flipud(arr.astype("<f4")))
    path = Path(path)
    with open(path, "wb") as fh:
        fh.write(f"{tag}\n{w} {h}\n-1.0\n".encode("ascii"))
        fh.write(body.tobytes())
    return path


def _header_token(fh) -> bytes:
    tok = b""
    while True:
        ch = fh.read(1)
        if not ch:
            break
        if ch.isspace():
            if tok:
                break
            continue
        tok += ch
    return tok


def read_pfm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        tag = _header_token(fh)
        if tag not in (b"Pf", b"PF"):
            raise MalformedHeader(f"{path}: bad PFM tag {tag!r}")
        try:
            w = int(_header_token(fh))
            h = int(_header_token(fh))
            scale = float(_header_token(fh))
        except ValueError:
            raise MalformedHeader(f"{path}: unreadable PFM dimensions/scale") from None
        if w <= 0 or h <= 0 or scale == 0:
            raise MalformedHeader(f"{path}: invalid PFM header values")
        channels = 3 if tag == b"PF" else 1
        dtype = "<f4" if scale < 0 else ">f4"
        raw = fh.read()
    count = w * h * channels
    if len(raw) < 4 * count:
        raise MalformedHeader(f"{path}: truncated PFM data")
    arr = np.frombuffer(raw[: 4 * count], dtype=dtype).astype(np.float32)
    shape = (h, w, 3) if channels == 3 else (h, w)
    return np.flipud(arr.reshape(shape)).copy()


# ---------------------------------------------------------------- PLY

PLY_DTYPE = np.dtype(
    [
        ("x", "<f4"), ("y", "<f4"), ("z", "<f4"),
        ("nx", "<f4"), ("ny", "<f4"), ("nz", "<f4"),
        ("red", "u1"), ("green", "u1"), ("blue", "u1"),
    ]
)


def write_ply(path, positions: np.ndarray, normals: np.ndarray, colors: np.ndarray) -> Path:
    positions = np.asarray(positions).reshape(-1, 3)
    n = len(positions)
    normals = np.asarray(normals).reshape(n, 3)
    colors = np.asarray(colors).reshape(n, 3)
    verts = np.empty(n, dtype=PLY_DTYPE)
    for i, k in enumerate("xyz"):
        verts[k] = positions[:, i]
        verts["n" + k] = normals[:, i]
    for i, k in enumerate(("red", "green", "blue")):
        verts[k] = colors[:, i]
    header = (
        "ply\nformat binary_little_endian 1.0\n"
        f"element vertex {n}\n"
        "property float x\nproperty float y\nproperty float z\n"
        "property float nx\nproperty float ny\nproperty float nz\n"
        "property uchar red\nproperty uchar green\nproperty uchar blue\n"
        "end_header\n"
    )
    path = Path(path)
    with open(path, "wb") as fh:
        fh.write(header.encode("ascii"))
        fh.write(verts.tobytes())
    return path


def read_ply(path) -> np.ndarray:
    """Read a PLY written by :func:`write_ply` into a structured array."""
    with open(path, "rb") as fh:
        if fh.readline().strip() != b"ply":
            raise MalformedHeader(f"{path}: not a PLY file")
        n = None
        props = []
        while True:
            line = fh.readline()
            if not line:
                raise MalformedHeader(f"{path}: missing end_header")
            parts = line.decode("ascii").split()
            if not parts:
                continue
            if parts[0] == "format" and parts[1] != "binary_little_endian":
                raise MalformedHeader(f"{path}: unsupported PLY format {parts[1]}")
            if parts[0] == "element" and parts[1] == "vertex":
                n = int(parts[2])
            elif parts[0] == "property":
                props.append(parts[-1])
            elif parts[0] == "end_header":
                break
        if n is None or props != list(PLY_DTYPE.names):
            raise MalformedHeader(f"{path}: unexpected PLY layout")
        data = fh.read(n * PLY_DTYPE.itemsize)
    if len(data) < n * PLY_DTYPE.itemsize:
        raise MalformedHeader(f"{path}: truncated PLY data")
    return np.frombuffer(data, dtype=PLY_DTYPE).copy()


# ---------------------------------------------------------------- synthetic scenes


@dataclass
class PlaneSpec:
    """Rectangular textured plane: ``center + a*u_axis + b*v_axis``, |a| <= half_size[0]."""

    center: np.ndarray
    normal: np.ndarray
    u_axis: np.ndarray
    half_size: tuple[float, float]
    texture_scale: float = 0.5

    def __post_init__(self):
        self.center = np.asarray(self.center, dtype=np.float64)
        n = np.asarray(self.normal, dtype=np.float64)
        nn = np.linalg.norm(n)
        if nn == 0:
            raise DegenerateSpec("plane normal must be nonzero")
        self.normal = n / nn
        u = np.asarray(self.u_axis, dtype=np.float64)
        u = u - (u @ self.normal) * self.normal
        if np.linalg.norm(u) < 1e-9:
            raise DegenerateSpec("plane u_axis must not be parallel to the normal")
        self.u_axis = u / np.linalg.norm(u)
        self.half_size = (float(self.half_size[0]), float(self.half_size[1]))
        if min(self.half_size) <= 0 or self.texture_scale <= 0:
            raise DegenerateSpec("plane half sizes and texture scale must be positive")

    @property
    def v_axis(self) -> np.ndarray:
        return np.cross(self.normal, self.u_axis)

    def corners(self) -> np.ndarray:
        a, b = self.half_size
        u, v = self.u_axis, self.v_axis
        return np.array([self.center + sa * a * u + sb * b * v for sa in (-1, 1) for sb in (-1, 1)])

    def to_json(self) -> dict:
        return {
            "center": self.center.tolist(),
            "normal": self.normal.tolist(),
            "u_axis": self.u_axis.tolist(),
            "half_size": list(self.half_size),
            "texture_scale": self.texture_scale,
        }


@dataclass
class SynthSpec:
    planes: list[PlaneSpec]
    positions: np.ndarray
    look_at: np.ndarray
    width: int = 640
    height: int = 480
    focal: float = 600.0
    depth_range: tuple[float, float] = (3.0, 12.0)
    texture_seed: int = 7
    supersample: int = 2

    @classmethod
    def from_dict(cls, d: dict) -> "SynthSpec":
        try:
            planes = [PlaneSpec(**p) for p in d["planes"]]
            cams = d["cameras"]
            return cls(
                planes=planes,
                positions=np.asarray(cams["positions"], dtype=np.float64),
                look_at=np.asarray(cams["look_at"], dtype=np.float64),
                width=int(d.get("width", 640)),
                height=int(d.get("height", 480)),
                focal=float(d.get("focal", 600.0)),
                depth_range=tuple(d.get("depth_range", (3.0, 12.0))),
                texture_seed=int(d.get("texture_seed", 7)),
                supersample=int(d.get("supersample", 2)),
            )
        except (KeyError, TypeError) as exc:
            raise DegenerateSpec(f"malformed scene spec: {exc}") from None

    @classmethod
    def load(cls, path) -> "SynthSpec":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def to_dict(self) -> dict:
        return {
            "width": self.width,
            "height": self.height,
            "focal": self.focal,
            "depth_range": list(self.depth_range),
            "texture_seed": self.texture_seed,
            "supersample": self.supersample,
            "cameras": {"positions": self.positions.tolist(), "look_at": self.look_at.tolist()},
            "planes": [p.to_json() for p in self.planes],
        }

    def scaled(self, factor: float) -> "SynthSpec":
        """Same scene rendered at ``factor`` times the resolution."""
        return SynthSpec(
            self.planes, self.positions, self.look_at,
            int(round(self.width * factor)), int(round(self.height * factor)), self.focal * factor,
            self.depth_range, self.texture_seed, self.supersample,
        )


def reference_spec() -> SynthSpec:
    """The bundled 3-plane, 5-view, 640x480 scene."""
    path = Path(__file__).with_name("data") / "reference_scene.json"
    return SynthSpec.load(path)


def look_at_camera(position, target, K, width, height, depth_range) -> CameraModel:
    c = np.asarray(position, dtype=np.float64)
    z = np.asarray(target, dtype=np.float64) - c
    z /= np.linalg.norm(z)
    down = np.array([0.0, 1.0, 0.0])
    x = np.cross(down, z)
    if np.linalg.norm(x) < 1e-9:
        raise DegenerateSpec("camera looks along the vertical axis")
    x /= np.linalg.norm(x)
    y = np.cross(z, x)
    R = np.stack([x, y, z])
    return CameraModel(K, R, -R @ c, width, height, *depth_range)


class _Perlin:
    """2-D gradient noise with a seeded permutation table."""

    def __init__(self, seed: int):
        rng = np.random.default_rng(seed)
        self.perm = np.tile(rng.permutation(256), 2)
        angles = rng.random(256) * 2 * np.pi
        self.grad = np.stack([np.cos(angles), np.sin(angles)], axis=1)

    def __call__(self, x: np.ndarray, y: np.ndarray) -> np.ndarray:
        xi = np.floor(x).astype(np.int64)
        yi = np.floor(y).astype(np.int64)
        xf = x - xi
        yf = y - yi
        xi &= 255
        yi &= 255

        def corner(dx, dy):
            g = self.grad[self.perm[self.perm[xi + dx] + ((yi + dy) & 255)]]
            return g[..., 0] * (xf - dx) + g[..., 1] * (yf - dy)

        fade = lambda t: t * t * t * (t * (t * 6 - 15) + 10)  # noqa: E731
        u, v = fade(xf), fade(yf)
        n00, n10, n01, n11 = corner(0, 0), corner(1, 0), corner(0, 1), corner(1, 1)
        top = n00 + u * (n10 - n00)
        bot = n01 + u * (n11 - n01)
        return top + v * (bot - top)


def _fractal(noise: _Perlin, s: np.ndarray, t: np.ndarray, octaves: int = 4) -> np.ndarray:
    total = np.zeros_like(s)
    amp, freq, norm = 1.0, 1.0, 0.0
    for _ in range(octaves):
        total += amp * noise(s * freq, t * freq)
        norm += amp
        amp *= 0.65
        freq *= 2.0
    return total / norm


def _texture(plane_index: int, plane: PlaneSpec, seed: int, s: np.ndarray, t: np.ndarray) -> np.ndarray:
    rgb = np.empty(s.shape + (3,))
    base = seed * 1000 + plane_index * 10
    for c in range(3):
        noise = _Perlin(base + c)
        val = _fractal(noise, s / plane.texture_scale + 17.3 * c, t / plane.texture_scale - 5.1 * c)
        rgb[..., c] = np.clip(0.5 + 1.6 * val, 0.0, 1.0)
    return rgb


def _trace(spec: SynthSpec, cam: CameraModel, px_x: np.ndarray, px_y: np.ndarray):
    """Nearest plane hit for rays through continuous pixel coordinates.

    Returns z-depth, plane index (-1 for no hit) and world hit points.
    """
    rays = np.stack([px_x, px_y, np.ones_like(px_x)], axis=-1) @ cam.K_inv.T  # camera frame, z = 1
    dirs_w = rays @ cam.R  # world frame, not normalized
    C = cam.center
    best_z = np.full(px_x.shape, np.inf)
    best_i = np.full(px_x.shape, -1, np.int64)
    for i, pl in enumerate(spec.planes):
        denom = dirs_w @ pl.normal
        with np.errstate(divide="ignore", invalid="ignore"):
            lam = ((pl.center - C) @ pl.normal) / denom
        hit = C + lam[..., None] * dirs_w
        rel = hit - pl.center
        inside = (
            (np.abs(rel @ pl.u_axis) <= pl.half_size[0])
            & (np.abs(rel @ pl.v_axis) <= pl.half_size[1])
            & (lam > 0)
            & np.isfinite(lam)
        )
        # z-depth equals lambda because the camera-frame ray has z = 1
        closer = inside & (lam < best_z)
        best_z = np.where(closer, lam, best_z)
        best_i = np.where(closer, i, best_i)
    hits = C + np.where(np.isfinite(best_z), best_z, 0.0)[..., None] * dirs_w
    return best_z, best_i, hits


def render_view(spec: SynthSpec, cam: CameraModel):
    """Render one view: RGB image, GT depth (0 = no surface), GT normals (camera frame)."""
    w, h, ss = cam.width, cam.height, spec.supersample
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    rgb = np.zeros((h, w, 3))
    background = np.full(3, 0.5)
    sub = (np.arange(ss) + 0.5) / ss
    for sy in sub:
        for sx in sub:
            z, idx, hits = _trace(spec, cam, xs + sx, ys + sy)
            sample = np.broadcast_to(background, (h, w, 3)).copy()
            for i, pl in enumerate(spec.planes):
                m = idx == i
                if not m.any():
                    continue
                rel = hits[m] - pl.center
                sample[m] = _texture(i, pl, spec.texture_seed, rel @ pl.u_axis, rel @ pl.v_axis)
            rgb += sample
    rgb /= ss * ss
    z, idx, _ = _trace(spec, cam, xs + 0.5, ys + 0.5)
    depth = np.where(idx >= 0, z, 0.0)
    normals = np.zeros((h, w, 3))
    ray_cam = np.stack([xs + 0.5, ys + 0.5, np.ones_like(xs)], axis=-1) @ cam.K_inv.T
    for i, pl in enumerate(spec.planes):
        m = idx == i
        n_cam = cam.R @ pl.normal
        facing = np.where((ray_cam[m] @ n_cam) > 0, -1.0, 1.0)
        normals[m] = facing[:, None] * n_cam
    return rgb, depth, normals


def synth_cameras(spec: SynthSpec) -> list[CameraModel]:
    K = np.array([[spec.focal, 0, spec.width / 2], [0, spec.focal, spec.height / 2], [0, 0, 1.0]])
    return [look_at_camera(p, spec.look_at, K, spec.width, spec.height, spec.depth_range) for p in spec.positions]


def _check_spec(spec: SynthSpec, cams: list[CameraModel]) -> None:
    if len(cams) < 2:
        raise DegenerateSpec("need at least 2 cameras")
    if not spec.planes:
        raise DegenerateSpec("need at least one plane")
    if not 0 < spec.depth_range[0] < spec.depth_range[1]:
        raise DegenerateSpec("depth range must satisfy 0 < min < max")
    for cam in cams:
        for i, pl in enumerate(spec.planes):
            if abs((cam.center - pl.center) @ pl.normal) < 1e-6:
                raise DegenerateSpec(f"camera center lies on plane {i}")


@dataclass
class GroundTruth:
    depth: list[np.ndarray]
    normal: list[np.ndarray]

    def valid(self, i: int) -> np.ndarray:
        return self.depth[i] > 0


def synth_scene(spec: SynthSpec | dict, out_dir=None) -> tuple[Scene, GroundTruth]:
    """Render a synthetic scene; when ``out_dir`` is given, also write it to disk
    together with ``gt/depth_NNNN.pfm``, ``gt/normal_NNNN.pfm`` and ``scene.json``."""
    if isinstance(spec, dict):
        spec = SynthSpec.from_dict(spec)
    cams = synth_cameras(spec)
    _check_spec(spec, cams)
    views, depths, normals = [], [], []
    for i, cam in enumerate(cams):
        rgb, depth, normal = render_view(spec, cam)
        # quantize exactly as the PNG round trip will
        rgb = np.round(np.clip(rgb, 0, 1) * 255) / 255.0
        views.append(View(f"{i:04d}", rgb, cam))
        depths.append(depth)
        normals.append(normal)
    scene = Scene(views)
    gt = GroundTruth(depths, normals)
    if out_dir is not None:
        root = Path(out_dir)
        write_scene(root, scene)
        (root / "gt").mkdir(parents=True, exist_ok=True)
        for v, d, n in zip(views, depths, normals):
            write_pfm(root / "gt" / f"depth_{v.name}.pfm", d)
            write_pfm(root / "gt" / f"normal_{v.name}.pfm", n)
        (root / "scene.json").write_text(json.dumps(spec.to_dict(), indent=2))
    return scene, gt


def read_ground_truth(gt_dir, names: Optional[list[str]] = None) -> dict[str, tuple[np.ndarray, Optional[np.ndarray]]]:
    """``name -> (depth, normal or None)`` for every ``depth_NNNN.pfm`` in ``gt_dir``."""
    gt_dir = Path(gt_dir)
    out = {}
    for p in sorted(gt_dir.glob("depth_*.pfm")):
        name = p.stem[len("depth_"):]
        if names is not None and name not in names:
            continue
        npath = gt_dir / f"normal_{name}.pfm"
        out[name] = (read_pfm(p), read_pfm(npath) if npath.exists() else None)
    if not out:
        raise MissingFile(f"no depth_*.pfm files in {gt_dir}")
    return out


def warn(msg: str) -> None:
    print(f"warning: {msg}", file=sys.stderr)
