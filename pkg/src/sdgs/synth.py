"""Scripted dynamic scenes, camera rigs and ground-truth dataset generation."""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .core_math import Camera, quat_from_axis_angle, quat_multiply, quat_to_matrix
from .imageio import read_pgm, read_ppm, write_pgm, write_ppm
from .rasterizer import CUTOFF, Gaussians, project_gaussians, render

STATIC, DYNAMIC = 128, 255
HELDOUT = (2,)
NOISE_FRACTION = 0.2


@dataclass
class Curve:
    """``base + amp * t`` (linear) or ``base + amp * sin(2 pi (freq t + phase))``."""

    kind: str = "constant"
    base: list = field(default_factory=lambda: [0.0])
    amp: list = field(default_factory=lambda: [0.0])
    freq: float = 1.0
    phase: float = 0.0

    def __post_init__(self):
        if self.kind not in ("constant", "linear", "sin"):
            raise ValueError(f"unknown curve kind {self.kind!r}")

    def __call__(self, t: float) -> np.ndarray:
        base = np.asarray(self.base, dtype=np.float64)
        amp = np.asarray(self.amp, dtype=np.float64)
        if self.kind == "linear":
            return base + amp * t
        if self.kind == "sin":
            return base + amp * np.sin(2 * np.pi * (self.freq * t + self.phase))
        return base.copy()

    @property
    def varies(self) -> bool:
        return self.kind != "constant" and bool(np.any(np.asarray(self.amp) != 0))


def _const(*v) -> Curve:
    return Curve("constant", list(v), [0.0] * len(v))


@dataclass
class Track:
    """A cluster of Gaussians moving as one body.

    ``position`` is added to ``center``; ``angle`` rotates the cluster about
    ``axis``; ``scale`` multiplies member offsets and sizes; ``color`` is added
    to each member's base color.
    """

    name: str
    center: list
    color: list
    count: int = 24
    spread: float = 0.05
    size: float = 0.03
    opacity: float = 0.9
    axis: list = field(default_factory=lambda: [0.0, 0.0, 1.0])
    position: Curve = field(default_factory=lambda: _const(0.0, 0.0, 0.0))
    angle: Curve = field(default_factory=lambda: _const(0.0))
    scale: Curve = field(default_factory=lambda: _const(1.0))
    tint: Curve = field(default_factory=lambda: _const(0.0, 0.0, 0.0))
    elongation: list = field(default_factory=lambda: [1.0, 1.0, 1.0])

    @property
    def dynamic(self) -> bool:
        return any(c.varies for c in (self.position, self.angle, self.scale, self.tint))


@dataclass
class RigSpec:
    count: int = 4
    radius: float = 2.1
    arc_degrees: float = 60.0
    height: float = 0.4
    focal: float = 112.0
    target: list = field(default_factory=lambda: [0.0, 0.0, 0.0])

    def cameras(self, width: int, height: int) -> list[Camera]:
        if self.count < 1:
            raise ValueError("rig needs at least one camera")
        angles = np.deg2rad(np.linspace(-self.arc_degrees / 2, self.arc_degrees / 2, self.count))
        target = np.asarray(self.target, dtype=np.float64)
        eyes = [target + np.array([self.radius * np.sin(a), -self.height, -self.radius * np.cos(a)]) for a in angles]
        for i in range(len(eyes)):
            for j in range(i):
                if np.linalg.norm(eyes[i] - eyes[j]) < 1e-6:
                    raise ValueError("degenerate rig: coincident cameras")
        if self.radius <= 0:
            raise ValueError("degenerate rig: zero radius")
        return [Camera.look_at(e, target, (0.0, 1.0, 0.0), self.focal, width, height) for e in eyes]


@dataclass
class SceneScript:
    name: str
    tracks: list
    rig: RigSpec = field(default_factory=RigSpec)
    frames: int = 20
    width: int = 64
    height: int = 64
    seed: int = 0

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SceneScript":
        tracks = []
        for t in d["tracks"]:
            t = dict(t)
            for key in ("position", "angle", "scale", "tint"):
                t[key] = Curve(**t[key])
            tracks.append(Track(**t))
        return cls(d["name"], tracks, RigSpec(**d["rig"]), d["frames"], d["width"], d["height"], d["seed"])

    def times(self) -> np.ndarray:
        return np.linspace(0.0, 1.0, self.frames) if self.frames > 1 else np.zeros(1)


def _members(track: Track, index: int, seed: int):
    rng = np.random.default_rng([seed, index])
    local = rng.normal(0.0, track.spread, (track.count, 3)) * np.asarray(track.elongation)
    sizes = track.size * rng.uniform(0.7, 1.3, (track.count, 3))
    axes = rng.normal(size=(track.count, 3))
    rots = np.stack([quat_from_axis_angle(a, ang) for a, ang in zip(axes, rng.uniform(0, np.pi, track.count))])
    colors = np.clip(np.asarray(track.color) + rng.normal(0.0, 0.05, (track.count, 3)), 0.0, 1.0)
    return local, sizes, rots, colors


def track_gaussians(track: Track, index: int, seed: int, t: float) -> Gaussians:
    local, sizes, rots, colors = _members(track, index, seed)
    q = quat_from_axis_angle(track.axis, float(track.angle(t)[0]))
    s = float(track.scale(t)[0])
    rot = quat_to_matrix(q)
    means = np.asarray(track.center) + track.position(t) + (local * s) @ rot.T
    rotations = quat_multiply(np.broadcast_to(q, rots.shape), rots)
    cols = np.clip(colors + track.tint(t), 0.0, 1.0)
    return Gaussians(means, sizes * s, rotations, np.full(track.count, track.opacity), cols)


def _concat(parts: list[Gaussians]) -> Gaussians:
    if not parts:
        return Gaussians.empty()
    return Gaussians(*(np.concatenate([getattr(p, f) for p in parts])
                       for f in ("means", "scales", "rotations", "opacities", "colors")))


def scene_gaussians(script: SceneScript, t: float, which: str = "all") -> Gaussians:
    """Scripted Gaussians at time ``t``; ``which`` is all, static or dynamic."""
    parts = []
    for i, tr in enumerate(script.tracks):
        if which == "all" or (which == "dynamic") == tr.dynamic:
            parts.append(track_gaussians(tr, i, script.seed, t))
    return _concat(parts)


def footprint_mask(g: Gaussians, cam: Camera) -> np.ndarray:
    """Pixels inside the 3-sigma ellipse of any of ``g`` (occlusion ignored)."""
    mask = np.zeros((cam.height, cam.width), dtype=bool)
    if len(g) == 0:
        return mask
    frags, _, _ = project_gaussians(g, cam)
    xs = np.arange(cam.width) + 0.5
    ys = np.arange(cam.height) + 0.5
    for m, (a, b, c) in zip(frags.mean2d, frags.conic):
        dx = xs[None, :] - m[0]
        dy = ys[:, None] - m[1]
        mask |= a * dx * dx + 2 * b * dx * dy + c * dy * dy <= CUTOFF
    return mask


def inside_ellipsoids(points, g: Gaussians) -> np.ndarray:
    """Whether each 3-D point lies within 3 sigma of any Gaussian in ``g``."""
    from .core_math import covariance_from_scale_rotation

    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    out = np.zeros(len(points), dtype=bool)
    if len(g) == 0 or len(points) == 0:
        return out
    inv = np.linalg.inv(covariance_from_scale_rotation(g.scales, g.rotations))
    for mu, a in zip(g.means, inv):
        d = points - mu
        out |= np.einsum("ni,ij,nj->n", d, a, d) <= CUTOFF
    return out


@dataclass
class Dataset:
    script: SceneScript
    cameras: list
    times: np.ndarray
    images: np.ndarray  # (C, T, H, W, 3) in [0, 1]
    labels: np.ndarray  # (C, T, H, W) uint8: 0 empty, 128 static, 255 dynamic
    init_points: np.ndarray
    heldout: tuple = HELDOUT

    @property
    def train_cameras(self) -> list[int]:
        return [i for i in range(len(self.cameras)) if i not in self.heldout]

    def pairs(self, cams=None) -> list[tuple[int, int]]:
        cams = self.train_cameras if cams is None else cams
        return [(c, j) for c in cams for j in range(len(self.times))]

    def dynamic_fraction(self) -> float:
        return float(np.mean(self.labels == DYNAMIC))


def quantize(img: np.ndarray) -> np.ndarray:
    """Snap to the 8-bit levels stored on disk."""
    return np.round(np.clip(img, 0.0, 1.0) * 255.0) / 255.0


def build_dataset(script: SceneScript) -> Dataset:
    """Render every (camera, t) frame of the script with the project rasterizer."""
    if not script.tracks:
        raise ValueError("scene has no tracks")
    cams = script.rig.cameras(script.width, script.height)
    times = script.times()
    c_n, t_n = len(cams), len(times)
    images = np.zeros((c_n, t_n, script.height, script.width, 3))
    labels = np.zeros((c_n, t_n, script.height, script.width), dtype=np.uint8)
    for j, t in enumerate(times):
        g = scene_gaussians(script, t)
        dyn = scene_gaussians(script, t, "dynamic")
        sta = scene_gaussians(script, t, "static")
        for i, cam in enumerate(cams):
            uv, z = cam.project(g.means)
            if np.any(z <= 0) or np.any((uv < 0) | (uv > [cam.width, cam.height])):
                raise ValueError(f"camera {i} does not see the whole scene at t={t:.3f}")
            img, _ = render(g, cam)
            images[i, j] = quantize(img)
            labels[i, j][footprint_mask(sta, cam)] = STATIC
            labels[i, j][footprint_mask(dyn, cam)] = DYNAMIC
    rng = np.random.default_rng([script.seed, 7])
    surface = scene_gaussians(script, 0.0).means
    lo, hi = surface.min(axis=0) - 0.1, surface.max(axis=0) + 0.1
    noise = rng.uniform(lo, hi, (int(round(NOISE_FRACTION * len(surface))), 3))
    init = np.concatenate([surface, noise]).astype(np.float32).astype(np.float64)
    return Dataset(script, cams, times, images, labels, init)


def _blob(name, center, color, **kw) -> Track:
    return Track(name, list(center), list(color), **kw)


def standard_scenes() -> dict[str, SceneScript]:
    """The fixed desk-scale scene catalog."""
    static_a = dict(center=(-0.28, 0.05, 0.05), color=(0.2, 0.45, 0.9))
    scenes = {
        "translate": [
            _blob("static", **static_a),
            _blob("mover", (-0.05, -0.12, -0.05), (0.9, 0.35, 0.2),
                  position=Curve("linear", [0.0, 0.0, 0.0], [0.35, 0.0, 0.0])),
        ],
        "rotate": [
            _blob("static", **static_a),
            _blob("spinner", (0.18, -0.05, 0.0), (0.3, 0.85, 0.3), elongation=[2.5, 0.6, 0.6],
                  angle=Curve("linear", [0.0], [np.pi])),
        ],
        "pulse-color": [
            _blob("static", **static_a),
            _blob("pulser", (0.18, -0.05, 0.0), (0.5, 0.5, 0.5),
                  tint=Curve("sin", [0.0, 0.0, 0.0], [0.4, -0.3, 0.35], freq=1.0)),
        ],
        "pulse-scale": [
            _blob("static", **static_a),
            _blob("breather", (0.18, -0.05, 0.0), (0.9, 0.8, 0.2),
                  scale=Curve("sin", [1.0], [0.35], freq=1.0)),
        ],
        "mixed": [
            _blob("mover", (-0.3, -0.2, 0.0), (0.9, 0.35, 0.2), count=18, spread=0.04,
                  position=Curve("sin", [0.0, 0.0, 0.0], [0.15, 0.0, 0.0], freq=1.0)),
            _blob("spinner", (0.25, -0.22, 0.05), (0.3, 0.85, 0.3), count=18, spread=0.04,
                  elongation=[2.5, 0.6, 0.6], angle=Curve("linear", [0.0], [np.pi])),
            _blob("pulser", (0.05, 0.2, -0.05), (0.5, 0.5, 0.5), count=18, spread=0.04,
                  tint=Curve("sin", [0.0, 0.0, 0.0], [0.4, -0.3, 0.35], freq=1.0)),
            _blob("clutter-a", (-0.3, 0.25, 0.15), (0.2, 0.45, 0.9), count=14, spread=0.04),
            _blob("clutter-b", (0.3, 0.15, 0.2), (0.85, 0.85, 0.85), count=14, spread=0.04),
            _blob("clutter-c", (0.0, -0.02, 0.25), (0.7, 0.3, 0.7), count=14, spread=0.04),
        ],
    }
    return {name: SceneScript(name, tracks, seed=i) for i, (name, tracks) in enumerate(scenes.items())}


# ---------------------------------------------------------------------------
# on-disk layout


def save_dataset(ds: Dataset, out_dir) -> Path:
    out = Path(out_dir)
    (out / "frames").mkdir(parents=True, exist_ok=True)
    (out / "labels").mkdir(parents=True, exist_ok=True)
    meta = {
        "script": ds.script.to_dict(),
        "cameras": [c.to_dict() for c in ds.cameras],
        "times": [float(t) for t in ds.times],
        "heldout": list(ds.heldout),
    }
    (out / "scene.json").write_text(json.dumps(meta, indent=1))
    for i in range(len(ds.cameras)):
        for j in range(len(ds.times)):
            write_ppm(out / "frames" / f"cam{i}_t{j}.ppm", ds.images[i, j])
            write_pgm(out / "labels" / f"cam{i}_t{j}.pgm", ds.labels[i, j])
    pts = np.asarray(ds.init_points, dtype="<f4")
    (out / "init_points.bin").write_bytes(struct.pack("<I", len(pts)) + pts.tobytes())
    return out


def load_dataset(path) -> Dataset:
    """Read a dataset directory; raises FileNotFoundError for missing pieces."""
    root = Path(path)
    meta_path = root / "scene.json"
    if not meta_path.is_file():
        raise FileNotFoundError(f"{meta_path} not found")
    meta = json.loads(meta_path.read_text())
    script = SceneScript.from_dict(meta["script"])
    cams = [Camera.from_dict(c) for c in meta["cameras"]]
    times = np.asarray(meta["times"], dtype=np.float64)
    images = np.zeros((len(cams), len(times), script.height, script.width, 3))
    labels = np.zeros((len(cams), len(times), script.height, script.width), dtype=np.uint8)
    for i in range(len(cams)):
        for j in range(len(times)):
            images[i, j] = read_ppm(root / "frames" / f"cam{i}_t{j}.ppm")
            labels[i, j] = read_pgm(root / "labels" / f"cam{i}_t{j}.pgm")
    buf = (root / "init_points.bin").read_bytes()
    (n,) = struct.unpack_from("<I", buf)
    if len(buf) < 4 + 12 * n:
        raise ValueError("init_points.bin is truncated")
    pts = np.frombuffer(buf, dtype="<f4", count=3 * n, offset=4).reshape(n, 3).astype(np.float64)
    return Dataset(script, cams, times, images, labels, pts, tuple(meta.get("heldout", HELDOUT)))
