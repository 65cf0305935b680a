"""Canonical anchor model: storage, voxel initialization and frustum culling."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core_math import NEAR, Camera, quat_identity

FEATURE_DIM = 32
DEFAULT_VOXEL = 0.1
DEFAULT_K = 5
FRUSTUM_MARGIN = 0.1


@dataclass
class Anchor:
    """Read-only snapshot of one anchor."""

    position: np.ndarray
    feature: np.ndarray
    scaling: np.ndarray  # positive; [:3] offset scale, [3:] base Gaussian scale
    rotation: np.ndarray
    offsets: np.ndarray  # (k, 3)
    grad_num: float
    grad_den: float
    opacity_accum: float
    obs_count: int


class CanonicalModel:
    """Struct-of-arrays anchor storage.

    Scaling is held as ``log_scaling`` so it stays positive under unconstrained
    updates. The densification statistics live alongside the parameters so
    that growth and pruning keep every array aligned.
    """

    PARAMS = ("positions", "features", "log_scaling", "rotations", "offsets")

    def __init__(self, positions, features, log_scaling, rotations, offsets, voxel_size: float):
        self.positions = np.asarray(positions, dtype=np.float64).reshape(-1, 3)
        n = len(self.positions)
        self.features = np.asarray(features, dtype=np.float64).reshape(n, FEATURE_DIM)
        self.log_scaling = np.asarray(log_scaling, dtype=np.float64).reshape(n, 6)
        self.rotations = np.asarray(rotations, dtype=np.float64).reshape(n, 4)
        self.offsets = np.asarray(offsets, dtype=np.float64)
        if self.offsets.ndim != 3 or self.offsets.shape[0] != n or self.offsets.shape[2] != 3:
            raise ValueError("offsets must have shape (n, k, 3)")
        self.voxel_size = float(voxel_size)
        self.born_step = np.zeros(n, dtype=np.int64)
        self.reset_stats()

    @property
    def k(self) -> int:
        return self.offsets.shape[1]

    def __len__(self) -> int:
        return len(self.positions)

    @property
    def scaling(self) -> np.ndarray:
        return np.exp(self.log_scaling)

    def anchor(self, i: int) -> Anchor:
        return Anchor(
            self.positions[i].copy(), self.features[i].copy(), self.scaling[i], self.rotations[i].copy(),
            self.offsets[i].copy(), float(self.grad_num[i]), float(self.grad_den[i]),
            float(self.opacity_accum[i]), int(self.obs_count[i]),
        )

    def reset_stats(self, mask=None) -> None:
        n = len(self)
        if mask is None or not hasattr(self, "grad_num"):
            self.grad_num = np.zeros(n)
            self.grad_den = np.zeros(n)
            self.child_num = np.zeros((n, self.k))
            self.child_den = np.zeros((n, self.k))
            self.opacity_accum = np.zeros(n)
            self.obs_count = np.zeros(n, dtype=np.int64)
            return
        for name in ("grad_num", "grad_den", "child_num", "child_den", "opacity_accum", "obs_count"):
            getattr(self, name)[mask] = 0

    def voxel_keys(self, points=None) -> np.ndarray:
        pts = self.positions if points is None else points
        return np.round(np.asarray(pts) / self.voxel_size).astype(np.int64)

    def keep(self, mask: np.ndarray) -> None:
        """Drop every anchor where ``mask`` is False."""
        for name in self.PARAMS + ("born_step", "grad_num", "grad_den", "child_num", "child_den",
                                   "opacity_accum", "obs_count"):
            setattr(self, name, getattr(self, name)[mask])

    def append(self, positions, features, log_scaling, rotations, offsets, step: int = 0) -> None:
        m = len(positions)
        self.positions = np.concatenate([self.positions, positions])
        self.features = np.concatenate([self.features, features])
        self.log_scaling = np.concatenate([self.log_scaling, log_scaling])
        self.rotations = np.concatenate([self.rotations, rotations])
        self.offsets = np.concatenate([self.offsets, offsets])
        self.born_step = np.concatenate([self.born_step, np.full(m, step, dtype=np.int64)])
        self.grad_num = np.concatenate([self.grad_num, np.zeros(m)])
        self.grad_den = np.concatenate([self.grad_den, np.zeros(m)])
        self.child_num = np.concatenate([self.child_num, np.zeros((m, self.k))])
        self.child_den = np.concatenate([self.child_den, np.zeros((m, self.k))])
        self.opacity_accum = np.concatenate([self.opacity_accum, np.zeros(m)])
        self.obs_count = np.concatenate([self.obs_count, np.zeros(m, dtype=np.int64)])

    def copy(self) -> "CanonicalModel":
        m = CanonicalModel(self.positions.copy(), self.features.copy(), self.log_scaling.copy(),
                           self.rotations.copy(), self.offsets.copy(), self.voxel_size)
        for name in ("born_step", "grad_num", "grad_den", "child_num", "child_den", "opacity_accum", "obs_count"):
            setattr(m, name, getattr(self, name).copy())
        return m


def fresh_anchor_params(centers: np.ndarray, voxel_size: float, k: int, rng: np.random.Generator,
                        features: np.ndarray | None = None):
    n = len(centers)
    if features is None:
        features = rng.normal(0.0, 0.1, (n, FEATURE_DIM))
    log_scaling = np.full((n, 6), np.log(voxel_size))
    offsets = rng.uniform(-0.5, 0.5, (n, k, 3))
    return features, log_scaling, quat_identity(n), offsets


def init_from_points(points, voxel_size: float = DEFAULT_VOXEL, k: int = DEFAULT_K,
                     rng: np.random.Generator | None = None) -> CanonicalModel:
    """One anchor at the center of every voxel that contains a point."""
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if len(points) == 0:
        raise ValueError("need at least one point to initialize anchors")
    if voxel_size <= 0 or k < 1:
        raise ValueError("voxel_size must be > 0 and k >= 1")
    rng = rng if rng is not None else np.random.default_rng(0)
    cells = np.unique(np.round(points / voxel_size).astype(np.int64), axis=0)
    centers = cells * voxel_size
    features, log_scaling, rotations, offsets = fresh_anchor_params(centers, voxel_size, k, rng)
    return CanonicalModel(centers, features, log_scaling, rotations, offsets, voxel_size)


def visible_anchors(model: CanonicalModel | None, positions: np.ndarray, cam: Camera,
                    margin: float = FRUSTUM_MARGIN) -> np.ndarray:
    """Indices of anchors whose (deformed) position has positive depth and
    projects inside the image rectangle grown by ``margin`` on each side."""
    positions = np.asarray(positions, dtype=np.float64).reshape(-1, 3)
    uv, z = cam.project(positions)
    mx, my = margin * cam.width, margin * cam.height
    ok = z > NEAR
    ok &= (uv[:, 0] >= -mx) & (uv[:, 0] <= cam.width + mx)
    ok &= (uv[:, 1] >= -my) & (uv[:, 1] <= cam.height + my)
    return np.nonzero(ok)[0]
