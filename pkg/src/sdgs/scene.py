"""The full dynamic scene: canonical anchors, deformation field and Gaussian
generator, with a differentiable render of one (camera, time) frame."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .anchors import CanonicalModel, init_from_points, visible_anchors
from .core_math import Camera
from .deformation import DeformationDelta, DeformationField, DeformedState, HexPlaneField, apply_delta
from .generation import OPACITY_THRESHOLD, GaussianGenerator
from .nn import MlpNet, TemporalEmbedding
from .rasterizer import Gaussians, RenderCache, RenderGrads, render, render_backward

COARSE, FINE = "coarse", "fine"


@dataclass
class FrameCache:
    t: float
    stage: str
    state: DeformedState
    visible: np.ndarray
    keep: np.ndarray  # (V*k,) passed the opacity filter
    all_gaussians: Gaussians
    rendered: Gaussians
    render: RenderCache


@dataclass
class AnchorGrads:
    positions: np.ndarray
    features: np.ndarray
    log_scaling: np.ndarray
    offsets: np.ndarray
    child_grad2d: np.ndarray  # (V, k) screen-space gradient norms
    child_seen: np.ndarray  # (V, k) rendered this step


class DynamicScene:
    def __init__(self, model: CanonicalModel, field: DeformationField, generator: GaussianGenerator,
                 background=(0.0, 0.0, 0.0)):
        self.model = model
        self.field = field
        self.generator = generator
        self.background = tuple(float(b) for b in background)

    @classmethod
    def from_points(cls, points, seed: int = 0, voxel_size: float = 0.1, k: int = 5, temporal: bool = True,
                    heads=("dx", "dl", "dq"), resolutions=(32, 64), d_plane: int = 16, hidden: int = 64,
                    bands: int = 6, margin: float = 0.2) -> "DynamicScene":
        rng = np.random.default_rng(seed)
        model = init_from_points(points, voxel_size, k, rng)
        pts = np.asarray(points, dtype=np.float64)
        lo, hi = pts.min(axis=0), pts.max(axis=0)
        pad = margin * np.maximum(hi - lo, voxel_size)
        plane = HexPlaneField(lo - pad, hi + pad, resolutions, d_plane, hidden, hidden, rng=rng)
        field = DeformationField(plane, hidden, rng=rng, enabled=heads)
        gen = GaussianGenerator(k, hidden, TemporalEmbedding(bands), temporal=temporal, rng=rng)
        scene = cls(model, field, gen)
        scene.round_params()
        return scene

    # parameters ------------------------------------------------------------

    def nets(self) -> dict[str, MlpNet]:
        out = {f"gen_{k}": v for k, v in self.generator.nets.items()}
        out.update(self.field.nets())
        return out

    def net_params(self):
        """(name, param, grad) for every network tensor."""
        for name, net in self.nets().items():
            for i, (p, g) in enumerate(zip(net.params(), net.grads())):
                yield f"{name}.{i}", p, g

    def grid_params(self):
        for lv, p, g, gg in self.field.hexplane.all_grids():
            yield f"grid.{lv}.{p}", g, gg

    def round_params(self) -> None:
        """Snap every parameter to float32 precision so checkpoints are lossless."""
        m = self.model
        for name in CanonicalModel.PARAMS:
            arr = getattr(m, name)
            arr[...] = arr.astype(np.float32)
        for _, p, _ in self.net_params():
            p[...] = p.astype(np.float32)
        for _, p, _ in self.grid_params():
            p[...] = p.astype(np.float32)

    def zero_grad(self) -> None:
        self.field.zero_grad()
        self.generator.zero_grad()

    # forward ---------------------------------------------------------------

    def deform(self, t: float, stage: str = FINE) -> DeformedState:
        m = self.model
        if stage == COARSE:
            n = len(m)
            return apply_delta(m, DeformationDelta(np.zeros((n, 3)), np.zeros((n, 6)), np.zeros((n, 4))))
        return self.field.forward(m, t)

    def gaussians(self, cam: Camera, t: float, stage: str = FINE):
        """Deform, cull and decode; returns (all V*k Gaussians, state, visible)."""
        state = self.deform(t, stage)
        vis = visible_anchors(self.model, state.positions, cam)
        m = self.model
        g = self.generator.forward(m.features[vis], state.positions[vis], state.scaling[vis], m.offsets[vis],
                                   cam.position, t, time_active=(stage == FINE), anchor_index=vis)
        return g, state, vis

    def forward(self, cam: Camera, t: float, stage: str = FINE):
        g, state, vis = self.gaussians(cam, t, stage)
        keep = g.opacities > OPACITY_THRESHOLD
        sub = g.subset(keep)
        img, rc = render(sub, cam, self.background)
        return img, FrameCache(float(t), stage, state, vis, keep, g, sub, rc)

    def render(self, cam: Camera, t: float, stage: str = FINE) -> np.ndarray:
        img, _ = self.forward(cam, t, stage)
        self.generator._cache = None
        self.field._cache = None
        self.field.hexplane._cache = None
        return img

    # backward --------------------------------------------------------------

    def backward(self, cache: FrameCache, grad_image: np.ndarray, grad_scales=None) -> AnchorGrads:
        """Gradients of the loss w.r.t. anchor attributes; network and grid
        gradients accumulate in place. ``grad_scales`` is an extra gradient on
        the scales of the rendered Gaussians (volume term)."""
        m = self.model
        n, k = len(m), m.k
        v = len(cache.visible)
        rg = render_backward(cache.render, grad_image)
        if grad_scales is not None and len(grad_scales):
            rg.scales = rg.scales + grad_scales
        total = v * k
        full = RenderGrads(np.zeros((total, 3)), np.zeros((total, 3)), np.zeros((total, 4)), np.zeros(total),
                           np.zeros((total, 3)), np.zeros((total, 2)), np.zeros(total))
        for name in ("means", "scales", "rotations", "opacities", "colors", "grad2d_norm"):
            getattr(full, name)[cache.keep] = getattr(rg, name)
        seen = np.zeros(total, dtype=bool)
        frags = cache.render.blend.frags
        if len(frags):
            r = frags.rect
            drawn = frags.source[(r[:, 0] < r[:, 1]) & (r[:, 2] < r[:, 3])]
            seen[np.nonzero(cache.keep)[0][drawn]] = True

        out = AnchorGrads(np.zeros((n, 3)), np.zeros_like(m.features), np.zeros((n, 6)), np.zeros_like(m.offsets),
                          full.grad2d_norm.reshape(v, k), seen.reshape(v, k))
        if v == 0:
            self.generator._cache = None
            self.field._cache = None
            self.field.hexplane._cache = None
            return out
        g_feat, g_pos, g_scaling, g_off = self.generator.backward(full)
        vis = cache.visible
        out.features[vis] = g_feat
        out.offsets[vis] = g_off
        out.positions[vis] = g_pos
        # l' = exp(log l + dl): chain through the exponential
        g_log = np.zeros((n, 6))
        g_log[vis] = g_scaling * cache.state.scaling[vis]
        out.log_scaling = g_log
        if cache.stage == FINE:
            g_dx = np.zeros((n, 3))
            g_dx[vis] = g_pos
            out.positions += self.field.backward(g_dx, g_log)
        return out
