"""Neural Gaussian generation: every visible anchor decodes ``k`` renderable
Gaussians from its feature, the view direction and (optionally) a time
embedding, through four independent attribute networks."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .anchors import FEATURE_DIM
from .core_math import normalize_backward
from .nn import MlpNet, TemporalEmbedding, embed_time, sigmoid
from .rasterizer import Gaussians

OPACITY_THRESHOLD = 0.005
OPACITY_MAX = 1.0 - 1e-9  # keeps opacity inside [0, 1) where the sigmoid rounds to 1
ATTRS = {"opacity": 1, "color": 3, "rotation": 4, "scale": 3}


@dataclass
class NeuralGaussian:
    mean: np.ndarray
    scale: np.ndarray
    rotation: np.ndarray
    opacity: float
    color: np.ndarray
    anchor: int
    offset: int


def neural_positions(position, scaling, offsets) -> np.ndarray:
    """Child means ``x' + O * l'[:3]``; batched as (V, 3), (V, 6), (V, k, 3)."""
    position = np.asarray(position, dtype=np.float64)
    scaling = np.asarray(scaling, dtype=np.float64)
    return position[..., None, :] + np.asarray(offsets, dtype=np.float64) * scaling[..., None, :3]


def filter_by_opacity(gaussians, tau: float = OPACITY_THRESHOLD):
    """Keep Gaussians with opacity strictly above ``tau`` (order preserved)."""
    if isinstance(gaussians, Gaussians):
        return gaussians.subset(gaussians.opacities > tau)
    return [g for g in gaussians if g.opacity > tau]


@dataclass
class GenCache:
    cond: np.ndarray
    view_raw: np.ndarray
    raw: dict
    acts: dict
    scaling: np.ndarray
    offsets: np.ndarray
    anchor_index: np.ndarray


class GaussianGenerator:
    """The four attribute decoders plus conditioning.

    The conditioning vector is ``[f_v, d_vc, phi(t)]`` where ``d_vc`` points
    from the camera to the deformed anchor. With ``temporal=False`` the time
    embedding is dropped from the input entirely. The first-layer weights that
    read the time embedding start at zero, so switching time on after a
    static warm-up leaves the outputs unchanged.
    """

    def __init__(self, k: int, hidden: int = 64, embedding: TemporalEmbedding = TemporalEmbedding(),
                 temporal: bool = True, use_distance: bool = False, rng=None, nets=None):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.k = int(k)
        self.embedding = embedding
        self.temporal = bool(temporal)
        self.use_distance = bool(use_distance)
        self.in_dim = FEATURE_DIM + 3 + int(self.use_distance) + (embedding.dim if self.temporal else 0)
        if nets is None:
            nets = {}
            for name, dim in ATTRS.items():
                net = MlpNet([self.in_dim, hidden, hidden, dim * self.k], rng=rng)
                if self.temporal:
                    net.weights[0][self.in_dim - embedding.dim:] = 0.0
                if name == "rotation":
                    net.biases[-1].reshape(self.k, 4)[:, 0] = 1.0
                nets[name] = net
        self.nets = nets
        self._cache = None

    def zero_grad(self) -> None:
        for net in self.nets.values():
            net.zero_grad()

    def conditioning(self, features, positions, cam_pos, t: float, time_active: bool = True):
        v = np.asarray(positions, dtype=np.float64) - np.asarray(cam_pos, dtype=np.float64)
        dist = np.linalg.norm(v, axis=1, keepdims=True)
        parts = [features, v / dist]
        if self.use_distance:
            parts.append(dist)
        if self.temporal:
            phi = embed_time(t, self.embedding) if time_active else np.zeros(self.embedding.dim)
            parts.append(np.broadcast_to(phi, (len(v), self.embedding.dim)))
        return np.concatenate(parts, axis=1), v

    def forward(self, features, positions, scaling, offsets, cam_pos, t: float, time_active: bool = True,
                anchor_index=None) -> Gaussians:
        """Decode ``V * k`` Gaussians (anchor-major order) for V anchors."""
        v_count = len(positions)
        k = self.k
        if anchor_index is None:
            anchor_index = np.arange(v_count)
        if v_count == 0:
            self._cache = None
            return Gaussians.empty()
        cond, view_raw = self.conditioning(features, positions, cam_pos, t, time_active)
        raw = {name: net.forward(cond) for name, net in self.nets.items()}
        opacity = np.minimum(sigmoid(raw["opacity"]).reshape(-1), OPACITY_MAX)
        color = sigmoid(raw["color"]).reshape(-1, 3)
        r = raw["rotation"].reshape(-1, 4)
        rotation = r / np.linalg.norm(r, axis=1, keepdims=True)
        sig_s = sigmoid(raw["scale"]).reshape(v_count, k, 3)
        scale = (sig_s * scaling[:, None, 3:]).reshape(-1, 3)
        means = neural_positions(positions, scaling, offsets).reshape(-1, 3)
        acts = {"opacity": opacity, "color": color, "rotation": rotation, "sig_scale": sig_s}
        self._cache = GenCache(cond, view_raw, raw, acts, scaling, offsets, np.asarray(anchor_index))
        return Gaussians(means, scale, rotation, opacity, color)

    def backward(self, grads) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
        """Backpropagate Gaussian attribute gradients (anchor-major ``V * k``).

        Returns gradients on ``(features, positions, scaling, offsets)`` of the
        V visible anchors; scaling gradients are w.r.t. the positive scaling.
        """
        c = self._cache
        if c is None:
            raise RuntimeError("backward without a recorded generate")
        self._cache = None
        v_count, k = len(c.cond), self.k
        a = c.acts
        g_op = grads.opacities * a["opacity"] * (1 - a["opacity"])
        g_col = grads.colors * a["color"] * (1 - a["color"])
        g_rot = normalize_backward(c.raw["rotation"].reshape(-1, 4), grads.rotations)
        gs = grads.scales.reshape(v_count, k, 3)
        sig_s = a["sig_scale"]
        g_sc = gs * c.scaling[:, None, 3:] * sig_s * (1 - sig_s)
        grad_scaling = np.zeros((v_count, 6))
        grad_scaling[:, 3:] = np.sum(gs * sig_s, axis=1)
        gm = grads.means.reshape(v_count, k, 3)
        grad_pos = gm.sum(axis=1)
        grad_off = gm * c.scaling[:, None, :3]
        grad_scaling[:, :3] = np.sum(gm * c.offsets, axis=1)
        grad_cond = self.nets["opacity"].backward(g_op.reshape(v_count, k))
        grad_cond = grad_cond + self.nets["color"].backward(g_col.reshape(v_count, 3 * k))
        grad_cond = grad_cond + self.nets["rotation"].backward(g_rot.reshape(v_count, 4 * k))
        grad_cond = grad_cond + self.nets["scale"].backward(g_sc.reshape(v_count, 3 * k))
        grad_feat = grad_cond[:, :FEATURE_DIM]
        g_dir = grad_cond[:, FEATURE_DIM:FEATURE_DIM + 3]
        grad_pos = grad_pos + normalize_backward(c.view_raw, g_dir)
        if self.use_distance:
            g_dist = grad_cond[:, FEATURE_DIM + 3:FEATURE_DIM + 4]
            grad_pos = grad_pos + g_dist * c.view_raw / np.linalg.norm(c.view_raw, axis=1, keepdims=True)
        return grad_feat, grad_pos, grad_scaling, grad_off


def generate(gen: GaussianGenerator, feature, position, scaling, offsets, cam_pos, t: float,
             anchor: int = 0, time_active: bool = True) -> list[NeuralGaussian]:
    """Single-anchor convenience wrapper returning ``k`` records."""
    g = gen.forward(np.atleast_2d(feature), np.atleast_2d(position), np.atleast_2d(scaling),
                    np.asarray(offsets)[None], cam_pos, t, time_active)
    gen._cache = None
    return [NeuralGaussian(g.means[i], g.scales[i], g.rotations[i], float(g.opacities[i]), g.colors[i], anchor, i)
            for i in range(len(g))]
