"""Anchor deformation field: a multi-resolution HexPlane encoder followed by a
fusion network and three decoding heads for position, scaling and rotation
offsets."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core_math import normalize_backward, quat_normalize
from .nn import MlpNet

# (axis_a, axis_b) for each plane; axis 3 is time
PLANES = ((0, 1), (0, 2), (1, 2), (0, 3), (1, 3), (2, 3))
TIME_PLANES = (3, 4, 5)


class HexPlaneField:
    """Six factorized 2-D feature planes per resolution level plus a fusion MLP.

    ``grids[level][plane]`` has shape ``(res, res, d_plane)`` indexed by the
    two plane coordinates (spatial axes normalized to the bounding box, time
    in ``[0, 1]``). Plane features are combined by elementwise product within a
    level and concatenated across levels.
    """

    def __init__(self, bbox_min, bbox_max, resolutions=(32, 64), d_plane=16, d_embed=64, hidden=64,
                 rng: np.random.Generator | None = None, grids=None, fusion: MlpNet | None = None):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.bbox_min = np.asarray(bbox_min, dtype=np.float64).reshape(3)
        self.bbox_max = np.asarray(bbox_max, dtype=np.float64).reshape(3)
        if np.any(self.bbox_max <= self.bbox_min):
            raise ValueError("degenerate bounding box")
        self.resolutions = tuple(int(r) for r in resolutions)
        self.d_plane = int(d_plane)
        if grids is None:
            grids = []
            for res in self.resolutions:
                level = []
                for p in range(6):
                    if p in TIME_PLANES:
                        level.append(np.ones((res, res, self.d_plane)))
                    else:
                        level.append(rng.uniform(0.1, 0.5, (res, res, self.d_plane)))
                grids.append(level)
        self.grids = grids
        self.grid_grads = [[np.zeros_like(g) for g in level] for level in self.grids]
        self.fusion = fusion if fusion is not None else MlpNet(
            [self.d_plane * len(self.resolutions), hidden, hidden, d_embed], rng=rng)
        self._cache = None

    @property
    def d_embed(self) -> int:
        return self.fusion.n_out

    def all_grids(self):
        for lv, level in enumerate(self.grids):
            for p, g in enumerate(level):
                yield lv, p, g, self.grid_grads[lv][p]

    def zero_grad(self) -> None:
        for _, _, _, gg in self.all_grids():
            gg[...] = 0.0
        self.fusion.zero_grad()

    def normalized(self, x: np.ndarray, t) -> np.ndarray:
        """(N, 4) coordinates in [0, 1]; out-of-box positions are clamped."""
        x = np.asarray(x, dtype=np.float64).reshape(-1, 3)
        u = np.empty((len(x), 4))
        u[:, :3] = (x - self.bbox_min) / (self.bbox_max - self.bbox_min)
        u[:, 3] = t
        return u

    def features(self, x, t):
        """Concatenated per-level plane products before fusion."""
        return self._encode(self.normalized(x, t))[0]

    def _encode(self, u):
        n = len(u)
        inside = (u >= 0.0) & (u <= 1.0)
        uc = np.clip(u, 0.0, 1.0)
        per_level = []
        lookups = []
        for res, level in zip(self.resolutions, self.grids):
            g = uc * (res - 1)
            i0 = np.clip(np.floor(g).astype(np.int64), 0, res - 2)
            fr = g - i0
            vals = []
            looks = []
            for p, (a, b) in enumerate(PLANES):
                grid = level[p]
                ia, ib = i0[:, a], i0[:, b]
                fa, fb = fr[:, a, None], fr[:, b, None]
                g00 = grid[ia, ib]
                g10 = grid[ia + 1, ib]
                g01 = grid[ia, ib + 1]
                g11 = grid[ia + 1, ib + 1]
                v = (1 - fa) * (1 - fb) * g00 + fa * (1 - fb) * g10 + (1 - fa) * fb * g01 + fa * fb * g11
                vals.append(v)
                looks.append((ia, ib, fa, fb, g00, g10, g01, g11))
            prod = np.ones((n, self.d_plane))
            for v in vals:
                prod = prod * v
            per_level.append(prod)
            lookups.append((vals, looks))
        return np.concatenate(per_level, axis=1), (u, inside, lookups)

    def encode(self, x, t) -> np.ndarray:
        feats, aux = self._encode(self.normalized(x, t))
        out = self.fusion.forward(feats)
        self._cache = aux
        return out

    def encode_backward(self, grad_fd: np.ndarray) -> np.ndarray:
        """Accumulate grid and fusion gradients; returns dL/dx (N, 3)."""
        if self._cache is None:
            raise RuntimeError("encode_backward without a recorded encode")
        u, inside, lookups = self._cache
        self._cache = None
        grad_feat = self.fusion.backward(grad_fd)
        n = len(u)
        grad_u = np.zeros((n, 4))
        d = self.d_plane
        for lv, (res, (vals, looks)) in enumerate(zip(self.resolutions, lookups)):
            gl = grad_feat[:, lv * d:(lv + 1) * d]
            for p, (a, b) in enumerate(PLANES):
                others = np.ones((n, d))
                for q, v in enumerate(vals):
                    if q != p:
                        others = others * v
                gv = gl * others
                ia, ib, fa, fb, g00, g10, g01, g11 = looks[p]
                gg = self.grid_grads[lv][p]
                flat = gg.reshape(-1, d)
                base = ia * res + ib
                for idx, wgt in ((base, (1 - fa) * (1 - fb)), (base + res, fa * (1 - fb)),
                                 (base + 1, (1 - fa) * fb), (base + res + 1, fa * fb)):
                    np.add.at(flat, idx, gv * wgt)
                du_a = ((1 - fb) * (g10 - g00) + fb * (g11 - g01)) * (res - 1)
                du_b = ((1 - fa) * (g01 - g00) + fa * (g11 - g10)) * (res - 1)
                grad_u[:, a] += np.sum(gv * du_a, axis=1)
                grad_u[:, b] += np.sum(gv * du_b, axis=1)
        grad_u *= inside
        return grad_u[:, :3] / (self.bbox_max - self.bbox_min)


def hexplane_encode(field: HexPlaneField, x, t) -> np.ndarray:
    return field.encode(x, t)


@dataclass
class DeformationDelta:
    dx: np.ndarray  # (N, 3)
    dl: np.ndarray  # (N, 6) log-space
    dq: np.ndarray  # (N, 4)


@dataclass
class DeformedState:
    positions: np.ndarray
    scaling: np.ndarray  # positive
    rotations: np.ndarray  # unit
    delta: DeformationDelta


class DeformationField:
    """HexPlane encoder plus the three deformation heads.

    ``enabled`` switches individual heads off (their deltas become exactly 0);
    this is how the per-component ablations are run.
    """

    HEADS = ("dx", "dl", "dq")
    HEAD_DIMS = {"dx": 3, "dl": 6, "dq": 4}

    def __init__(self, hexplane: HexPlaneField, hidden: int = 64, rng=None, heads=None,
                 enabled=("dx", "dl", "dq")):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.hexplane = hexplane
        if heads is None:
            heads = {name: MlpNet([hexplane.d_embed, hidden, hidden, dim], rng=rng, zero_last=True)
                     for name, dim in self.HEAD_DIMS.items()}
        self.heads = heads
        self.enabled = tuple(enabled)
        self._cache = None

    def nets(self) -> dict[str, MlpNet]:
        return {"fusion": self.hexplane.fusion, **{f"head_{k}": v for k, v in self.heads.items()}}

    def zero_grad(self) -> None:
        self.hexplane.zero_grad()
        for h in self.heads.values():
            h.zero_grad()

    def decode(self, f_d: np.ndarray) -> DeformationDelta:
        n = len(f_d)
        out = {}
        for name, dim in self.HEAD_DIMS.items():
            out[name] = self.heads[name].forward(f_d) if name in self.enabled else np.zeros((n, dim))
        return DeformationDelta(out["dx"], out["dl"], out["dq"])

    def forward(self, model, t: float) -> DeformedState:
        """Deform every anchor of ``model`` to time ``t``."""
        n = len(model)
        if not self.enabled or n == 0:
            delta = DeformationDelta(np.zeros((n, 3)), np.zeros((n, 6)), np.zeros((n, 4)))
            self._cache = None
        else:
            f_d = self.hexplane.encode(model.positions, t)
            delta = self.decode(f_d)
            self._cache = (model.rotations + delta.dq,)
        return apply_delta(model, delta)

    def backward(self, grad_dx: np.ndarray, grad_dl: np.ndarray, grad_q: np.ndarray | None = None) -> np.ndarray:
        """Backpropagate gradients on the deltas; returns dL/d(anchor position)
        through the encoder's coordinate dependence."""
        if self._cache is None:
            return np.zeros_like(grad_dx)
        (q_raw,) = self._cache
        self._cache = None
        grads = {"dx": grad_dx, "dl": grad_dl}
        grads["dq"] = normalize_backward(q_raw, grad_q) if grad_q is not None else np.zeros_like(q_raw)
        grad_fd = 0.0
        for name in self.HEADS:
            if name in self.enabled:
                grad_fd = grad_fd + self.heads[name].backward(grads[name])
        return self.hexplane.encode_backward(np.broadcast_to(grad_fd, (len(grad_dx), self.hexplane.d_embed)))


def decode_deformation(field: DeformationField, f_d: np.ndarray) -> DeformationDelta:
    return field.decode(np.atleast_2d(f_d))


def apply_delta(model, delta: DeformationDelta) -> DeformedState:
    """``x' = x + dx``, ``l' = exp(log l + dl)``, ``q' = normalize(q + dq)``."""
    return DeformedState(
        positions=model.positions + delta.dx,
        scaling=np.exp(model.log_scaling + delta.dl),
        rotations=quat_normalize(model.rotations + delta.dq) if len(model) else model.rotations.copy(),
        delta=delta,
    )


def deform_model(model, field: DeformationField, t: float) -> DeformedState:
    return field.forward(model, t)
