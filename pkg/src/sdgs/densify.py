"""Deformation-aware anchor growing and pruning."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .anchors import CanonicalModel, fresh_anchor_params
from .core_math import quaternion_angle

EPS = 1e-8


@dataclass
class DensifyConfig:
    alpha: float = 0.8
    beta: float = 0.1
    gamma: float = 0.1
    grad_threshold: float = 0.0002
    interval: int = 100
    prune_opacity: float = 0.005
    percentile: float = 0.9
    min_anchors: int = 1
    max_anchors: int = 20000
    weight_floor: float = 0.01
    # an anchor must have collected this fraction of a fully weighted window
    min_evidence: float = 0.4
    feature_noise: float = 0.01
    deformation_aware: bool = True

    def __post_init__(self):
        if min(self.alpha, self.beta, self.gamma) < 0:
            raise ValueError("alpha, beta, gamma must be non-negative")
        if not math.isclose(self.alpha + self.beta + self.gamma, 1.0, abs_tol=1e-9):
            raise ValueError("alpha + beta + gamma must equal 1")
        if not 0.0 < self.percentile < 1.0:
            raise ValueError("percentile must lie in (0, 1)")
        if self.interval < 1:
            raise ValueError("interval must be >= 1")
        if not 0 <= self.min_anchors <= self.max_anchors:
            raise ValueError("need 0 <= min_anchors <= max_anchors")


def deformation_weight(dx, dl, dq_angle, s_x, s_l, s_q, cfg: DensifyConfig = DensifyConfig()):
    """``alpha |dx|/s_x + beta |dl|/s_l + gamma angle/s_q``.

    ``dx`` and ``dl`` are magnitudes (or vectors, reduced by their norm along
    the last axis when they are arrays with more than one dimension).
    """
    if min(s_x, s_l, s_q) <= 0:
        raise ValueError("reference values must be positive")
    dx = np.asarray(dx, dtype=np.float64)
    dl = np.asarray(dl, dtype=np.float64)
    if dx.ndim == 2:
        dx = np.linalg.norm(dx, axis=1)
    if dl.ndim == 2:
        dl = np.linalg.norm(dl, axis=1)
    w = cfg.alpha * dx / s_x + cfg.beta * dl / s_l + cfg.gamma * np.asarray(dq_angle, dtype=np.float64) / s_q
    return float(w) if np.ndim(w) == 0 else w


def percentile_reference(values, p: float = 0.9) -> float:
    """Nearest-rank percentile (1-based rank ``ceil(p n)``), floored at 1e-8."""
    v = np.sort(np.asarray(values, dtype=np.float64).reshape(-1))
    if len(v) == 0:
        raise ValueError("percentile of an empty list")
    rank = min(max(math.ceil(p * len(v) - 1e-9), 1), len(v))
    return max(float(v[rank - 1]), EPS)


@dataclass
class DeformStats:
    dx_norm: np.ndarray
    dl_norm: np.ndarray
    dq_angle: np.ndarray
    s_x: float = field(init=False)
    s_l: float = field(init=False)
    s_q: float = field(init=False)
    p: float = 0.9

    def __post_init__(self):
        self.s_x = percentile_reference(self.dx_norm, self.p)
        self.s_l = percentile_reference(self.dl_norm, self.p)
        self.s_q = percentile_reference(self.dq_angle, self.p)


def deform_stats(delta, canonical_rotations, deformed_rotations, p: float = 0.9) -> DeformStats:
    return DeformStats(np.linalg.norm(delta.dx, axis=1), np.linalg.norm(delta.dl, axis=1),
                       np.atleast_1d(quaternion_angle(canonical_rotations, deformed_rotations)), p=p)


def anchor_weights(stats: DeformStats | None, n: int, cfg: DensifyConfig) -> np.ndarray:
    """Per-anchor accumulation weights for one iteration (all ones without DAD)."""
    if not cfg.deformation_aware or stats is None:
        return np.ones(n)
    w = deformation_weight(stats.dx_norm, stats.dl_norm, stats.dq_angle, stats.s_x, stats.s_l, stats.s_q, cfg)
    return np.maximum(w, cfg.weight_floor)


def weighted_gradient(weights, norms) -> float:
    """``sum(w |g|) / sum(w)`` for one anchor over a window; 0 with no weight."""
    w = np.asarray(weights, dtype=np.float64)
    g = np.asarray(norms, dtype=np.float64)
    den = w.sum()
    return float((w * g).sum() / den) if den > 0 else 0.0


def accumulate(model: CanonicalModel, visible, child_grad, child_seen, weights, child_opacity=None) -> None:
    """Add one iteration of evidence for the ``visible`` anchors.

    ``child_grad`` and ``child_seen`` are (V, k): screen-space gradient norms
    of each child Gaussian and whether it was rendered. ``weights`` holds one
    weight per visible anchor.
    """
    visible = np.asarray(visible, dtype=np.int64)
    if len(visible) == 0:
        return
    seen = np.asarray(child_seen, dtype=bool)
    g = np.where(seen, child_grad, 0.0)
    cnt = seen.sum(axis=1)
    w = np.asarray(weights, dtype=np.float64)
    has = cnt > 0
    mean = np.where(has, g.sum(axis=1) / np.maximum(cnt, 1), 0.0)
    idx = visible[has]
    model.grad_num[idx] += w[has] * mean[has]
    model.grad_den[idx] += w[has]
    model.child_num[visible] += w[:, None] * g
    model.child_den[visible] += w[:, None] * seen
    if child_opacity is not None:
        model.opacity_accum[visible] += np.mean(child_opacity, axis=1)
        model.obs_count[visible] += 1


def mean_gradient(model: CanonicalModel) -> np.ndarray:
    out = np.zeros(len(model))
    ok = model.grad_den > 0
    out[ok] = model.grad_num[ok] / model.grad_den[ok]
    return out


@dataclass
class DensifyReport:
    step: int
    grown: int
    pruned: int
    count: int
    grown_by_region: dict = field(default_factory=dict)
    kept: np.ndarray | None = None  # survivors among the anchors present before the event

    def as_record(self) -> dict:
        return {"event": "densify", "step": self.step, "grown": self.grown, "pruned": self.pruned,
                "anchors": self.count, "grown_by_region": self.grown_by_region}


def grow_and_prune(model: CanonicalModel, cfg: DensifyConfig, step: int, rng: np.random.Generator,
                   region_of=None) -> DensifyReport:
    """One densification event; mutates ``model`` and resets its statistics.

    ``region_of`` optionally maps canonical positions to region labels for the
    report tallies.
    """
    n = len(model)
    grad = mean_gradient(model)
    evidence = model.grad_den > cfg.min_evidence * cfg.interval
    cand = np.nonzero(evidence & (grad > cfg.grad_threshold))[0]
    cand = cand[np.argsort(-grad[cand], kind="stable")]

    # pruning: low mean opacity over the window, never for anchors born inside it
    observed = model.obs_count > 0
    mean_op = np.where(observed, model.opacity_accum / np.maximum(model.obs_count, 1), np.inf)
    prune = observed & (mean_op < cfg.prune_opacity) & (model.born_step <= step - cfg.interval)
    n_prune = int(prune.sum())
    if n - n_prune < cfg.min_anchors:
        allowed = max(n - cfg.min_anchors, 0)
        order = np.argsort(np.where(prune, mean_op, np.inf), kind="stable")[:allowed]
        prune = np.zeros(n, dtype=bool)
        prune[order] = True
    excess = n - int(prune.sum()) - cfg.max_anchors
    if excess > 0:
        # drop the dimmest survivors; unobserved and young anchors go last
        young = model.born_step > step - cfg.interval
        order = np.lexsort((np.where(prune, np.inf, mean_op), young | prune))[:excess]
        prune[order] = True
    budget = max(cfg.max_anchors - (n - int(prune.sum())), 0)

    occupied = {tuple(key) for key in model.voxel_keys()[~prune]}
    new_cells, parents = [], []
    for i in cand:
        if len(new_cells) >= budget:
            break
        ratio = np.where(model.child_den[i] > 0, model.child_num[i] / np.maximum(model.child_den[i], 1e-30), -1.0)
        j = int(np.argmax(ratio))
        child = model.positions[i] + model.offsets[i, j] * np.exp(model.log_scaling[i, :3])
        key = tuple(model.voxel_keys(child[None])[0])
        if key in occupied:
            continue
        occupied.add(key)
        new_cells.append(key)
        parents.append(i)

    grown_by_region = {}
    if new_cells:
        centers = np.asarray(new_cells, dtype=np.float64) * model.voxel_size
        parents = np.asarray(parents)
        feats = model.features[parents] + rng.normal(0.0, cfg.feature_noise, (len(parents), model.features.shape[1]))
        _, log_s, rots, offs = fresh_anchor_params(centers, model.voxel_size, model.k, rng, features=feats)
        if region_of is not None:
            labels, counts = np.unique(np.asarray(region_of(centers)), return_counts=True)
            grown_by_region = {str(lab): int(c) for lab, c in zip(labels, counts)}
    model.keep(~prune)
    if new_cells:
        model.append(centers, feats, log_s, rots, offs, step=step)
    model.reset_stats()
    return DensifyReport(step, len(new_cells), int(prune.sum()), len(model), grown_by_region, ~prune)
