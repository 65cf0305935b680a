"""Two-stage optimization: a static coarse warm-up, then joint training of the
anchors, deformation field and generator with periodic densification."""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from .anchors import CanonicalModel
from .checkpoint import load_checkpoint, save_checkpoint, to_bytes
from .densify import DensifyConfig, accumulate, anchor_weights, deform_stats, grow_and_prune
from .losses import LossWeights, capped, psnr, ssim, total_loss
from .nn import AdamState, adam_step
from .scene import COARSE, FINE, DynamicScene
from .synth import Dataset, inside_ellipsoids, scene_gaussians

log = logging.getLogger(__name__)

ANCHOR_GROUPS = ("positions", "features", "log_scaling", "offsets")


class TrainingDiverged(RuntimeError):
    def __init__(self, step: int, diagnostics: dict):
        super().__init__(f"non-finite loss at step {step}")
        self.step = step
        self.diagnostics = diagnostics


@dataclass
class TrainConfig:
    coarse_steps: int = 500
    fine_steps: int = 5000
    seed: int = 0
    lr_position: float = 1.6e-4
    lr_position_final: float = 1.6e-6
    lr_feature: float = 2.5e-3
    lr_offset: float = 1e-2
    lr_scaling: float = 7e-3
    lr_grid: float = 1.6e-3
    lr_mlp: float = 2e-3  # attribute decoders
    lr_deform: float = 1.6e-4  # fusion network and deformation heads
    densify_from: int = 500
    densify_until: int = 3500
    densify_interval: int = 100
    grad_threshold: float = 0.0002
    prune_opacity: float = 0.005
    min_anchors: int = 1
    max_anchors: int = 20000
    dad: bool = True
    tin: bool = True
    use_dx: bool = True
    use_dl: bool = True
    use_dq: bool = True
    lambda_ssim: float = 0.2
    lambda_tv: float = 0.01
    lambda_vol: float = 0.01
    voxel_size: float = 0.1
    k: int = 5
    log_every: int = 50

    def __post_init__(self):
        if self.coarse_steps < 0 or self.fine_steps < 1:
            raise ValueError("need coarse_steps >= 0 and fine_steps >= 1")
        if not 0 <= self.densify_from <= self.densify_until <= self.fine_steps:
            raise ValueError("densification window must lie inside the fine stage")
        if self.densify_interval < 1:
            raise ValueError("densify_interval must be >= 1")

    @property
    def heads(self) -> tuple[str, ...]:
        return tuple(h for h, on in (("dx", self.use_dx), ("dl", self.use_dl), ("dq", self.use_dq)) if on)

    @property
    def total_steps(self) -> int:
        return self.coarse_steps + self.fine_steps

    def densify_config(self) -> DensifyConfig:
        return DensifyConfig(grad_threshold=self.grad_threshold, interval=self.densify_interval,
                             prune_opacity=self.prune_opacity, min_anchors=self.min_anchors,
                             max_anchors=self.max_anchors, deformation_aware=self.dad)

    def loss_weights(self) -> LossWeights:
        return LossWeights(self.lambda_ssim, self.lambda_tv, self.lambda_vol)

    @classmethod
    def field_names(cls) -> list[str]:
        return [f.name for f in fields(cls)]


PROFILES = {
    "desk": TrainConfig(),
    "paper": TrainConfig(coarse_steps=3000, fine_steps=140000, densify_from=1500, densify_until=15000),
}


def profile(name: str, **overrides) -> TrainConfig:
    if name not in PROFILES:
        raise ValueError(f"unknown profile {name!r}")
    return replace(PROFILES[name], **overrides)


class Trainer:
    """Owns the scene, optimizer moments, RNG and step counter.

    ``step`` counts completed iterations over both stages; the first
    ``coarse_steps`` are static.
    """

    def __init__(self, dataset: Dataset, cfg: TrainConfig = TrainConfig(), scene: DynamicScene | None = None,
                 log_path=None):
        self.dataset = dataset
        self.cfg = cfg
        self.pairs = dataset.pairs()
        if not self.pairs:
            raise ValueError("dataset has no training frames")
        self.scene = scene if scene is not None else DynamicScene.from_points(
            dataset.init_points, seed=cfg.seed, voxel_size=cfg.voxel_size, k=cfg.k, temporal=cfg.tin,
            heads=cfg.heads)
        self.rng = np.random.default_rng(cfg.seed + 1)
        self.step = 0
        self.opt: dict[str, AdamState] = {}
        self.losses: list[float] = []
        self.records: list[dict] = []
        self.densify_cfg = cfg.densify_config()
        self.weights = cfg.loss_weights()
        self.log_path = Path(log_path) if log_path is not None else None

    # bookkeeping -------------------------------------------------------------

    def stage(self, step: int | None = None) -> str:
        step = self.step if step is None else step
        return COARSE if step < self.cfg.coarse_steps else FINE

    def _emit(self, record: dict) -> None:
        self.records.append(record)
        if self.log_path is not None:
            with self.log_path.open("a") as fh:
                fh.write(json.dumps(record) + "\n")

    def _state(self, name: str, lr: float) -> AdamState:
        if name not in self.opt:
            self.opt[name] = AdamState(lr)
        return self.opt[name]

    def position_lr(self) -> float:
        c = self.cfg
        frac = min(self.step / max(c.total_steps - 1, 1), 1.0)
        return c.lr_position * (c.lr_position_final / c.lr_position) ** frac

    def _region_of(self, points):
        script = self.dataset.script
        dyn = scene_gaussians(script, 0.0, "dynamic")
        return np.where(inside_ellipsoids(points, dyn), "dynamic", "static")

    # one iteration -----------------------------------------------------------

    def train_step(self) -> float:
        c = self.cfg
        stage = self.stage()
        fine_step = self.step - c.coarse_steps
        cam_i, t_i = self.pairs[int(self.rng.integers(len(self.pairs)))]
        cam = self.dataset.cameras[cam_i]
        t = float(self.dataset.times[t_i])
        target = self.dataset.images[cam_i, t_i]
        sc = self.scene
        sc.zero_grad()
        img, cache = sc.forward(cam, t, stage)
        res = total_loss(img, target, sc.field.hexplane if stage == FINE else None, cache.rendered.scales,
                         self.weights)
        if not np.isfinite(res.total):
            raise TrainingDiverged(self.step, {"stage": stage, "camera": cam_i, "t": t, "terms": res.terms,
                                               "anchors": len(sc.model)})
        grads = sc.backward(cache, res.grad_image, res.grad_scales)

        accumulating = stage == FINE and c.densify_from - c.densify_interval <= fine_step < c.densify_until
        if accumulating:
            delta = cache.state.delta
            stats = deform_stats(delta, sc.model.rotations, cache.state.rotations) if self.densify_cfg.deformation_aware else None
            w = anchor_weights(stats, len(sc.model), self.densify_cfg)[cache.visible]
            v = len(cache.visible)
            accumulate(sc.model, cache.visible, grads.child_grad2d, grads.child_seen, w,
                       cache.all_gaussians.opacities.reshape(v, sc.model.k))

        self._apply(grads, stage)
        sc.round_params()
        bad = [n for n in CanonicalModel.PARAMS if not np.isfinite(getattr(sc.model, n)).all()]
        if bad:
            raise TrainingDiverged(self.step, {"stage": stage, "non_finite": bad, "anchors": len(sc.model)})
        self.step += 1
        self.losses.append(res.total)
        if self.step % c.log_every == 0 or self.step == c.total_steps:
            self._emit({"step": self.step, "stage": stage, "loss": res.total, **res.terms,
                        "psnr": capped(psnr(img, target)), "ssim": 1.0 - res.terms["ssim"],
                        "anchors": len(sc.model)})

        done = fine_step + 1
        if (stage == FINE and done % c.densify_interval == 0 and c.densify_from < done <= c.densify_until):
            self._densify(done)
        return res.total

    def _apply(self, grads, stage: str) -> None:
        c = self.cfg
        m = self.scene.model
        lrs = {"positions": self.position_lr(), "features": c.lr_feature, "log_scaling": c.lr_scaling,
               "offsets": c.lr_offset}
        for name in ANCHOR_GROUPS:
            st = self._state(name, lrs[name])
            adam_step(getattr(m, name), getattr(grads, name), st, lrs[name])
        for name, p, g in self.scene.net_params():
            net = name.split(".")[0]
            if net.startswith("gen_"):
                adam_step(p, g, self._state(name, c.lr_mlp))
            elif stage == FINE and self._net_active(net):
                adam_step(p, g, self._state(name, c.lr_deform))
        if stage == FINE:
            for name, p, g in self.scene.grid_params():
                adam_step(p, g, self._state(name, c.lr_grid))

    def _net_active(self, net: str) -> bool:
        enabled = self.scene.field.enabled
        if not enabled:
            return False
        if net == "fusion":
            return True
        return net.startswith("head_") and net[5:] in enabled

    def _densify(self, fine_step: int) -> None:
        m = self.scene.model
        rep = grow_and_prune(m, self.densify_cfg, self.step, self.rng, region_of=self._region_of)
        for name in ANCHOR_GROUPS:
            st = self.opt.get(name)
            if st is None or st.m is None:
                continue
            pad = np.zeros((rep.grown,) + st.m.shape[1:])
            st.m = np.concatenate([st.m[rep.kept], pad])
            st.v = np.concatenate([st.v[rep.kept], pad])
        self._emit(rep.as_record())

    # loops -------------------------------------------------------------------

    def run(self, steps: int | None = None) -> "Trainer":
        """Advance ``steps`` iterations (default: to the end of training)."""
        end = self.cfg.total_steps if steps is None else min(self.step + steps, self.cfg.total_steps)
        while self.step < end:
            self.train_step()
        return self

    def train_coarse(self) -> "Trainer":
        return self.run(max(self.cfg.coarse_steps - self.step, 0))

    def train_fine(self) -> "Trainer":
        return self.run()

    # persistence -------------------------------------------------------------

    def save(self, ckpt_path, state_path) -> None:
        """Write the model checkpoint plus a sidecar with optimizer, RNG and
        densification statistics."""
        save_checkpoint(self.scene, ckpt_path)
        m = self.scene.model
        arrays = {f"stat.{k}": getattr(m, k) for k in ("born_step", "grad_num", "grad_den", "child_num",
                                                       "child_den", "opacity_accum", "obs_count")}
        meta = {"step": self.step, "rng": self.rng.bit_generator.state, "config": asdict(self.cfg),
                "losses": self.losses, "opt": {}}
        for name, st in self.opt.items():
            meta["opt"][name] = {"lr": st.lr, "step": st.step, "init": st.m is not None}
            if st.m is not None:
                arrays[f"m.{name}"] = st.m
                arrays[f"v.{name}"] = st.v
        arrays["meta"] = np.frombuffer(json.dumps(meta).encode("utf-8"), dtype=np.uint8)
        with open(state_path, "wb") as fh:
            np.savez(fh, **arrays)

    @classmethod
    def resume(cls, dataset: Dataset, ckpt_path, state_path, log_path=None) -> "Trainer":
        scene = load_checkpoint(ckpt_path)
        with np.load(state_path) as z:
            arrays = {k: z[k] for k in z.files}
        meta = json.loads(arrays.pop("meta").tobytes().decode("utf-8"))
        cfg = TrainConfig(**meta["config"])
        tr = cls(dataset, cfg, scene=scene, log_path=log_path)
        tr.step = meta["step"]
        tr.rng.bit_generator.state = meta["rng"]
        tr.losses = list(meta["losses"])
        m = scene.model
        for k in ("born_step", "grad_num", "grad_den", "child_num", "child_den", "opacity_accum", "obs_count"):
            setattr(m, k, arrays[f"stat.{k}"])
        for name, info in meta["opt"].items():
            st = AdamState(info["lr"], step=info["step"])
            if info["init"]:
                st.m, st.v = arrays[f"m.{name}"], arrays[f"v.{name}"]
            tr.opt[name] = st
        return tr


# functional entry points -----------------------------------------------------


def train_coarse(dataset: Dataset, cfg: TrainConfig = TrainConfig(), scene: DynamicScene | None = None) -> Trainer:
    return Trainer(dataset, cfg, scene).train_coarse()


def train_fine(trainer: Trainer) -> Trainer:
    return trainer.train_fine()


def train(dataset: Dataset, cfg: TrainConfig = TrainConfig(), log_path=None) -> Trainer:
    return Trainer(dataset, cfg, log_path=log_path).run()


def evaluate(scene: DynamicScene, dataset: Dataset, cameras=None) -> dict:
    """Mean PSNR/SSIM over every (camera, t) of ``cameras`` (default held-out)."""
    cams = list(dataset.heldout if cameras is None else cameras)
    if not cams:
        raise ValueError("no cameras to evaluate")
    ps, ss = [], []
    for c in cams:
        for j, t in enumerate(dataset.times):
            img = scene.render(dataset.cameras[c], float(t))
            ps.append(capped(psnr(img, dataset.images[c, j])))
            ss.append(ssim(img, dataset.images[c, j]))
    return {"psnr": float(np.mean(ps)), "ssim": float(np.mean(ss)), "anchors": len(scene.model),
            "bytes": len(to_bytes(scene)), "frames": len(ps), "cameras": cams}


def region_density(scene: DynamicScene, dataset: Dataset, times=None) -> dict:
    """Anchors per occupied voxel inside the dynamic and static 3-sigma
    regions of the scripted scene, averaged over ``times``.

    Anchors are placed by their deformed position at each time.
    """
    times = dataset.times if times is None else times
    vs = scene.model.voxel_size
    out = {"dynamic": [], "static": []}
    for t in times:
        pos = scene.deform(float(t)).positions
        for region in out:
            g = scene_gaussians(dataset.script, float(t), region)
            if len(g.means) == 0:
                out[region].append(0.0)
                continue
            lo = np.floor((g.means.min(axis=0) - 0.5) / vs)
            hi = np.ceil((g.means.max(axis=0) + 0.5) / vs)
            axes = [np.arange(a, b + 1) * vs for a, b in zip(lo, hi)]
            centers = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, 3)
            voxels = int(inside_ellipsoids(centers, g).sum())
            anchors = int(inside_ellipsoids(pos, g).sum())
            out[region].append(anchors / max(voxels, 1))
    dyn, sta = float(np.mean(out["dynamic"])), float(np.mean(out["static"]))
    return {"dynamic": dyn, "static": sta, "ratio": dyn / sta if sta > 0 else float("inf")}
