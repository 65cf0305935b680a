"""Binary checkpoint of a trained dynamic scene.

Layout (little endian):
  magic ``SDGS``, u32 version, f64 voxel size, u32 k, u32 anchor count,
  u32 config length + UTF-8 JSON config,
  anchor records (position 3, feature 32, log scaling 6, rotation 4, offsets 3k) as f32,
  u32 network count, then per network: u32 name length, name, MlpNet bytes,
  u32 grid count, then per grid: u32 level, u32 axes tag (10 * a + b),
  u32 width, u32 height, u32 channels, f32 row-major values.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .anchors import FEATURE_DIM, CanonicalModel
from .deformation import PLANES, DeformationField, HexPlaneField
from .generation import GaussianGenerator
from .nn import MlpNet, TemporalEmbedding
from .scene import DynamicScene

MAGIC = b"SDGS"
VERSION = 1


class CheckpointError(OSError):
    pass


class VersionError(CheckpointError):
    """Bad magic bytes or an unsupported format version."""


class TruncatedError(CheckpointError):
    pass


def _config(scene: DynamicScene) -> dict:
    gen = scene.generator
    hp = scene.field.hexplane
    emb = gen.embedding
    return {
        "bbox_min": hp.bbox_min.tolist(),
        "bbox_max": hp.bbox_max.tolist(),
        "resolutions": list(hp.resolutions),
        "d_plane": hp.d_plane,
        "heads": list(scene.field.enabled),
        "temporal": gen.temporal,
        "use_distance": gen.use_distance,
        "embedding": {"bands": emb.bands, "base": emb.base, "append_raw": emb.append_raw},
        "background": list(scene.background),
    }


def to_bytes(scene: DynamicScene) -> bytes:
    m = scene.model
    n, k = len(m), m.k
    cfg = json.dumps(_config(scene)).encode("utf-8")
    parts = [MAGIC, struct.pack("<IdII", VERSION, m.voxel_size, k, n), struct.pack("<I", len(cfg)), cfg]
    records = np.concatenate([m.positions, m.features, m.log_scaling, m.rotations, m.offsets.reshape(n, 3 * k)],
                             axis=1)
    parts.append(np.ascontiguousarray(records, dtype="<f4").tobytes())
    nets = scene.nets()
    parts.append(struct.pack("<I", len(nets)))
    for name, net in nets.items():
        raw = name.encode("utf-8")
        parts += [struct.pack("<I", len(raw)), raw, net.to_bytes()]
    grids = list(scene.field.hexplane.all_grids())
    parts.append(struct.pack("<I", len(grids)))
    for lv, p, g, _ in grids:
        a, b = PLANES[p]
        parts.append(struct.pack("<IIIII", lv, 10 * a + b, g.shape[1], g.shape[0], g.shape[2]))
        parts.append(np.ascontiguousarray(g, dtype="<f4").tobytes())
    return b"".join(parts)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise TruncatedError("checkpoint is truncated")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def floats(self, count: int) -> np.ndarray:
        return np.frombuffer(self.take(4 * count), dtype="<f4").astype(np.float64)


def from_bytes(buf: bytes) -> DynamicScene:
    r = _Reader(buf)
    if r.take(4) != MAGIC:
        raise VersionError("not a checkpoint (bad magic)")
    version, voxel, k, n = r.unpack("<IdII")
    if version != VERSION:
        raise VersionError(f"unsupported checkpoint version {version}")
    (clen,) = r.unpack("<I")
    cfg = json.loads(r.take(clen).decode("utf-8"))
    width = 3 + FEATURE_DIM + 6 + 4 + 3 * k
    rec = r.floats(n * width).reshape(n, width)
    c = np.cumsum([0, 3, FEATURE_DIM, 6, 4, 3 * k])
    model = CanonicalModel(rec[:, c[0]:c[1]], rec[:, c[1]:c[2]], rec[:, c[2]:c[3]], rec[:, c[3]:c[4]],
                           rec[:, c[4]:c[5]].reshape(n, k, 3), float(voxel))
    (n_nets,) = r.unpack("<I")
    nets = {}
    for _ in range(n_nets):
        (ln,) = r.unpack("<I")
        name = r.take(ln).decode("utf-8")
        try:
            net, end = MlpNet.from_bytes(r.buf, r.pos)
        except (EOFError, struct.error) as exc:
            raise TruncatedError("checkpoint is truncated") from exc
        r.pos = end
        nets[name] = net
    (n_grids,) = r.unpack("<I")
    levels: dict[int, dict[int, np.ndarray]] = {}
    for _ in range(n_grids):
        lv, tag, w, h, d = r.unpack("<IIIII")
        levels.setdefault(lv, {})[PLANES.index((tag // 10, tag % 10))] = r.floats(w * h * d).reshape(h, w, d)
    grids = [[levels[lv][p] for p in range(len(PLANES))] for lv in sorted(levels)]
    plane = HexPlaneField(cfg["bbox_min"], cfg["bbox_max"], cfg["resolutions"], cfg["d_plane"],
                          grids=grids, fusion=nets["fusion"])
    heads = {h: nets[f"head_{h}"] for h in DeformationField.HEADS}
    field = DeformationField(plane, heads=heads, enabled=tuple(cfg["heads"]))
    gen_nets = {name[4:]: net for name, net in nets.items() if name.startswith("gen_")}
    gen = GaussianGenerator(k, embedding=TemporalEmbedding(**cfg["embedding"]), temporal=cfg["temporal"],
                            use_distance=cfg["use_distance"], nets=gen_nets)
    return DynamicScene(model, field, gen, cfg["background"])


def save_checkpoint(scene: DynamicScene, path) -> int:
    data = to_bytes(scene)
    Path(path).write_bytes(data)
    return len(data)


def load_checkpoint(path) -> DynamicScene:
    p = Path(path)
    if not p.is_file():
        raise FileNotFoundError(f"{p} not found")
    return from_bytes(p.read_bytes())
