"""Reference tile-based Gaussian splatting on the CPU.

Forward: project every Gaussian (EWA), sort globally by depth, bin the
3-sigma screen rectangles into tiles, then blend front to back per pixel.
Backward: re-walk each pixel's blend list back to front and push exact
gradients to the 2-D means, conics, opacities and colors, then through the
projection to world means, scales and rotations.

The per-pixel loops are numba kernels. Both kernels record per (tile,
fragment) partial sums that are reduced in a fixed order, so results do not
depend on how tiles are scheduled.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numba
import numpy as np

from .core_math import (
    LOWPASS,
    NEAR,
    Camera,
    covariance_backward,
    covariance_from_scale_rotation,
    project_backward,
    projection_jacobian,
)

ALPHA_MAX = 0.999
T_MIN = 1e-4
CUTOFF = 9.0  # squared Mahalanobis radius (3 sigma)
DEFAULT_TILE = 16


class StaleCacheError(RuntimeError):
    pass


@dataclass
class Fragments:
    """Projected state of the Gaussians in front of one camera, depth sorted."""

    source: np.ndarray  # (F,) index into the input Gaussian arrays
    mean2d: np.ndarray  # (F, 2) pixels
    cov2d: np.ndarray  # (F, 2, 2) pixels^2, includes the low-pass floor
    conic: np.ndarray  # (F, 3) inverse covariance (a, b, c)
    depth: np.ndarray  # (F,)
    opacity: np.ndarray  # (F,)
    color: np.ndarray  # (F, 3)
    rect: np.ndarray  # (F, 4) int pixel bounds x0, x1, y0, y1 (half open)
    width: int
    height: int

    def __len__(self) -> int:
        return len(self.source)


def make_fragments(means, cov2d, depth, opacity, color, width, height, source=None) -> Fragments:
    """Build depth-sorted fragments from already projected quantities."""
    means = np.asarray(means, dtype=np.float64).reshape(-1, 2)
    cov2d = np.asarray(cov2d, dtype=np.float64).reshape(-1, 2, 2)
    depth = np.asarray(depth, dtype=np.float64).reshape(-1)
    if source is None:
        source = np.arange(len(depth))
    order = np.argsort(depth, kind="stable")
    means, cov2d, depth = means[order], cov2d[order], depth[order]
    det = cov2d[:, 0, 0] * cov2d[:, 1, 1] - cov2d[:, 0, 1] ** 2
    conic = np.stack([cov2d[:, 1, 1] / det, -cov2d[:, 0, 1] / det, cov2d[:, 0, 0] / det], axis=1)
    ru = 3.0 * np.sqrt(cov2d[:, 0, 0])
    rv = 3.0 * np.sqrt(cov2d[:, 1, 1])
    with np.errstate(invalid="ignore"):
        x0 = np.clip(np.ceil(means[:, 0] - ru - 0.5), 0, width)
        x1 = np.clip(np.floor(means[:, 0] + ru - 0.5) + 1, 0, width)
        y0 = np.clip(np.ceil(means[:, 1] - rv - 0.5), 0, height)
        y1 = np.clip(np.floor(means[:, 1] + rv - 0.5) + 1, 0, height)
    rect = np.stack([x0, x1, y0, y1], axis=1)
    rect = np.nan_to_num(rect, nan=0.0).astype(np.int64)
    return Fragments(
        source=np.asarray(source)[order],
        mean2d=means,
        cov2d=cov2d,
        conic=conic,
        depth=depth,
        opacity=np.asarray(opacity, dtype=np.float64).reshape(-1)[order],
        color=np.asarray(color, dtype=np.float64).reshape(-1, 3)[order],
        rect=rect,
        width=int(width),
        height=int(height),
    )


def _tile_csr(frags: Fragments, tile_size: int):
    """Tile -> fragment lists in CSR form (fragment order = depth order)."""
    if tile_size < 1:
        raise ValueError("tile_size must be >= 1")
    tiles_x = -(-frags.width // tile_size)
    tiles_y = -(-frags.height // tile_size)
    n_tiles = tiles_x * tiles_y
    r = frags.rect
    ok = (r[:, 0] < r[:, 1]) & (r[:, 2] < r[:, 3])
    idx = np.nonzero(ok)[0]
    tx0 = r[idx, 0] // tile_size
    tx1 = (r[idx, 1] - 1) // tile_size + 1
    ty0 = r[idx, 2] // tile_size
    ty1 = (r[idx, 3] - 1) // tile_size + 1
    nx = tx1 - tx0
    counts = nx * (ty1 - ty0)
    total = int(counts.sum())
    frag = np.repeat(idx, counts)
    local = np.arange(total) - np.repeat(np.cumsum(counts) - counts, counts)
    nx_rep = np.repeat(nx, counts)
    tile = (np.repeat(ty0, counts) + local // nx_rep) * tiles_x + np.repeat(tx0, counts) + local % nx_rep
    order = np.argsort(tile, kind="stable")
    tile_ids = frag[order].astype(np.int64)
    starts = np.zeros(n_tiles + 1, dtype=np.int64)
    np.cumsum(np.bincount(tile[order], minlength=n_tiles), out=starts[1:])
    return starts, tile_ids, tiles_x


def tile_partition(frags: Fragments, tile_size: int = DEFAULT_TILE) -> dict[tuple[int, int], list[int]]:
    """Map ``(tile_row, tile_col)`` to the source indices of the fragments
    whose 3-sigma rectangle touches that tile, in blend order."""
    starts, ids, tiles_x = _tile_csr(frags, tile_size)
    out = {}
    for t in range(len(starts) - 1):
        if starts[t + 1] > starts[t]:
            out[(t // tiles_x, t % tiles_x)] = [int(frags.source[i]) for i in ids[starts[t] : starts[t + 1]]]
    return out


# ---------------------------------------------------------------------------
# kernels


@numba.njit(cache=True, parallel=True)
def _forward_kernel(starts, ids, mean2d, conic, opac, color, rect, width, height, ts, tiles_x, bg, img, final_t, n_used):
    n_tiles = len(starts) - 1
    for tile in numba.prange(n_tiles):
        ty = tile // tiles_x
        tx = tile - ty * tiles_x
        s = starts[tile]
        e = starts[tile + 1]
        for py in range(ty * ts, min(ty * ts + ts, height)):
            for px in range(tx * ts, min(tx * ts + ts, width)):
                t = 1.0
                c0 = 0.0
                c1 = 0.0
                c2 = 0.0
                used = 0
                for k in range(s, e):
                    g = ids[k]
                    if px < rect[g, 0] or px >= rect[g, 1] or py < rect[g, 2] or py >= rect[g, 3]:
                        continue
                    dx = px + 0.5 - mean2d[g, 0]
                    dy = py + 0.5 - mean2d[g, 1]
                    power = conic[g, 0] * dx * dx + 2.0 * conic[g, 1] * dx * dy + conic[g, 2] * dy * dy
                    if power > 9.0:
                        continue
                    a = opac[g] * np.exp(-0.5 * power)
                    if a > 0.999:
                        a = 0.999
                    test_t = t * (1.0 - a)
                    if test_t < 1e-4:
                        break
                    w = a * t
                    c0 += color[g, 0] * w
                    c1 += color[g, 1] * w
                    c2 += color[g, 2] * w
                    t = test_t
                    used += 1
                img[py, px, 0] = c0 + t * bg[0]
                img[py, px, 1] = c1 + t * bg[1]
                img[py, px, 2] = c2 + t * bg[2]
                final_t[py, px] = t
                n_used[py, px] = used


@numba.njit(cache=True, parallel=True)
def _backward_kernel(starts, ids, mean2d, conic, opac, color, rect, width, height, ts, tiles_x, bg, dimg,
                     e_mean, e_conic, e_opac, e_color):
    n_tiles = len(starts) - 1
    for tile in numba.prange(n_tiles):
        ty = tile // tiles_x
        tx = tile - ty * tiles_x
        s = starts[tile]
        e = starts[tile + 1]
        m = e - s
        if m == 0:
            continue
        lst = np.empty(m, dtype=np.int64)
        alphas = np.empty(m)
        trans = np.empty(m)
        dens = np.empty(m)
        clipped = np.empty(m, dtype=np.bool_)
        for py in range(ty * ts, min(ty * ts + ts, height)):
            for px in range(tx * ts, min(tx * ts + ts, width)):
                # replay the forward blend to recover the contributing list
                t = 1.0
                n = 0
                for k in range(s, e):
                    g = ids[k]
                    if px < rect[g, 0] or px >= rect[g, 1] or py < rect[g, 2] or py >= rect[g, 3]:
                        continue
                    dx = px + 0.5 - mean2d[g, 0]
                    dy = py + 0.5 - mean2d[g, 1]
                    power = conic[g, 0] * dx * dx + 2.0 * conic[g, 1] * dx * dy + conic[g, 2] * dy * dy
                    if power > 9.0:
                        continue
                    gd = np.exp(-0.5 * power)
                    a = opac[g] * gd
                    clip = a > 0.999
                    if clip:
                        a = 0.999
                    test_t = t * (1.0 - a)
                    if test_t < 1e-4:
                        break
                    lst[n] = k
                    alphas[n] = a
                    trans[n] = t
                    dens[n] = gd
                    clipped[n] = clip
                    t = test_t
                    n += 1
                d0 = dimg[py, px, 0]
                d1 = dimg[py, px, 1]
                d2 = dimg[py, px, 2]
                # color accumulated behind the current fragment, background included
                s0 = t * bg[0]
                s1 = t * bg[1]
                s2 = t * bg[2]
                for j in range(n - 1, -1, -1):
                    k = lst[j]
                    g = ids[k]
                    a = alphas[j]
                    tj = trans[j]
                    w = a * tj
                    e_color[k, 0] += w * d0
                    e_color[k, 1] += w * d1
                    e_color[k, 2] += w * d2
                    dl_da = tj * (color[g, 0] * d0 + color[g, 1] * d1 + color[g, 2] * d2)
                    dl_da -= (s0 * d0 + s1 * d1 + s2 * d2) / (1.0 - a)
                    s0 += color[g, 0] * w
                    s1 += color[g, 1] * w
                    s2 += color[g, 2] * w
                    if clipped[j]:
                        continue
                    gd = dens[j]
                    e_opac[k] += dl_da * gd
                    dl_dg = dl_da * opac[g] * gd
                    dx = px + 0.5 - mean2d[g, 0]
                    dy = py + 0.5 - mean2d[g, 1]
                    e_mean[k, 0] += dl_dg * (conic[g, 0] * dx + conic[g, 1] * dy)
                    e_mean[k, 1] += dl_dg * (conic[g, 1] * dx + conic[g, 2] * dy)
                    e_conic[k, 0] += -0.5 * dl_dg * dx * dx
                    e_conic[k, 1] += -dl_dg * dx * dy
                    e_conic[k, 2] += -0.5 * dl_dg * dy * dy


def _reduce(ids, values, n):
    out = np.zeros((n,) + values.shape[1:])
    width = int(np.prod(values.shape[1:]))
    flat = values.reshape(len(values), width)
    o = out.reshape(n, width)
    for c in range(flat.shape[1]):
        o[:, c] = np.bincount(ids, weights=flat[:, c], minlength=n)
    return out


# ---------------------------------------------------------------------------
# public API


@dataclass
class BlendCache:
    frags: Fragments
    starts: np.ndarray
    ids: np.ndarray
    tiles_x: int
    tile_size: int
    background: np.ndarray
    final_t: np.ndarray
    n_used: np.ndarray
    consumed: bool = False


def blend(frags: Fragments, background=(0.0, 0.0, 0.0), tile_size: int = DEFAULT_TILE):
    """Alpha-composite fragments front to back. Returns ``(image, cache)``."""
    bg = np.asarray(background, dtype=np.float64).reshape(3)
    starts, ids, tiles_x = _tile_csr(frags, tile_size)
    h, w = frags.height, frags.width
    img = np.empty((h, w, 3))
    final_t = np.empty((h, w))
    n_used = np.empty((h, w), dtype=np.int64)
    _forward_kernel(starts, ids, frags.mean2d, frags.conic, frags.opacity, frags.color, frags.rect,
                    w, h, tile_size, tiles_x, bg, img, final_t, n_used)
    return img, BlendCache(frags, starts, ids, tiles_x, tile_size, bg, final_t, n_used)


def blend_backward(cache: BlendCache, grad_image: np.ndarray) -> dict[str, np.ndarray]:
    """Gradients of the blend w.r.t. fragment mean2d, conic, opacity and color
    (indexed in fragment order)."""
    if cache.consumed:
        raise StaleCacheError("render cache was already consumed by a backward pass")
    f = cache.frags
    grad_image = np.ascontiguousarray(grad_image, dtype=np.float64)
    if grad_image.shape != (f.height, f.width, 3):
        raise StaleCacheError(f"gradient image shape {grad_image.shape} does not match the cached render")
    cache.consumed = True
    m = len(cache.ids)
    e_mean = np.zeros((m, 2))
    e_conic = np.zeros((m, 3))
    e_opac = np.zeros(m)
    e_color = np.zeros((m, 3))
    _backward_kernel(cache.starts, cache.ids, f.mean2d, f.conic, f.opacity, f.color, f.rect, f.width, f.height,
                     cache.tile_size, cache.tiles_x, cache.background, grad_image, e_mean, e_conic, e_opac, e_color)
    n = len(f)
    return {
        "mean2d": _reduce(cache.ids, e_mean, n),
        "conic": _reduce(cache.ids, e_conic, n),
        "opacity": _reduce(cache.ids, e_opac, n),
        "color": _reduce(cache.ids, e_color, n),
    }


@dataclass
class Gaussians:
    """Renderable primitives as parallel arrays."""

    means: np.ndarray  # (N, 3)
    scales: np.ndarray  # (N, 3) positive
    rotations: np.ndarray  # (N, 4) unit (w, x, y, z)
    opacities: np.ndarray  # (N,)
    colors: np.ndarray  # (N, 3)

    def __len__(self) -> int:
        return len(self.means)

    def subset(self, mask) -> "Gaussians":
        return Gaussians(self.means[mask], self.scales[mask], self.rotations[mask], self.opacities[mask],
                         self.colors[mask])

    @classmethod
    def empty(cls) -> "Gaussians":
        return cls(np.zeros((0, 3)), np.ones((0, 3)), np.zeros((0, 4)), np.zeros(0), np.zeros((0, 3)))


@dataclass
class RenderCache:
    gaussians: Gaussians
    cam: Camera
    front: np.ndarray  # indices of Gaussians in front of the near plane
    cov3d: np.ndarray
    blend: BlendCache


@dataclass
class RenderGrads:
    means: np.ndarray
    scales: np.ndarray
    rotations: np.ndarray
    opacities: np.ndarray
    colors: np.ndarray
    mean2d: np.ndarray
    grad2d_norm: np.ndarray = field(default=None)


def project_gaussians(g: Gaussians, cam: Camera, background=(0.0, 0.0, 0.0)):
    """Project to fragments; Gaussians at depth <= NEAR are culled."""
    p = cam.to_camera(g.means) if len(g) else np.zeros((0, 3))
    front = np.nonzero(p[:, 2] > NEAR)[0]
    cov3d = covariance_from_scale_rotation(g.scales[front], g.rotations[front]) if len(front) else np.zeros((0, 3, 3))
    pf = p[front]
    z = pf[:, 2]
    uv = np.stack([cam.fx * pf[:, 0] / z + cam.cx, cam.fy * pf[:, 1] / z + cam.cy], axis=1)
    t = projection_jacobian(pf, cam.fx, cam.fy) @ cam.rotation
    cov2d = t @ cov3d @ np.swapaxes(t, -1, -2)
    cov2d = 0.5 * (cov2d + np.swapaxes(cov2d, -1, -2)) + LOWPASS * np.eye(2)
    frags = make_fragments(uv, cov2d, z, g.opacities[front], g.colors[front], cam.width, cam.height, source=front)
    return frags, front, cov3d


def render(gaussians: Gaussians, cam: Camera, background=(0.0, 0.0, 0.0), tile_size: int = DEFAULT_TILE):
    """Render an ``(H, W, 3)`` image. Returns ``(image, cache)``."""
    frags, front, cov3d = project_gaussians(gaussians, cam)
    img, bc = blend(frags, background, tile_size)
    return img, RenderCache(gaussians, cam, front, cov3d, bc)


def render_backward(cache: RenderCache, grad_image: np.ndarray) -> RenderGrads:
    """Exact gradients of the render w.r.t. every Gaussian attribute, plus the
    per-Gaussian screen-space mean gradient norm."""
    g = cache.gaussians
    n = len(g)
    out = RenderGrads(np.zeros((n, 3)), np.zeros((n, 3)), np.zeros((n, 4)), np.zeros(n), np.zeros((n, 3)),
                      np.zeros((n, 2)), np.zeros(n))
    bg = blend_backward(cache.blend, grad_image)
    f = cache.blend.frags
    if len(f) == 0:
        return out
    src = f.source
    # conic (a, b, c) -> cov2d: dL/dS = -A G A with G the symmetric conic gradient
    a_mat = np.empty((len(f), 2, 2))
    a_mat[:, 0, 0] = f.conic[:, 0]
    a_mat[:, 0, 1] = a_mat[:, 1, 0] = f.conic[:, 1]
    a_mat[:, 1, 1] = f.conic[:, 2]
    gc = bg["conic"]
    g_mat = np.empty_like(a_mat)
    g_mat[:, 0, 0] = gc[:, 0]
    g_mat[:, 0, 1] = g_mat[:, 1, 0] = 0.5 * gc[:, 1]
    g_mat[:, 1, 1] = gc[:, 2]
    grad_cov2d = -a_mat @ g_mat @ a_mat
    # fragments are depth sorted; map back to the order of `front`
    pos = np.empty(n, dtype=np.int64)
    pos[cache.front] = np.arange(len(cache.front))
    k = pos[src]
    means = g.means[src]
    cov3d = cache.cov3d[k]
    grad_means, grad_cov3d = project_backward(cov3d, means, cache.cam, bg["mean2d"], grad_cov2d)
    grad_s, grad_q = covariance_backward(g.scales[src], g.rotations[src], grad_cov3d)
    out.means[src] = grad_means
    out.scales[src] = grad_s
    out.rotations[src] = grad_q
    out.opacities[src] = bg["opacity"]
    out.colors[src] = bg["color"]
    out.mean2d[src] = bg["mean2d"]
    out.grad2d_norm[src] = np.linalg.norm(bg["mean2d"], axis=1)
    return out
