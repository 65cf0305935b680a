"""Training objective terms with analytic gradients, and image metrics."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.ndimage import correlate1d

PSNR_CAP = 100.0
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
C1 = 0.01**2
C2 = 0.03**2


@dataclass(frozen=True)
class LossWeights:
    ssim: float = 0.2
    tv: float = 0.01
    vol: float = 0.01

    def __post_init__(self):
        if min(self.ssim, self.tv, self.vol) < 0:
            raise ValueError("loss weights must be non-negative")


def _check(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"image shapes differ: {a.shape} vs {b.shape}")
    return a, b


def l1_loss(rendered, target):
    """Mean absolute error and its gradient w.r.t. ``rendered``."""
    r, t = _check(rendered, target)
    d = r - t
    return float(np.mean(np.abs(d))), np.sign(d) / d.size


def _window():
    x = np.arange(SSIM_WINDOW) - SSIM_WINDOW // 2
    w = np.exp(-(x**2) / (2 * SSIM_SIGMA**2))
    return w / w.sum()


_W = _window()


def _blur(img):
    # separable gaussian over the two spatial axes, zero padded
    out = correlate1d(img, _W, axis=0, mode="constant")
    return correlate1d(out, _W, axis=1, mode="constant")


def _ssim_terms(x, y):
    mu1, mu2 = _blur(x), _blur(y)
    e11, e22, e12 = _blur(x * x), _blur(y * y), _blur(x * y)
    s11 = e11 - mu1 * mu1
    s22 = e22 - mu2 * mu2
    s12 = e12 - mu1 * mu2
    a1 = 2 * mu1 * mu2 + C1
    a2 = 2 * s12 + C2
    b1 = mu1 * mu1 + mu2 * mu2 + C1
    b2 = s11 + s22 + C2
    return (a1 * a2) / (b1 * b2), (mu1, mu2, a1, a2, b1, b2)


def ssim(a, b) -> float:
    """Mean SSIM over pixels and channels (11x11 gaussian window, sigma 1.5)."""
    a, b = _check(a, b)
    return float(np.mean(_ssim_terms(a, b)[0]))


def ssim_loss(rendered, target):
    """``1 - SSIM`` and its gradient w.r.t. ``rendered``."""
    x, y = _check(rendered, target)
    s_map, (mu1, mu2, a1, a2, b1, b2) = _ssim_terms(x, y)
    g = -np.ones_like(s_map) / s_map.size
    den = b1 * b2
    d_mu1 = 2 * mu2 * (a2 - a1) / den - 2 * mu1 * s_map * (1 / b1 - 1 / b2)
    d_e11 = -s_map / b2
    d_e12 = 2 * a1 / den
    grad = _blur(g * d_mu1) + 2 * x * _blur(g * d_e11) + y * _blur(g * d_e12)
    return 1.0 - float(np.mean(s_map)), grad


def tv_loss(field):
    """Sum over every plane and level of the mean squared difference between
    neighbouring grid cells along each of the two plane axes."""
    total = 0.0
    grads = []
    for level in field.grids:
        glevel = []
        for grid in level:
            g = np.zeros_like(grid)
            for axis in (0, 1):
                if grid.shape[axis] < 2:
                    continue
                d = np.diff(grid, axis=axis)
                total += float(np.mean(d * d))
                gd = 2 * d / d.size
                sl_hi = [slice(None)] * 3
                sl_lo = [slice(None)] * 3
                sl_hi[axis] = slice(1, None)
                sl_lo[axis] = slice(None, -1)
                g[tuple(sl_hi)] += gd
                g[tuple(sl_lo)] -= gd
            glevel.append(g)
        grads.append(glevel)
    return total, grads


def volume_reg(scales):
    """Mean over Gaussians of the product of their three scales."""
    s = np.asarray(scales, dtype=np.float64).reshape(-1, 3)
    if len(s) == 0:
        return 0.0, np.zeros_like(s)
    prod = np.prod(s, axis=1)
    grad = np.stack([s[:, 1] * s[:, 2], s[:, 0] * s[:, 2], s[:, 0] * s[:, 1]], axis=1) / len(s)
    return float(np.mean(prod)), grad


@dataclass
class LossResult:
    total: float
    terms: dict
    grad_image: np.ndarray
    grad_scales: np.ndarray


def total_loss(rendered, target, field=None, scales=None, weights: LossWeights = LossWeights(),
               accumulate_grid_grads: bool = True) -> LossResult:
    """``L1 + w_ssim * L_ssim + w_tv * L_tv + w_vol * L_vol``.

    The TV gradient is added straight into ``field.grid_grads`` when a field
    is supplied.
    """
    l1, g_img = l1_loss(rendered, target)
    terms = {"l1": l1, "ssim": 0.0, "tv": 0.0, "vol": 0.0}
    total = l1
    if weights.ssim:
        v, g = ssim_loss(rendered, target)
        terms["ssim"] = v
        total += weights.ssim * v
        g_img = g_img + weights.ssim * g
    if field is not None and weights.tv:
        v, grads = tv_loss(field)
        terms["tv"] = v
        total += weights.tv * v
        if accumulate_grid_grads:
            for lv, level in enumerate(grads):
                for p, g in enumerate(level):
                    field.grid_grads[lv][p] += weights.tv * g
    g_scales = np.zeros((0, 3)) if scales is None else np.zeros_like(np.asarray(scales, dtype=np.float64))
    if scales is not None and weights.vol:
        v, g = volume_reg(scales)
        terms["vol"] = v
        total += weights.vol * v
        g_scales = weights.vol * g
    return LossResult(total, terms, g_img, g_scales)


def mse(a, b) -> float:
    a, b = _check(a, b)
    return float(np.mean((a - b) ** 2))


def psnr(rendered, target) -> float:
    """``10 log10(1 / MSE)`` on unit range; identical images give ``inf``."""
    m = mse(rendered, target)
    return float("inf") if m == 0 else float(10.0 * np.log10(1.0 / m))


def capped(value: float, cap: float = PSNR_CAP) -> float:
    return min(value, cap)
