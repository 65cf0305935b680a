"""Independent reference computations used by the tests."""

import numpy as np


def central_diff(f, x, h=1e-6):
    """Central finite-difference gradient of scalar ``f`` at array ``x``."""
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        fp = f(x)
        flat[i] = old - h
        fm = f(x)
        flat[i] = old
        gf[i] = (fp - fm) / (2 * h)
    return g


def rel_err(a, b, floor=1e-8):
    """Max relative error, normalized by the larger of the two magnitudes."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    scale = max(np.abs(a).max(initial=0.0), np.abs(b).max(initial=0.0), floor)
    return float(np.abs(a - b).max(initial=0.0) / scale)


def blend_stack(alphas, colors, background):
    """Front-to-back compositing of one pixel's fragment list, written
    directly from the blend series with the same clip and cut-off rules."""
    t = 1.0
    out = np.zeros(3)
    trans = [t]
    for a, c in zip(alphas, colors):
        a = min(a, 0.999)
        if t * (1 - a) < 1e-4:
            break
        out += np.asarray(c) * a * t
        t *= 1 - a
        trans.append(t)
    return out + t * np.asarray(background), trans


def ssim_pixel(x, y, i, j, size=11, sigma=1.5, c1=0.01**2, c2=0.03**2):
    """SSIM at pixel (i, j) of single-channel images by an explicit weighted
    window sum; samples outside the image count as zero."""
    half = size // 2
    w1 = np.exp(-((np.arange(size) - half) ** 2) / (2 * sigma**2))
    w1 /= w1.sum()
    mu1 = mu2 = e11 = e22 = e12 = 0.0
    for a in range(size):
        for b in range(size):
            r, c = i + a - half, j + b - half
            if 0 <= r < x.shape[0] and 0 <= c < x.shape[1]:
                w = w1[a] * w1[b]
                mu1 += w * x[r, c]
                mu2 += w * y[r, c]
                e11 += w * x[r, c] ** 2
                e22 += w * y[r, c] ** 2
                e12 += w * x[r, c] * y[r, c]
    s11, s22, s12 = e11 - mu1**2, e22 - mu2**2, e12 - mu1 * mu2
    return ((2 * mu1 * mu2 + c1) * (2 * s12 + c2)) / ((mu1**2 + mu2**2 + c1) * (s11 + s22 + c2))
