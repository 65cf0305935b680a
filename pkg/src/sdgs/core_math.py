"""Geometric primitives shared by every stage of the pipeline.

Quaternions are stored as ``(w, x, y, z)`` arrays. Batched functions accept
leading dimensions and operate on the last axis.

Cameras follow the OpenCV convention: x right, y down, z forward, and a
pixel ``(row, col)`` has its center at ``(col + 0.5, row + 0.5)``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

LOWPASS = 0.3
NEAR = 0.01
NORM_TOL = 1e-6


class PointBehindCamera(ValueError):
    pass


# ---------------------------------------------------------------------------
# quaternions


def quat_identity(n: int | None = None) -> np.ndarray:
    if n is None:
        return np.array([1.0, 0.0, 0.0, 0.0])
    q = np.zeros((n, 4))
    q[:, 0] = 1.0
    return q


def quat_normalize(q: np.ndarray) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    n = np.linalg.norm(q, axis=-1, keepdims=True)
    if np.any(n == 0):
        raise ValueError("cannot normalize a zero quaternion")
    return q / n


def quat_from_axis_angle(axis, angle: float) -> np.ndarray:
    axis = np.asarray(axis, dtype=np.float64)
    axis = axis / np.linalg.norm(axis)
    h = 0.5 * angle
    return np.concatenate([[np.cos(h)], np.sin(h) * axis])


def quat_multiply(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Hamilton product ``a * b``."""
    aw, ax, ay, az = np.moveaxis(np.asarray(a, dtype=np.float64), -1, 0)
    bw, bx, by, bz = np.moveaxis(np.asarray(b, dtype=np.float64), -1, 0)
    return np.stack(
        [
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        ],
        axis=-1,
    )


def quat_to_matrix(q: np.ndarray) -> np.ndarray:
    """Rotation matrix of a unit quaternion (batched over leading axes).

    ``q`` and ``-q`` give the same matrix since every entry is quadratic.
    """
    q = np.asarray(q, dtype=np.float64)
    w, x, y, z = np.moveaxis(q, -1, 0)
    r = np.empty(q.shape[:-1] + (3, 3))
    r[..., 0, 0] = 1 - 2 * (y * y + z * z)
    r[..., 0, 1] = 2 * (x * y - w * z)
    r[..., 0, 2] = 2 * (x * z + w * y)
    r[..., 1, 0] = 2 * (x * y + w * z)
    r[..., 1, 1] = 1 - 2 * (x * x + z * z)
    r[..., 1, 2] = 2 * (y * z - w * x)
    r[..., 2, 0] = 2 * (x * z - w * y)
    r[..., 2, 1] = 2 * (y * z + w * x)
    r[..., 2, 2] = 1 - 2 * (x * x + y * y)
    return r


def quat_to_matrix_backward(q: np.ndarray, grad_r: np.ndarray) -> np.ndarray:
    """Gradient w.r.t. the (already unit) quaternion given dL/dR."""
    w, x, y, z = np.moveaxis(np.asarray(q, dtype=np.float64), -1, 0)
    g = grad_r
    g00, g01, g02 = g[..., 0, 0], g[..., 0, 1], g[..., 0, 2]
    g10, g11, g12 = g[..., 1, 0], g[..., 1, 1], g[..., 1, 2]
    g20, g21, g22 = g[..., 2, 0], g[..., 2, 1], g[..., 2, 2]
    dw = 2 * (-z * g01 + y * g02 + z * g10 - x * g12 - y * g20 + x * g21)
    dx = 2 * (y * g01 + z * g02 + y * g10 - 2 * x * g11 - w * g12 + z * g20 + w * g21 - 2 * x * g22)
    dy = 2 * (-2 * y * g00 + x * g01 + w * g02 + x * g10 + z * g12 - w * g20 + z * g21 - 2 * y * g22)
    dz = 2 * (-2 * z * g00 - w * g01 + x * g02 + w * g10 - 2 * z * g11 + y * g12 + x * g20 + y * g21)
    return np.stack([dw, dx, dy, dz], axis=-1)


def normalize_backward(v: np.ndarray, grad_u: np.ndarray) -> np.ndarray:
    """Backward of ``u = v / |v|`` along the last axis."""
    n = np.linalg.norm(v, axis=-1, keepdims=True)
    u = v / n
    return (grad_u - u * np.sum(u * grad_u, axis=-1, keepdims=True)) / n


def quaternion_angle(q_orig: np.ndarray, q_def: np.ndarray) -> np.ndarray | float:
    """Rotation angle between two unit quaternions, in ``[0, pi]``.

    ``2 * arccos(clip(|<q_orig, q_def>|, 0, 1))``; the absolute value folds
    the double cover so ``q`` and ``-q`` are zero apart.
    """
    dot = np.abs(np.sum(np.asarray(q_orig, dtype=np.float64) * np.asarray(q_def, dtype=np.float64), axis=-1))
    out = 2.0 * np.arccos(np.clip(dot, 0.0, 1.0))
    return float(out) if np.ndim(out) == 0 else out


# ---------------------------------------------------------------------------
# covariances


def covariance_from_scale_rotation(s: np.ndarray, q: np.ndarray) -> np.ndarray:
    """``R(q) diag(s)^2 R(q)^T`` for positive scales, batched."""
    s = np.asarray(s, dtype=np.float64)
    if np.any(s <= 0):
        raise ValueError("scales must be strictly positive")
    m = quat_to_matrix(q) * s[..., None, :]
    cov = m @ np.swapaxes(m, -1, -2)
    return 0.5 * (cov + np.swapaxes(cov, -1, -2))


def covariance_backward(s, q, grad_cov):
    """Gradients of ``R diag(s)^2 R^T`` w.r.t. ``s`` and the unit ``q``."""
    r = quat_to_matrix(q)
    m = r * s[..., None, :]
    gsym = grad_cov + np.swapaxes(grad_cov, -1, -2)
    grad_m = gsym @ m
    grad_s = np.sum(grad_m * r, axis=-2)
    grad_r = grad_m * s[..., None, :]
    return grad_s, quat_to_matrix_backward(q, grad_r)


# ---------------------------------------------------------------------------
# camera


@dataclass(frozen=True)
class Camera:
    """Pinhole camera with world-to-camera transform ``p_cam = R p + t``."""

    rotation: np.ndarray
    translation: np.ndarray
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        r = np.asarray(self.rotation, dtype=np.float64)
        if r.shape != (3, 3) or not np.allclose(r @ r.T, np.eye(3), atol=NORM_TOL):
            raise ValueError("camera rotation must be orthonormal")
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", np.asarray(self.translation, dtype=np.float64).reshape(3))

    @property
    def position(self) -> np.ndarray:
        return -self.rotation.T @ self.translation

    @classmethod
    def look_at(cls, eye, target, up, focal, width, height) -> "Camera":
        eye = np.asarray(eye, dtype=np.float64)
        fwd = np.asarray(target, dtype=np.float64) - eye
        fwd /= np.linalg.norm(fwd)
        right = np.cross(fwd, np.asarray(up, dtype=np.float64))
        if np.linalg.norm(right) < 1e-9:
            raise ValueError("up vector is parallel to the viewing direction")
        right /= np.linalg.norm(right)
        down = np.cross(fwd, right)
        rot = np.stack([right, down, fwd])
        return cls(rot, -rot @ eye, focal, focal, width / 2.0, height / 2.0, width, height)

    def to_camera(self, points: np.ndarray) -> np.ndarray:
        return np.asarray(points, dtype=np.float64) @ self.rotation.T + self.translation

    def project(self, points: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Pixel coordinates and depth of world points (no culling)."""
        p = self.to_camera(points)
        z = p[..., 2]
        with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
            uv = np.stack([self.fx * p[..., 0] / z + self.cx, self.fy * p[..., 1] / z + self.cy], axis=-1)
        return uv, z

    def to_dict(self) -> dict:
        return {
            "rotation": self.rotation.tolist(),
            "translation": self.translation.tolist(),
            "fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy,
            "width": self.width, "height": self.height,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Camera":
        return cls(np.array(d["rotation"]), np.array(d["translation"]), d["fx"], d["fy"],
                   d["cx"], d["cy"], int(d["width"]), int(d["height"]))


def projection_jacobian(p_cam: np.ndarray, fx: float, fy: float) -> np.ndarray:
    x, y, z = p_cam[..., 0], p_cam[..., 1], p_cam[..., 2]
    j = np.zeros(p_cam.shape[:-1] + (2, 3))
    j[..., 0, 0] = fx / z
    j[..., 0, 2] = -fx * x / (z * z)
    j[..., 1, 1] = fy / z
    j[..., 1, 2] = -fy * y / (z * z)
    return j


def project_covariance(cov: np.ndarray, mean: np.ndarray, cam: Camera, lowpass: float = LOWPASS) -> np.ndarray:
    """Screen-space covariance ``J W cov W^T J^T`` plus the low-pass floor.

    Raises :class:`PointBehindCamera` when any mean has depth <= NEAR.
    """
    p = cam.to_camera(mean)
    if np.any(p[..., 2] <= NEAR):
        raise PointBehindCamera("mean is not in front of the camera")
    t = projection_jacobian(p, cam.fx, cam.fy) @ cam.rotation
    c2 = t @ cov @ np.swapaxes(t, -1, -2)
    c2 = 0.5 * (c2 + np.swapaxes(c2, -1, -2))
    return c2 + lowpass * np.eye(2)


def project_backward(cov, mean, cam: Camera, grad_mean2d, grad_cov2d):
    """Gradients of ``(mean2d, cov2d)`` w.r.t. world ``mean`` and ``cov``.

    Includes the dependence of the Jacobian on the mean.
    """
    rot = cam.rotation
    p = cam.to_camera(mean)
    x, y, z = p[:, 0], p[:, 1], p[:, 2]
    fx, fy = cam.fx, cam.fy
    j = projection_jacobian(p, fx, fy)
    t = j @ rot
    grad_cov = np.swapaxes(t, -1, -2) @ grad_cov2d @ t
    gsym = grad_cov2d + np.swapaxes(grad_cov2d, -1, -2)
    grad_j = (gsym @ t @ cov) @ rot.T
    gp = np.einsum("nij,nj->ni", np.swapaxes(j, -1, -2), grad_mean2d)
    iz2 = 1.0 / (z * z)
    iz3 = iz2 / z
    gp[:, 0] += grad_j[:, 0, 2] * (-fx * iz2)
    gp[:, 1] += grad_j[:, 1, 2] * (-fy * iz2)
    gp[:, 2] += (
        grad_j[:, 0, 0] * (-fx * iz2)
        + grad_j[:, 0, 2] * (2 * fx * x * iz3)
        + grad_j[:, 1, 1] * (-fy * iz2)
        + grad_j[:, 1, 2] * (2 * fy * y * iz3)
    )
    return gp @ rot, grad_cov


def gaussian_density(x, mean2d, cov2d) -> np.ndarray | float:
    """``exp(-1/2 d^T cov^-1 d)`` with ``d = x - mean2d``."""
    cov2d = np.asarray(cov2d, dtype=np.float64)
    det = cov2d[..., 0, 0] * cov2d[..., 1, 1] - cov2d[..., 0, 1] * cov2d[..., 1, 0]
    assert np.all(det > 0), "screen covariance is singular"
    d = np.asarray(x, dtype=np.float64) - np.asarray(mean2d, dtype=np.float64)
    inv = np.linalg.inv(cov2d)
    power = np.einsum("...i,...ij,...j->...", d, inv, d)
    out = np.exp(-0.5 * power)
    return float(out) if np.ndim(out) == 0 else out
