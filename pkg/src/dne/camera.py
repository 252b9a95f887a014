"""Orthographic camera and closed-form ridge camera correction.

A camera maps scene x, y to pixels with a per-axis scale and translation;
depth is ignored. Cameras are fitted per axis by ridge regression on the
design matrix ``[coord, 1]`` so that both scale and translation are
regularized.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

DET_EPS = 1e-12


@dataclass(frozen=True)
class Camera:
    sx: float
    sy: float
    tx: float
    ty: float

    def __post_init__(self):
        if not np.all(np.isfinite(self.as_array())):
            raise ValueError("camera parameters must be finite")

    def as_array(self) -> np.ndarray:
        return np.array([self.sx, self.sy, self.tx, self.ty], dtype=np.float64)

    @classmethod
    def from_array(cls, a) -> "Camera":
        a = np.asarray(a, dtype=np.float64)
        return cls(float(a[0]), float(a[1]), float(a[2]), float(a[3]))

    def to_json(self) -> str:
        return json.dumps({"sx": self.sx, "sy": self.sy, "tx": self.tx, "ty": self.ty})

    @classmethod
    def from_json(cls, text: str) -> "Camera":
        d = json.loads(text)
        return cls(float(d["sx"]), float(d["sy"]), float(d["tx"]), float(d["ty"]))


@dataclass(frozen=True)
class RidgeConfig:
    xi: float = 1e-4

    def __post_init__(self):
        if not np.isfinite(self.xi) or self.xi < 0:
            raise ValueError(f"xi must be finite and non-negative, got {self.xi}")


def _cam_array(c) -> np.ndarray:
    return c.as_array() if isinstance(c, Camera) else np.asarray(c, dtype=np.float64)


def project(v, c) -> np.ndarray:
    """Project points ``v`` (..., 3) with camera ``c`` (Camera or (..., 4) array)."""
    v = np.asarray(v, dtype=np.float64)
    c = _cam_array(c)
    s, t = c[..., None, :2], c[..., None, 2:]
    if v.ndim == 1:
        return c[:2] * v[:2] + c[2:]
    return s * v[..., :2] + t


def project_backward(v, c, grad):
    """Gradients of ``project`` w.r.t. vertices and camera for upstream ``grad`` (..., N, 2)."""
    c = _cam_array(c)
    gv = np.zeros(np.shape(v))
    gv[..., :2] = grad * c[..., None, :2]
    gc = np.concatenate([(grad * v[..., :2]).sum(axis=-2), grad.sum(axis=-2)], axis=-1)
    return gv, gc


def projection_residual(vertices, coords_2d, c) -> float:
    r = np.asarray(coords_2d, dtype=np.float64) - project(vertices, c)
    return float(np.sum(r * r))


def ridge_objective(vertices, coords_2d, c, xi: float) -> float:
    a = _cam_array(c)
    return projection_residual(vertices, coords_2d, a) + xi * float(a @ a)


def _solve_axis(x, y, xi):
    """Per-axis ridge solve, batched over leading dims of x, y (..., N)."""
    n = x.shape[-1]
    sxx = np.einsum("...n,...n->...", x, x) + xi
    sx = x.sum(axis=-1)
    nn = n + xi
    det = sxx * nn - sx * sx
    if np.any(np.abs(det) <= DET_EPS):
        raise np.linalg.LinAlgError("singular system")
    bx = np.einsum("...n,...n->...", x, y)
    by = y.sum(axis=-1)
    slope = (nn * bx - sx * by) / det
    icpt = (sxx * by - sx * bx) / det
    return slope, icpt, (sxx, sx, nn, det)


def fit_camera_array(vertices: np.ndarray, coords_2d: np.ndarray, xi: float) -> np.ndarray:
    """Batched ridge fit; returns (..., 4) arrays ``[sx, sy, tx, ty]``."""
    if vertices.shape[-2] < 2:
        raise ValueError("underdetermined: need at least 2 correspondences")
    ax, bx, _ = _solve_axis(vertices[..., 0], coords_2d[..., 0], xi)
    ay, by, _ = _solve_axis(vertices[..., 1], coords_2d[..., 1], xi)
    return np.stack([ax, ay, bx, by], axis=-1)


def fit_camera_backward(vertices, coords_2d, cam, xi, grad_cam):
    """Gradients of ``fit_camera_array`` w.r.t. vertices and 2D coordinates.

    With M = A^T A + xi I and lam = M^-1 g, dL/dy_n = lam . (x_n, 1) and
    dL/dx_n = lam_0 (y_n - 2 x_n s - t) - lam_1 s.
    """
    gv = np.zeros_like(vertices)
    gu = np.zeros_like(coords_2d)
    for axis in (0, 1):
        x, y = vertices[..., axis], coords_2d[..., axis]
        _, _, (sxx, sx, nn, det) = _solve_axis(x, y, xi)
        s, t = cam[..., axis], cam[..., 2 + axis]
        g0, g1 = grad_cam[..., axis], grad_cam[..., 2 + axis]
        lam0 = (nn * g0 - sx * g1) / det
        lam1 = (sxx * g1 - sx * g0) / det
        lam0, lam1, s, t = (a[..., None] for a in (lam0, lam1, s, t))
        gu[..., axis] = lam0 * x + lam1
        gv[..., axis] = lam0 * (y - 2 * x * s - t) - lam1 * s
    return gv, gu


def correct_camera(vertices, coords_2d, cfg: RidgeConfig = RidgeConfig()) -> Camera:
    """Ridge-regression camera mapping ``vertices`` onto ``coords_2d``."""
    v = np.asarray(vertices, dtype=np.float64)
    u = np.asarray(coords_2d, dtype=np.float64)
    if v.ndim != 2 or u.shape != (len(v), 2):
        raise ValueError("expected N x 3 vertices and N x 2 coordinates")
    if not (np.all(np.isfinite(v)) and np.all(np.isfinite(u))):
        raise ValueError("non-finite input")
    return Camera.from_array(fit_camera_array(v, u, cfg.xi))
