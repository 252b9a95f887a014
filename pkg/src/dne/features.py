"""Feature grids, bilinear lookup, the coordinate regressor and three-view voxel pooling.

Pixel coordinates are ``(x, y)`` with ``x`` indexing grid columns and ``y``
rows, so ``values[y, x]`` is the feature at integer pixel ``(x, y)``.

Voxel views reduce one axis each: front drops z (indexed ``[x, y]``),
lateral drops x (``[y, z]``) and top drops y (``[x, z]``).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .camera import project
from .mesh import HandMesh
from .noise import normal_stream

SPLAT_SIGMA = 1.5  # pixels
SPLAT_EPS = 1e-2
VIEW_AXES = ((0, 1), (1, 2), (0, 2))  # kept axes for front, lateral, top
CH_DX, CH_DY, CH_DEPTH, CH_OCC, CH_SX, CH_SY = 0, 1, 2, 3, 4, 5


@dataclass(frozen=True)
class FeatureGrid:
    values: np.ndarray  # (H, W, C)

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim != 3 or v.shape[0] < 2 or v.shape[1] < 2:
            raise ValueError(f"feature grid must be H x W x C with H, W >= 2, got {v.shape}")
        if not np.all(np.isfinite(v)):
            raise ValueError("feature grid contains non-finite values")
        v.flags.writeable = False
        object.__setattr__(self, "values", v)

    @property
    def shape(self):
        return self.values.shape


@dataclass(frozen=True)
class VoxelGrid:
    cells: np.ndarray  # (G, G, G, C)
    occupancy: np.ndarray  # (G, G, G) bool

    @property
    def resolution(self) -> int:
        return self.cells.shape[0]


@dataclass(frozen=True)
class ViewFeatures:
    f_front: np.ndarray
    f_lateral: np.ndarray
    f_top: np.ndarray

    def concat(self) -> np.ndarray:
        return np.concatenate([self.f_front, self.f_lateral, self.f_top], axis=-1)


@dataclass(frozen=True)
class Regressor:
    """Two linear maps: across the H*W axis to N rows, then per row C -> 2."""

    spatial_weight: np.ndarray  # (N, H*W)
    spatial_bias: np.ndarray  # (N,)
    coord_weight: np.ndarray  # (2, C)
    coord_bias: np.ndarray  # (2,)

    def arrays(self) -> dict:
        return {"spatial_weight": self.spatial_weight, "spatial_bias": self.spatial_bias,
                "coord_weight": self.coord_weight, "coord_bias": self.coord_bias}

    def with_arrays(self, arrays: dict) -> "Regressor":
        return Regressor(**{k: arrays[k] for k in self.arrays()})


# --- bilinear interpolation --------------------------------------------------------


def _corners(values, uv):
    H, W = values.shape[-3], values.shape[-2]
    x = np.clip(uv[..., 0], 0.0, W - 1)
    y = np.clip(uv[..., 1], 0.0, H - 1)
    x0 = np.minimum(np.floor(x).astype(np.intp), W - 2)
    y0 = np.minimum(np.floor(y).astype(np.intp), H - 2)
    fx = (x - x0)[..., None]
    fy = (y - y0)[..., None]
    if values.ndim == 4:
        b = np.arange(values.shape[0]).reshape((-1,) + (1,) * (uv.ndim - 2))
        pick = lambda yy, xx: values[b, yy, xx]
    else:
        pick = lambda yy, xx: values[yy, xx]
    return (pick(y0, x0), pick(y0, x0 + 1), pick(y0 + 1, x0), pick(y0 + 1, x0 + 1)), fx, fy


def bilinear(values: np.ndarray, uv: np.ndarray) -> np.ndarray:
    """Sample ``values`` (H, W, C) or batched (B, H, W, C) at ``uv`` (..., 2) or (B, N, 2)."""
    (v00, v01, v10, v11), fx, fy = _corners(values, np.asarray(uv, dtype=np.float64))
    return (1 - fy) * ((1 - fx) * v00 + fx * v01) + fy * ((1 - fx) * v10 + fx * v11)


def bilinear_backward(values: np.ndarray, uv: np.ndarray, grad: np.ndarray) -> np.ndarray:
    """Gradient w.r.t. the query ``uv``; zero along an axis where the query was clamped."""
    H, W = values.shape[-3], values.shape[-2]
    (v00, v01, v10, v11), fx, fy = _corners(values, uv)
    dx = (1 - fy) * (v01 - v00) + fy * (v11 - v10)
    dy = (1 - fx) * (v10 - v00) + fx * (v11 - v01)
    inside_x = (uv[..., 0] >= 0) & (uv[..., 0] <= W - 1)
    inside_y = (uv[..., 1] >= 0) & (uv[..., 1] <= H - 1)
    return np.stack([(grad * dx).sum(-1) * inside_x, (grad * dy).sum(-1) * inside_y], axis=-1)


def interpolate(grid: FeatureGrid, uv) -> np.ndarray:
    return bilinear(grid.values, np.asarray(uv, dtype=np.float64))


# --- coordinate regressor ----------------------------------------------------------


def regress_forward(values: np.ndarray, reg: Regressor):
    """Batched over a leading axis of ``values``; returns coords and the N x C hidden map."""
    flat = values.reshape(values.shape[:-3] + (-1, values.shape[-1]))
    if flat.shape[-2] != reg.spatial_weight.shape[1] or values.shape[-1] != reg.coord_weight.shape[1]:
        raise ValueError("feature grid shape does not match regressor weights")
    hidden = np.matmul(reg.spatial_weight, flat) + reg.spatial_bias[:, None]
    return hidden @ reg.coord_weight.T + reg.coord_bias, hidden


def regress_backward(values: np.ndarray, reg: Regressor, hidden: np.ndarray, grad: np.ndarray) -> dict:
    flat = values.reshape(values.shape[:-3] + (-1, values.shape[-1]))
    g_hidden = grad @ reg.coord_weight
    g2 = grad.reshape(-1, 2)
    return {
        "coord_weight": g2.T @ hidden.reshape(-1, hidden.shape[-1]),
        "coord_bias": g2.sum(axis=0),
        "spatial_weight": _batched_outer(g_hidden, flat),
        "spatial_bias": g_hidden.sum(axis=-1).reshape(-1, g_hidden.shape[-2]).sum(axis=0),
    }


def _batched_outer(a, b):
    """sum_b a[b] @ b[b].T for (..., N, C) and (..., P, C), as one matrix product."""
    n, p, c = a.shape[-2], b.shape[-2], a.shape[-1]
    a2 = np.moveaxis(a.reshape(-1, n, c), 1, 0).reshape(n, -1)
    b2 = np.moveaxis(b.reshape(-1, p, c), 1, 0).reshape(p, -1)
    return a2 @ b2.T


def regress_coords(grid: FeatureGrid, params: Regressor) -> np.ndarray:
    return regress_forward(grid.values, params)[0]


def init_regressor(rng: np.random.Generator, n_vertices: int, shape) -> Regressor:
    H, W, C = shape
    limit = np.sqrt(6.0 / (H * W + n_vertices))
    return Regressor(
        rng.uniform(-limit, limit, size=(n_vertices, H * W)),
        np.zeros(n_vertices),
        rng.uniform(-1, 1, size=(2, C)) * np.sqrt(6.0 / (C + 2)),
        # start at the image centre so lookups are not pinned to a clamped corner
        np.array([(W - 1) / 2.0, (H - 1) / 2.0]),
    )


# --- voxel three-view pooling ------------------------------------------------------


def voxel_bins(vertices: np.ndarray, G: int) -> np.ndarray:
    """Per-mesh, per-axis min-max normalization into G bins; zero extent maps to bin 0."""
    lo = vertices.min(axis=-2, keepdims=True)
    ext = vertices.max(axis=-2, keepdims=True) - lo
    safe = np.where(ext > 0, ext, 1.0)
    norm = np.where(ext > 0, (vertices - lo) / safe, 0.0)
    return np.clip(np.floor(norm * G).astype(np.intp), 0, G - 1)


def voxelize(mesh: HandMesh, features, G: int = 8) -> VoxelGrid:
    features = np.asarray(features, dtype=np.float64)
    if features.ndim != 2 or len(features) != mesh.n_vertices:
        raise ValueError("features must have one row per vertex")
    C = features.shape[1]
    bins = voxel_bins(mesh.vertices, G)
    cells = np.full((G, G, G, C), -np.inf)
    np.maximum.at(cells, (bins[:, 0], bins[:, 1], bins[:, 2]), features)
    occupancy = np.isfinite(cells[..., 0])
    cells[~occupancy] = 0.0
    return VoxelGrid(cells, occupancy)


def three_view_pool(vox: VoxelGrid):
    """Max over occupied cells along z (front), x (lateral) and y (top); empty columns give 0."""
    masked = np.where(vox.occupancy[..., None], vox.cells, -np.inf)
    planes = []
    for axis in (2, 0, 1):
        p = masked.max(axis=axis)
        planes.append(np.where(np.isfinite(p), p, 0.0))
    return tuple(planes)


def gather_view_features(planes, mesh: HandMesh, G: int | None = None) -> ViewFeatures:
    front, lateral, top = planes
    G = front.shape[0] if G is None else G
    b = voxel_bins(mesh.vertices, G)
    return ViewFeatures(front[b[:, 0], b[:, 1]], lateral[b[:, 1], b[:, 2]], top[b[:, 0], b[:, 2]])


@dataclass
class ViewPoolCache:
    segments: list  # per view: (order, starts, seg_of_vertex)
    outputs: list  # per view: (B*N, C) pooled values


def view_pool(features: np.ndarray, bins: np.ndarray, G: int):
    """Fused voxelize + three-view pool + gather for a batch.

    A vertex's pooled value in a view is the max over all vertices that share
    its column in that view, which is exactly what the three separate steps
    compute. ``features`` is (B, N, C), ``bins`` (B, N, 3); returns (B, N, 3C).
    """
    B, N, C = features.shape
    flat = features.reshape(B * N, C)
    batch = np.repeat(np.arange(B), N)
    b2 = bins.reshape(B * N, 3)
    cache = ViewPoolCache([], [])
    outs = []
    for a1, a2 in VIEW_AXES:
        key = (batch * G + b2[:, a1]) * G + b2[:, a2]
        order = np.argsort(key, kind="stable")
        sk = key[order]
        change = np.empty(len(sk), dtype=bool)
        change[0] = True
        change[1:] = sk[1:] != sk[:-1]
        starts = np.flatnonzero(change)
        seg_of_vertex = np.empty(len(sk), dtype=np.intp)
        seg_of_vertex[order] = np.cumsum(change) - 1
        pooled = np.maximum.reduceat(flat[order], starts, axis=0)[seg_of_vertex]
        cache.segments.append((order, starts, seg_of_vertex))
        cache.outputs.append(pooled)
        outs.append(pooled.reshape(B, N, C))
    return np.concatenate(outs, axis=-1), cache


def view_pool_backward(features: np.ndarray, cache: ViewPoolCache, grad: np.ndarray) -> np.ndarray:
    """Route each pooled gradient to the column's max vertex (ties share it evenly)."""
    B, N, C = features.shape
    flat = features.reshape(B * N, C)
    g = grad.reshape(B * N, 3, C)
    out = np.zeros_like(flat)
    for v, ((order, starts, seg), pooled) in enumerate(zip(cache.segments, cache.outputs)):
        winner = (flat == pooled).astype(np.float64)
        count = np.add.reduceat(winner[order], starts, axis=0)
        gseg = np.add.reduceat(g[:, v][order], starts, axis=0)
        out += winner * (gseg / count)[seg]
    return out.reshape(B, N, C)


# --- synthetic features ------------------------------------------------------------


def splat(points: np.ndarray, values: np.ndarray, H: int, W: int, sigma: float = SPLAT_SIGMA):
    """Gaussian splat of per-point values at pixel positions.

    Returns the kernel density ``sum_n K_n`` (H, W) and the kernel-weighted
    average ``sum_n K_n value_n / (sum_n K_n + SPLAT_EPS)`` (H, W, D), where
    ``K_n = exp(-|p - points_n|^2 / (2 sigma^2))``.
    """
    ys, xs = np.mgrid[0:H, 0:W].astype(np.float64)
    d2 = (xs[..., None] - points[:, 0]) ** 2 + (ys[..., None] - points[:, 1]) ** 2
    K = np.exp(-d2 / (2 * sigma * sigma))
    density = K.sum(axis=-1)
    avg = (K @ values) / (density + SPLAT_EPS)[..., None]
    return density, avg


def synthesize_features(gt_mesh: HandMesh, coarse_mesh: HandMesh, camera, noise_level: float,
                        seed: int, coarse_camera=None, shape=(32, 32, 16)) -> FeatureGrid:
    """Stand-in for an image backbone: a grid carrying recoverable refinement signal.

    Channels 0-1 hold the 2D displacement from each coarse projection to its
    ground-truth projection, 2 the depth displacement in pixel-equivalent units
    (scaled by the mean camera scale), 3 the ground-truth projection density,
    4-5 the in-plane shape displacement in the same pixel-equivalent units
    (free of camera error); all splatted at the ground-truth projections.
    Channels 6.. are pure noise, and every channel gets i.i.d. Gaussian noise
    of std ``noise_level``.
    """
    H, W, C = shape
    if C < 6:
        raise ValueError("need at least 6 channels")
    coarse_camera = camera if coarse_camera is None else coarse_camera
    gt_uv = project(gt_mesh.vertices, camera)
    disp = gt_uv - project(coarse_mesh.vertices, coarse_camera)
    c = camera.as_array() if hasattr(camera, "as_array") else np.asarray(camera)
    shape_disp = (gt_mesh.vertices - coarse_mesh.vertices) * 0.5 * (abs(c[0]) + abs(c[1]))
    density, avg = splat(gt_uv, np.column_stack([disp, shape_disp]), H, W)
    values = np.zeros((H, W, C))
    values[..., CH_DX:CH_DY + 1] = avg[..., :2]
    values[..., CH_DEPTH] = avg[..., 4]
    values[..., CH_OCC] = density
    values[..., CH_SX:CH_SY + 1] = avg[..., 2:4]
    if noise_level > 0:
        values += noise_level * normal_stream(seed, 7, shape=(H, W, C))
    return FeatureGrid(values)
