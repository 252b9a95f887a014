"""Dual noise estimation stages, progressive refinement, the vertex loss and training.

A stage takes vertices ``v``, image coordinates ``u`` and a camera, and

1. samples features at the projections of ``v`` and at regressed
   coordinates, and maps them through ``phi`` to the 2D noise mean,
2. moves ``u`` by the 2D noise, samples features there, pools them over
   three voxel views of the mesh, and maps them through ``psi`` to the 3D
   noise mean, moving ``v``,
3. refits the camera to the new ``(v, u)`` pairs by ridge regression.

Everything runs on batches with a leading instance axis. Training draws R
reparameterized samples per stage off the mean trajectory; the mean state is
what the next stage consumes.
"""

from __future__ import annotations

import csv
import io
import logging
from dataclasses import dataclass, field, fields, replace
from typing import Sequence

import numpy as np

from . import nn
from .camera import Camera, fit_camera_array, fit_camera_backward, project, project_backward
from .features import (FeatureGrid, Regressor, bilinear, bilinear_backward, init_regressor,
                       regress_backward, regress_forward, synthesize_features, view_pool,
                       view_pool_backward, voxel_bins)
from .mesh import HandMesh, joint_matrix, make_template, random_pose
from .noise import Z2D, Z3D, normal_stream, reparam, reparam_grad

log = logging.getLogger(__name__)

LOG_FIELDS = ("epoch", "split", "loss", "mpvpe3d", "mpjpe3d", "mpvpe2d")


@dataclass(frozen=True)
class PipelineConfig:
    n_stages: int = 3
    n_samples: int = 4
    gamma: float = 0.1
    delta_3d: float = 1e-3
    delta_2d: float = 0.5
    xi: float = 1e-4
    lambda_2d: float = 0.0125  # one pixel weighs like 1/80 scene unit, the default camera scale
    lambda_3d: float = 1.0
    hidden: int = 64
    voxel_res: int = 8
    use_2d: bool = True
    use_3d: bool = True
    use_camera: bool = True
    init_scale_2d: float = 0.1
    init_scale_3d: float = 1e-3
    unit_3d: float = 0.01  # scene units per 3D-head output unit (keeps head gradients balanced)
    # optimization
    lr: float = 1e-3
    lr_decay: float = 0.5
    lr_every: int = 10
    batch_size: int = 20
    grad_clip: float = 0.0  # global-norm clip; 0 disables

    def __post_init__(self):
        if self.n_stages < 0 or self.n_samples < 1:
            raise ValueError("need n_stages >= 0 and n_samples >= 1")
        if self.lambda_2d <= 0 or self.lambda_3d <= 0:
            raise ValueError("loss weights must be positive")


@dataclass(frozen=True)
class DataConfig:
    corruption: float = 0.05  # per-axis std of raw per-group offsets, scene units
    translation: float = 0.01  # per-axis std of the global coarse translation
    cam_scale_noise: float = 0.05
    cam_trans_noise: float = 2.0  # pixels
    cam_scale: float = 80.0  # pixels per scene unit
    noise_level: float = 0.05
    pose_spread: float = 0.35
    grid: tuple = (32, 32, 16)

    @classmethod
    def at_level(cls, corruption: float, **kw) -> "DataConfig":
        """Scale every coarse-input error (shape, translation, camera) relative to the default level."""
        if not (np.isfinite(corruption) and corruption >= 0):
            raise ValueError("corruption must be finite and non-negative")
        base = cls(**kw)
        k = corruption / cls.corruption
        return replace(base, corruption=corruption, translation=base.translation * k,
                       cam_scale_noise=base.cam_scale_noise * k, cam_trans_noise=base.cam_trans_noise * k)


@dataclass(frozen=True)
class DneStageParams:
    phi: nn.Mlp
    psi3d: nn.Mlp
    regressor: Regressor

    def arrays(self) -> dict:
        out = {}
        for name in ("phi", "psi3d", "regressor"):
            for k, v in getattr(self, name).arrays().items():
                out[f"{name}.{k}"] = v
        return out

    def with_arrays(self, arrays: dict) -> "DneStageParams":
        pick = lambda name: {k.split(".", 1)[1]: v for k, v in arrays.items() if k.startswith(name + ".")}
        return DneStageParams(self.phi.with_arrays(pick("phi")), self.psi3d.with_arrays(pick("psi3d")),
                              self.regressor.with_arrays(pick("regressor")))


@dataclass(frozen=True)
class DnePipelineParams:
    stages: tuple
    config: PipelineConfig = PipelineConfig()

    @property
    def gamma(self):
        return self.config.gamma

    @property
    def xi(self):
        return self.config.xi

    @property
    def n_samples(self):
        return self.config.n_samples

    def arrays(self) -> dict:
        return {f"stage{m}.{k}": v for m, s in enumerate(self.stages) for k, v in s.arrays().items()}

    def with_arrays(self, arrays: dict) -> "DnePipelineParams":
        stages = []
        for m, s in enumerate(self.stages):
            prefix = f"stage{m}."
            stages.append(s.with_arrays({k[len(prefix):]: v for k, v in arrays.items() if k.startswith(prefix)}))
        return DnePipelineParams(tuple(stages), self.config)


def init_pipeline(cfg: PipelineConfig, n_vertices: int, grid_shape, seed: int) -> DnePipelineParams:
    C = grid_shape[-1]
    stages = []
    for m in range(cfg.n_stages):
        rng = np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, 1000 + m])))
        stages.append(DneStageParams(
            nn.init_mlp((2 * C, cfg.hidden, 2), rng, out_scale=cfg.init_scale_2d),
            nn.init_mlp((3 * C, cfg.hidden, 3), rng, out_scale=cfg.init_scale_3d / cfg.unit_3d),
            init_regressor(rng, n_vertices, grid_shape),
        ))
    return DnePipelineParams(tuple(stages), cfg)


def zero_pipeline(cfg: PipelineConfig, n_vertices: int, grid_shape) -> DnePipelineParams:
    """All-zero noise heads: refinement leaves v and u untouched."""
    params = init_pipeline(cfg, n_vertices, grid_shape, seed=0)
    arrays = {k: (np.zeros_like(v) if (".phi." in k or ".psi3d." in k) else v)
              for k, v in params.arrays().items()}
    return params.with_arrays(arrays)


# --- state ----------------------------------------------------------------------


@dataclass(frozen=True)
class StageTrace:
    mu_2d: np.ndarray
    mu_3d: np.ndarray
    camera: Camera


@dataclass(frozen=True)
class RefinementState:
    mesh: HandMesh
    coords_2d: np.ndarray
    camera: Camera
    trace: tuple = ()


@dataclass
class Batch:
    """Stacked per-instance arrays; cameras are ``[sx, sy, tx, ty]`` rows."""

    v: np.ndarray  # (B, N, 3)
    u: np.ndarray  # (B, N, 2)
    cam: np.ndarray  # (B, 4)


def _check(name: str, stage: int, *arrays):
    for a in arrays:
        if not np.all(np.isfinite(a)):
            raise FloatingPointError(f"non-finite values at stage {stage}, step {name}")


# --- one stage --------------------------------------------------------------------


@dataclass
class _StageCache:
    state: Batch
    p: np.ndarray
    r: np.ndarray
    hidden: np.ndarray
    phi_tape: object
    mu2: np.ndarray
    u1: np.ndarray
    x3_pool: object
    f_u: np.ndarray
    psi_tape: object
    mu3: np.ndarray
    v1: np.ndarray
    cam1: np.ndarray
    samples: list = field(default_factory=list)  # (z2, z3, u_r, f_ur, pool, psi_tape, mu3_r)


def _noise_head(cfg, mlp, x, enabled, unit=1.0):
    if not enabled:
        return np.zeros(x.shape[:-1] + (mlp.out_dim,)), None
    out, tape = nn.forward_tape(mlp, x)
    return out * unit, tape


def stage_forward(state: Batch, grids: np.ndarray, sp: DneStageParams, cfg: PipelineConfig,
                  z=None, stage_index: int = 0):
    """Run one stage on a batch. ``z`` is None (inference) or ``(z2, z3)`` with shapes
    (R, B, N, 2) and (R, B, N, 3). Returns the mean next state, the sampled
    vertices (R, B, N, 3) or None, and a cache for ``stage_backward``."""
    v, u, cam = state.v, state.u, state.cam
    p = project(v, cam)
    f_p = bilinear(grids, p)
    r, hidden = regress_forward(grids, sp.regressor)
    f_r = bilinear(grids, r)
    _check("2d-features", stage_index, f_p, f_r)
    mu2, phi_tape = _noise_head(cfg, sp.phi, np.concatenate([f_p, f_r], axis=-1), cfg.use_2d)
    u1 = u + mu2
    _check("2d-noise", stage_index, u1)

    bins = voxel_bins(v, cfg.voxel_res)
    f_u = bilinear(grids, u1)
    x3, pool = view_pool(f_u, bins, cfg.voxel_res)
    mu3, psi_tape = _noise_head(cfg, sp.psi3d, x3, cfg.use_3d, cfg.unit_3d)
    v1 = v + mu3
    _check("3d-noise", stage_index, v1)

    cam1 = fit_camera_array(v1, u1, cfg.xi) if cfg.use_camera else cam.copy()
    _check("camera", stage_index, cam1)
    cache = _StageCache(state, p, r, hidden, phi_tape, mu2, u1, pool, f_u, psi_tape, mu3, v1, cam1)

    samples = None
    if z is not None:
        z2s, z3s = z
        samples = np.empty((len(z2s),) + v.shape)
        for i, (z2, z3) in enumerate(zip(z2s, z3s)):
            if cfg.use_2d:
                u_r = u + reparam(mu2, z2, cfg.gamma, cfg.delta_2d)
            else:
                u_r = u1
            f_ur = bilinear(grids, u_r)
            x3_r, pool_r = view_pool(f_ur, bins, cfg.voxel_res)
            mu3_r, tape_r = _noise_head(cfg, sp.psi3d, x3_r, cfg.use_3d, cfg.unit_3d)
            samples[i] = v + (reparam(mu3_r, z3, cfg.gamma, cfg.delta_3d) if cfg.use_3d else mu3_r)
            cache.samples.append((z2, z3, u_r, f_ur, pool_r, tape_r, mu3_r))
        _check("sampling", stage_index, samples)
    return Batch(v1, u1, cam1), samples, cache


def stage_backward(cache: _StageCache, grids: np.ndarray, sp: DneStageParams, cfg: PipelineConfig,
                   g_v1, g_u1, g_cam1, g_samples=None):
    """Reverse pass of ``stage_forward``. Returns ``(g_v, g_u, g_cam, param_grads)``."""
    st = cache.state
    g_v = np.zeros_like(st.v)
    g_u = np.zeros_like(st.u)
    g_cam = np.zeros_like(st.cam)
    g_v1 = g_v1.copy()
    g_u1 = g_u1.copy()
    grads = {f"phi.{k}": np.zeros_like(a) for k, a in sp.phi.arrays().items()}
    grads.update({f"psi3d.{k}": np.zeros_like(a) for k, a in sp.psi3d.arrays().items()})
    grads.update({f"regressor.{k}": np.zeros_like(a) for k, a in sp.regressor.arrays().items()})

    def add(prefix, d):
        for k, a in d.items():
            grads[f"{prefix}.{k}"] += a

    if cfg.use_camera:
        gv, gu = fit_camera_backward(cache.v1, cache.u1, cache.cam1, cfg.xi, g_cam1)
        g_v1 += gv
        g_u1 += gu
    else:
        g_cam += g_cam1

    g_mu2 = np.zeros_like(cache.mu2)

    # sampled branches
    if g_samples is not None:
        for (z2, z3, u_r, f_ur, pool_r, tape_r, mu3_r), g_vr in zip(cache.samples, g_samples):
            g_v += g_vr
            if not cfg.use_3d:
                continue
            g_mu3r = reparam_grad(mu3_r, z3, cfg.gamma, g_vr)
            pg, g_x3r = nn.backward(sp.psi3d, tape_r, g_mu3r * cfg.unit_3d)
            add("psi3d", pg)
            g_fur = view_pool_backward(f_ur, pool_r, g_x3r)
            g_ur = bilinear_backward(grids, u_r, g_fur)
            if cfg.use_2d:
                g_u += g_ur
                g_mu2 += reparam_grad(cache.mu2, z2, cfg.gamma, g_ur)
            else:
                g_u1 += g_ur

    # mean 3D branch
    g_v += g_v1
    if cfg.use_3d:
        pg, g_x3 = nn.backward(sp.psi3d, cache.psi_tape, g_v1 * cfg.unit_3d)
        add("psi3d", pg)
        g_fu = view_pool_backward(cache.f_u, cache.x3_pool, g_x3)
        g_u1 += bilinear_backward(grids, cache.u1, g_fu)

    # mean 2D branch
    g_u += g_u1
    g_mu2 += g_u1
    if cfg.use_2d:
        pg, g_x2 = nn.backward(sp.phi, cache.phi_tape, g_mu2)
        add("phi", pg)
        C = grids.shape[-1]
        g_p = bilinear_backward(grids, cache.p, g_x2[..., :C])
        g_r = bilinear_backward(grids, cache.r, g_x2[..., C:])
        add("regressor", regress_backward(grids, sp.regressor, cache.hidden, g_r))
        gv, gc = project_backward(st.v, st.cam, g_p)
        g_v += gv
        g_cam += gc
    return g_v, g_u, g_cam, grads


# --- loss ---------------------------------------------------------------------------


@dataclass(frozen=True)
class StageSamples:
    """What the loss needs from one stage: mean vertices, corrected camera, R samples."""

    mean_vertices: np.ndarray  # (..., N, 3)
    camera: np.ndarray  # (..., 4)
    samples: np.ndarray  # (R, ..., N, 3)


def loss_v_terms(stages: Sequence[StageSamples], gt_vertices, gt_camera, lambda_2d, lambda_3d):
    """Vertex loss summed over stages and samples, with gradients.

    Returns ``(loss, grads)`` where ``loss`` has the instance batch shape and
    ``grads[m]`` is ``(g_samples, g_mean_vertices, g_camera)`` for stage m.
    """
    if not stages:
        raise ValueError("need at least one stage")
    R = stages[0].samples.shape[0]
    gt_vertices = np.asarray(gt_vertices, dtype=np.float64)
    gt_camera = np.asarray(getattr(gt_camera, "as_array", lambda: gt_camera)(), dtype=np.float64)
    total = 0.0
    grads = []
    for st in stages:
        if st.samples.shape[0] != R or st.samples.shape[1:] != st.mean_vertices.shape:
            raise ValueError("every stage needs the same number of samples of matching shape")
        d3 = st.samples - gt_vertices
        target = project(st.mean_vertices, gt_camera)
        d2 = project(st.samples, st.camera[None] if st.camera.ndim > 1 else st.camera) - target
        total = total + lambda_3d * np.abs(d3).sum(axis=(0, -2, -1)) + lambda_2d * np.abs(d2).sum(axis=(0, -2, -1))
        g2 = lambda_2d * np.sign(d2)
        g_samples = lambda_3d * np.sign(d3)
        g_samples[..., :2] += g2 * (st.camera[..., None, :2] if st.camera.ndim > 1 else st.camera[:2])
        g_cam = np.concatenate([(g2 * st.samples[..., :2]).sum(axis=(0, -2)), g2.sum(axis=(0, -2))], axis=-1)
        g_mean = np.zeros_like(st.mean_vertices)
        g_mean[..., :2] = -(g2.sum(axis=0)) * (gt_camera[..., None, :2] if gt_camera.ndim > 1 else gt_camera[:2])
        grads.append((g_samples, g_mean, g_cam))
    return total, grads


def loss_v(stages: Sequence[StageSamples], gt_mesh, gt_camera, lambda_2d=1.0, lambda_3d=1.0):
    """Single-instance vertex loss; returns ``(loss, grads)`` as in ``loss_v_terms``."""
    gt_v = getattr(gt_mesh, "vertices", gt_mesh)
    loss, grads = loss_v_terms(stages, gt_v, gt_camera, lambda_2d, lambda_3d)
    return float(loss), grads


# --- whole pipeline on batches --------------------------------------------------------


def draw_noise(seed: int, epoch: int, ids: Sequence[int], stage: int, R: int, N: int):
    z2 = np.stack([normal_stream(seed, epoch, i, stage, Z2D, shape=(R, N, 2)) for i in ids], axis=1)
    z3 = np.stack([normal_stream(seed, epoch, i, stage, Z3D, shape=(R, N, 3)) for i in ids], axis=1)
    return z2, z3


def forward_backward(params: DnePipelineParams, batch: Batch, grids, gt_v, gt_cam, noise,
                     input_grads: bool = False):
    """Training pass over all stages. ``noise[m]`` is the ``(z2, z3)`` pair of stage m.

    Returns the per-instance loss (B,) and gradients keyed like ``params.arrays()``,
    summed over the batch; with ``input_grads`` also the gradients w.r.t. the
    batch's ``v``, ``u`` and ``cam`` under the keys ``"input.v"`` etc.
    """
    cfg = params.config
    state, caches, stage_out = batch, [], []
    for m, sp in enumerate(params.stages):
        state, samples, cache = stage_forward(state, grids, sp, cfg, z=noise[m], stage_index=m)
        caches.append(cache)
        stage_out.append(StageSamples(state.v, state.cam, samples))
    loss, lgrads = loss_v_terms(stage_out, gt_v, gt_cam, cfg.lambda_2d, cfg.lambda_3d)
    if not np.all(np.isfinite(loss)):
        raise FloatingPointError("non-finite loss")

    grads = {}
    g_v = np.zeros_like(state.v)
    g_u = np.zeros_like(state.u)
    g_cam = np.zeros_like(state.cam)
    for m in reversed(range(len(params.stages))):
        g_samples, g_mean, g_c = lgrads[m]
        g_v, g_u, g_cam, sg = stage_backward(caches[m], grids, params.stages[m], cfg,
                                             g_v + g_mean, g_u, g_cam + g_c, g_samples)
        for k, a in sg.items():
            grads[f"stage{m}.{k}"] = a
    if input_grads:
        grads.update({"input.v": g_v, "input.u": g_u, "input.cam": g_cam})
    return loss, grads


def refine_batch(params: DnePipelineParams, batch: Batch, grids, n_stages: int | None = None):
    """Inference: all stages with noise set to its mean. Returns the final batch and per-stage traces."""
    state, traces = batch, []
    stages = params.stages if n_stages is None else params.stages[:n_stages]
    for m, sp in enumerate(stages):
        nxt, _, cache = stage_forward(state, grids, sp, params.config, stage_index=m)
        traces.append((cache.mu2, cache.mu3, nxt.cam))
        state = nxt
    return state, traces


def dne_stage(state: RefinementState, grid: FeatureGrid, params: DneStageParams,
              cfg: PipelineConfig = PipelineConfig(), seed: int | None = None, stage_index: int = 0):
    """Single-instance stage. With ``seed`` None runs inference and returns the next state;
    otherwise returns ``(mean_state, sampled_vertices (R, N, 3))``."""
    b = Batch(state.mesh.vertices[None], np.asarray(state.coords_2d, dtype=np.float64)[None],
              state.camera.as_array()[None])
    z = None
    if seed is not None:
        z = draw_noise(seed, 0, [0], stage_index, cfg.n_samples, state.mesh.n_vertices)
    nxt, samples, cache = stage_forward(b, grid.values[None], params, cfg, z=z, stage_index=stage_index)
    cam = Camera.from_array(nxt.cam[0])
    out = RefinementState(state.mesh.with_vertices(nxt.v[0]), nxt.u[0], cam,
                          state.trace + (StageTrace(cache.mu2[0], cache.mu3[0], cam),))
    return out if samples is None else (out, samples[:, 0])


def refine(coarse: RefinementState, grid: FeatureGrid, pipeline: DnePipelineParams) -> RefinementState:
    state = coarse
    for m, sp in enumerate(pipeline.stages):
        state = dne_stage(state, grid, sp, pipeline.config, stage_index=m)
    return state


def refine_scene(hands: Sequence[RefinementState], grid: FeatureGrid, pipeline: DnePipelineParams):
    """Two-hand scenes: each hand keeps its own camera, the grid is shared."""
    return [refine(h, grid, pipeline) for h in hands]


# --- synthetic data -------------------------------------------------------------------------


@dataclass(frozen=True)
class SyntheticInstance:
    gt_mesh: HandMesh
    gt_camera: Camera
    coarse: RefinementState
    grid: FeatureGrid


def _group_parents(mesh: HandMesh):
    # template layout: group 0 palm, then 4 groups per finger from MCP to tip
    parents = [-1]
    for j in range(1, mesh.n_joints):
        parents.append(0 if (j - 1) % 4 == 0 else j - 1)
    return parents


def make_synthetic_instance(seed: int, cfg: DataConfig = DataConfig()) -> SyntheticInstance:
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, 42])))
    H, W, C = cfg.grid
    gt = make_template(int(rng.integers(1, 2 ** 31)), random_pose(rng, cfg.pose_spread))

    s = cfg.cam_scale * rng.uniform(0.9, 1.1)
    centre = 0.5 * (gt.vertices.min(0) + gt.vertices.max(0))
    t = np.array([(W - 1) / 2.0, (H - 1) / 2.0]) - s * centre[:2] + rng.uniform(-1, 1, size=2)
    gt_cam = Camera(s, s, t[0], t[1])

    # per-group rigid offsets, each averaged with its parent's for a smooth field
    raw = rng.normal(0.0, cfg.corruption, size=(gt.n_joints, 3))
    parents = _group_parents(gt)
    smooth = np.array([raw[j] if p < 0 else 0.5 * (raw[j] + raw[p]) for j, p in enumerate(parents)])
    offsets = np.zeros_like(gt.vertices)
    for j, g in enumerate(gt.joint_groups):
        offsets[g] = smooth[j]
    offsets += rng.normal(0.0, cfg.translation, size=3)
    coarse_mesh = gt.with_vertices(gt.vertices + offsets)

    c0 = gt_cam.as_array()
    c0[:2] *= 1 + cfg.cam_scale_noise * rng.normal(size=2)
    c0[2:] += cfg.cam_trans_noise * rng.normal(size=2)
    coarse_cam = Camera.from_array(c0)
    grid = synthesize_features(gt, coarse_mesh, gt_cam, cfg.noise_level, int(rng.integers(2 ** 31)),
                               coarse_camera=coarse_cam, shape=cfg.grid)
    coarse = RefinementState(coarse_mesh, project(coarse_mesh.vertices, coarse_cam), coarse_cam)
    return SyntheticInstance(gt, gt_cam, coarse, grid)


@dataclass
class Dataset:
    template: HandMesh  # topology and joint groups shared by every instance
    gt_v: np.ndarray
    gt_cam: np.ndarray
    v0: np.ndarray
    u0: np.ndarray
    cam0: np.ndarray
    grids: np.ndarray
    seeds: np.ndarray

    def __len__(self):
        return len(self.gt_v)

    def batch(self, idx) -> Batch:
        return Batch(self.v0[idx], self.u0[idx], self.cam0[idx])

    def subset(self, idx) -> "Dataset":
        return Dataset(self.template, *(getattr(self, f.name)[idx] for f in fields(self)[1:]))

    @classmethod
    def from_instances(cls, instances: Sequence[SyntheticInstance], seeds) -> "Dataset":
        return cls(
            instances[0].gt_mesh,
            np.stack([i.gt_mesh.vertices for i in instances]),
            np.stack([i.gt_camera.as_array() for i in instances]),
            np.stack([i.coarse.mesh.vertices for i in instances]),
            np.stack([i.coarse.coords_2d for i in instances]),
            np.stack([i.coarse.camera.as_array() for i in instances]),
            np.stack([i.grid.values for i in instances]),
            np.asarray(seeds),
        )


def make_dataset(count: int, seed: int, cfg: DataConfig = DataConfig()) -> Dataset:
    seeds = [int(s) for s in np.random.SeedSequence(seed).generate_state(count, dtype=np.uint32)]
    return Dataset.from_instances([make_synthetic_instance(s, cfg) for s in seeds], seeds)


# --- evaluation and training --------------------------------------------------------------------


def batch_metrics(v, cam, gt_v, gt_cam, J: np.ndarray):
    """Per-instance 3D MPVPE, MPJPE (joints via ``J``) and 2D MPVPE of ``project(v, cam)``."""
    e3 = np.linalg.norm(v - gt_v, axis=-1).mean(-1)
    ej = np.linalg.norm(J @ v - J @ gt_v, axis=-1).mean(-1)
    e2 = np.linalg.norm(project(v, cam) - project(gt_v, gt_cam), axis=-1).mean(-1)
    return e3, ej, e2


def evaluate(params: DnePipelineParams | None, data: Dataset, batch_size: int = 100, n_stages=None) -> dict:
    """Mean metrics after inference refinement; ``params=None`` scores the coarse input."""
    J = joint_matrix(data.template)
    sums = np.zeros(3)
    for lo in range(0, len(data), batch_size):
        idx = np.arange(lo, min(lo + batch_size, len(data)))
        b = data.batch(idx)
        if params is not None:
            b, _ = refine_batch(params, b, data.grids[idx], n_stages)
        sums += [m.sum() for m in batch_metrics(b.v, b.cam, data.gt_v[idx], data.gt_cam[idx], J)]
    e3, ej, e2 = sums / len(data)
    return {"mpvpe3d": float(e3), "mpjpe3d": float(ej), "mpvpe2d": float(e2)}


@dataclass
class TrainResult:
    params: DnePipelineParams
    log: list

    def log_csv(self) -> str:
        buf = io.StringIO()
        w = csv.DictWriter(buf, fieldnames=LOG_FIELDS, lineterminator="\n")
        w.writeheader()
        for row in self.log:
            w.writerow({k: (f"{row[k]:.10g}" if isinstance(row[k], float) else row[k]) for k in LOG_FIELDS})
        return buf.getvalue()


def train(data: Dataset, cfg: PipelineConfig, epochs: int, seed: int, val: Dataset | None = None,
          params: DnePipelineParams | None = None) -> TrainResult:
    """Mini-batch gradient descent on the vertex loss, deterministic given ``seed``."""
    if params is None:
        params = init_pipeline(cfg, data.template.n_vertices, data.grids.shape[1:], seed)
    N = data.template.n_vertices
    rows = []
    arrays = params.arrays()
    for epoch in range(epochs):
        lr = nn.step_decay(cfg.lr, epoch, cfg.lr_decay, cfg.lr_every)
        order = np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, epoch, 7]))).permutation(len(data))
        total = 0.0
        for lo in range(0, len(data), cfg.batch_size):
            idx = order[lo:lo + cfg.batch_size]
            noise = [draw_noise(seed, epoch, idx, m, cfg.n_samples, N) for m in range(cfg.n_stages)]
            loss, grads = forward_backward(params, data.batch(idx), data.grids[idx],
                                           data.gt_v[idx], data.gt_cam[idx], noise)
            total += float(loss.sum())
            scale = 1.0 / len(idx)
            if cfg.grad_clip > 0:
                norm = np.sqrt(sum(float(np.sum(g * g)) for g in grads.values())) * scale
                scale *= min(1.0, cfg.grad_clip / max(norm, 1e-300))
            arrays = nn.sgd_step(arrays, {k: g * scale for k, g in grads.items()}, lr)
            params = params.with_arrays(arrays)
        row = {"epoch": epoch, "split": "train", "loss": total / len(data)}
        row.update(evaluate(params, data if val is None else val))
        row["split"] = "train" if val is None else "val"
        rows.append(row)
        log.info("epoch %d loss %.4f val mpvpe3d %.5f mpvpe2d %.4f", epoch, row["loss"], row["mpvpe3d"], row["mpvpe2d"])
    return TrainResult(params, rows)
