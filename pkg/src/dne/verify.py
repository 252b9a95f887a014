"""Oracle suites: finite-difference gradients, ridge camera fits, view pooling.

Each suite returns ``Check`` records; ``run`` dispatches by suite name. The
suites use small random problems with fixed seeds, so they are cheap enough
to run from the command line and from the test-suite.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from . import nn
from .camera import correct_camera, fit_camera_array, project, projection_residual, RidgeConfig, Camera
from .features import (bilinear, bilinear_backward, gather_view_features, three_view_pool, view_pool,
                       voxel_bins, voxelize)
from .mesh import HandMesh
from .noise import reparam, reparam_grad
from .pipeline import Batch, PipelineConfig, StageSamples, draw_noise, forward_backward, init_pipeline, loss_v_terms

GRAD_TOL = 1e-4
RIDGE_TOL = 1e-9
KINK_TOL = 1e-7  # relative one-sided disagreement beyond which a probe straddles a kink
SUITES = ("gradcheck", "ridge", "pooling")


@dataclass
class Check:
    suite: str
    name: str
    ok: bool
    detail: str
    count: int = 0  # probes or cases behind the verdict

    def line(self) -> str:
        return f"[{'PASS' if self.ok else 'FAIL'}] {self.suite}/{self.name}: {self.detail}"


def _rng(seed, *key):
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, *key])))


# --- gradient checks --------------------------------------------------------------------------


class _Probe:
    """Collects central-difference comparisons, skipping probes that straddle a kink."""

    def __init__(self, h):
        self.h = h
        self.worst = 0.0
        self.count = 0
        self.skipped = 0

    def compare(self, f, x, index, analytic) -> bool:
        fd, kink = nn.central_difference(f, x, index, self.h)
        if kink > KINK_TOL * max(1.0, abs(fd)):
            self.skipped += 1
            return False
        self.worst = max(self.worst, nn.relative_error(float(analytic), fd))
        self.count += 1
        return True


def _probe_random(probe, rng, f, x, grad, want, max_tries=None):
    got, tries = 0, 0
    max_tries = max_tries or 20 * want
    while got < want and tries < max_tries:
        idx = tuple(int(rng.integers(0, s)) for s in x.shape)
        got += probe.compare(f, x, idx, grad[idx])
        tries += 1
    return got


def grad_mlp(seed=0, probes=60, fault=False) -> Check:
    rng = _rng(seed, 1)
    mlp = nn.init_mlp((6, 9, 9, 3), rng)
    arrays = {k: v.copy() for k, v in mlp.arrays().items()}
    x = rng.normal(size=(5, 6))
    w = rng.normal(size=(5, 3))

    def f():
        return float(np.sum(w * nn.forward(mlp.with_arrays(arrays), x)))

    _, tape = nn.forward_tape(mlp.with_arrays(arrays), x)
    grads, gx = nn.backward(mlp.with_arrays(arrays), tape, w)
    if fault:
        grads = {k: g * 1.01 for k, g in grads.items()}
    probe = _Probe(1e-5)
    keys = sorted(arrays)
    for i in range(probes):
        if i % 5 == 4:
            _probe_random(probe, rng, f, x, gx, 1)
        else:
            k = keys[i % len(keys)]
            _probe_random(probe, rng, f, arrays[k], grads[k], 1)
    return _grad_check("mlp", probe, probes)


def grad_bilinear(seed=0, probes=40) -> Check:
    rng = _rng(seed, 2)
    values = rng.normal(size=(7, 9, 3))
    uv = np.column_stack([rng.uniform(0.1, 7.9, 20), rng.uniform(0.1, 5.9, 20)])
    w = rng.normal(size=(20, 3))
    g = bilinear_backward(values, uv, w)
    probe = _Probe(1e-6)
    _probe_random(probe, rng, lambda: float(np.sum(w * bilinear(values, uv))), uv, g, probes)
    return _grad_check("bilinear-query", probe, probes)


def grad_reparam(seed=0, probes=20) -> Check:
    rng = _rng(seed, 3)
    mu = rng.normal(size=(10, 3))
    z = rng.normal(size=mu.shape)
    w = rng.normal(size=mu.shape)
    g = reparam_grad(mu, z, 0.1, w)
    probe = _Probe(1e-6)
    _probe_random(probe, rng, lambda: float(np.sum(w * reparam(mu, z, 0.1, 1e-3))), mu, g, probes)
    return _grad_check("reparam-mu", probe, probes)


def grad_loss(seed=0, probes=40) -> Check:
    rng = _rng(seed, 4)
    M, R, B, N = 2, 3, 2, 6
    means = [rng.normal(size=(B, N, 3)) for _ in range(M)]
    cams = [np.column_stack([rng.uniform(5, 10, (B, 2)), rng.normal(size=(B, 2))]) for _ in range(M)]
    samples = [m + 0.1 * rng.normal(size=(R, B, N, 3)) for m in means]
    gt_v = rng.normal(size=(B, N, 3))
    gt_c = np.column_stack([rng.uniform(5, 10, (B, 2)), rng.normal(size=(B, 2))])

    def f():
        st = [StageSamples(means[m], cams[m], samples[m]) for m in range(M)]
        return float(loss_v_terms(st, gt_v, gt_c, 0.7, 1.3)[0].sum())

    _, grads = loss_v_terms([StageSamples(means[m], cams[m], samples[m]) for m in range(M)], gt_v, gt_c, 0.7, 1.3)
    probe = _Probe(1e-6)
    for i in range(probes):
        m, which = i % M, (i // M) % 3
        x = (samples[m], means[m], cams[m])[which]
        _probe_random(probe, rng, f, x, grads[m][which], 1)
    return _grad_check("loss", probe, probes)


def micro_problem(seed=0, B=2, N=10, grid=(8, 8, 4), **cfg_kw):
    """A 10-vertex, two-instance pipeline problem for end-to-end gradient checks."""
    rng = _rng(seed, 5)
    H, W, C = grid
    groups = [[0, 1], [2, 3, 4], [5], [6, 7, 8, 9]][: N] if N == 10 else [list(range(N))]
    cfg = PipelineConfig(**{**dict(n_stages=2, n_samples=2, hidden=8, voxel_res=2), **cfg_kw})
    params = init_pipeline(cfg, N, grid, seed)
    arrays = {k: v.copy() for k, v in params.arrays().items()}
    # make the noise heads produce visible steps so every path carries gradient
    for k in arrays:
        if k.endswith("1.weight") and (".phi." in k or ".psi3d." in k):
            arrays[k] = rng.normal(size=arrays[k].shape) * 0.3
    grids = rng.normal(size=(B, H, W, C))
    v = rng.normal(size=(B, N, 3)) * 0.1
    u = rng.uniform(1.5, min(H, W) - 2.5, size=(B, N, 2))
    cam = np.column_stack([rng.uniform(15, 25, (B, 2)), rng.uniform(3, 4, (B, 2))])
    gt_v = v + 0.02 * rng.normal(size=v.shape)
    gt_cam = cam + 0.3 * rng.normal(size=cam.shape)
    noise = [draw_noise(seed, 0, range(B), m, cfg.n_samples, N) for m in range(cfg.n_stages)]
    template = HandMesh(np.zeros((N, 3)), [[0, 1, 2]], groups)
    return dict(params=params, arrays=arrays, grids=grids, v=v, u=u, cam=cam, gt_v=gt_v,
                gt_cam=gt_cam, noise=noise, template=template)


def grad_pipeline(seed=0, probes=60, **cfg_kw) -> Check:
    p = micro_problem(seed, **cfg_kw)
    params, arrays = p["params"], p["arrays"]
    inputs = {"input.v": p["v"], "input.u": p["u"], "input.cam": p["cam"]}

    def run():
        return forward_backward(params.with_arrays(arrays), Batch(p["v"], p["u"], p["cam"]), p["grids"],
                                p["gt_v"], p["gt_cam"], p["noise"], input_grads=True)

    def f():
        return float(run()[0].sum())

    _, grads = run()
    rng = _rng(seed, 6)
    probe = _Probe(1e-6)
    tensors = {**arrays, **inputs}
    keys = [k for k in sorted(tensors) if np.any(grads[k] != 0) or k.startswith("input")]
    for i in range(probes):
        k = keys[i % len(keys)]
        _probe_random(probe, rng, f, tensors[k], grads[k], 1)
    name = "pipeline" + "".join(f"[{k}={v}]" for k, v in sorted(cfg_kw.items()))
    return _grad_check(name, probe, probes, min_fraction=0.75)


def _grad_check(name, probe, wanted, min_fraction=0.9) -> Check:
    ok = probe.worst < GRAD_TOL and probe.count >= min_fraction * wanted
    return Check("gradcheck", name, ok,
                 f"{probe.count} probes ({probe.skipped} at kinks skipped), max rel err {probe.worst:.2e}",
                 probe.count)


def suite_gradcheck(seed=0, fault=False):
    return [grad_mlp(seed, fault=fault), grad_bilinear(seed), grad_reparam(seed), grad_loss(seed),
            grad_pipeline(seed), grad_pipeline(seed, use_2d=False), grad_pipeline(seed, use_3d=False),
            grad_pipeline(seed, use_camera=False)]


# --- ridge camera ---------------------------------------------------------------------------------


def ridge_oracle(vertices, coords, xi):
    """Direct normal-equation solve per axis with ``numpy.linalg.solve``."""
    out = np.zeros(4)
    for a in (0, 1):
        A = np.column_stack([vertices[:, a], np.ones(len(vertices))])
        sol = np.linalg.solve(A.T @ A + xi * np.eye(2), A.T @ coords[:, a])
        out[a], out[2 + a] = sol
    return out


def _random_camera(rng):
    return np.concatenate([rng.uniform(20, 200, 2) * rng.choice([-1, 1], 2), rng.uniform(-50, 50, 2)])


def suite_ridge(seed=0, cases=1000):
    rng = _rng(seed, 10)
    xis = (0.0, 1e-4, 0.1, 1.0)
    worst_oracle = worst_exact = worst_proj = worst_harm = 0.0
    for i in range(cases):
        N = int(rng.integers(2, 501))
        v = rng.normal(size=(N, 3))
        u = rng.normal(size=(N, 2)) * 30 + 10
        xi = xis[i % len(xis)]
        got = correct_camera(v, u, RidgeConfig(xi)).as_array()
        worst_oracle = max(worst_oracle, np.max(np.abs(got - ridge_oracle(v, u, xi))))

        c = _random_camera(rng)
        exact = correct_camera(v, project(v, c), RidgeConfig(0.0)).as_array()
        worst_exact = max(worst_exact, np.max(np.abs(exact - c)))

        c2 = _random_camera(rng)
        w = rng.normal(size=(N, 3))
        rec = correct_camera(w, project(w, Camera.from_array(c2)), RidgeConfig(0.0)).as_array()
        worst_proj = max(worst_proj, np.max(np.abs(rec - c2)))

        prev = c + rng.normal(size=4)
        for x in (0.0, 1e-6):
            fit = fit_camera_array(v, u, x)
            worst_harm = max(worst_harm, projection_residual(v, u, fit) - projection_residual(v, u, prev))
    return [
        Check("ridge", "normal-equation-oracle", worst_oracle <= RIDGE_TOL, f"{cases} cases, max abs err {worst_oracle:.2e}"),
        Check("ridge", "exact-fit-recovery", worst_exact <= RIDGE_TOL, f"{cases} cases, max abs err {worst_exact:.2e}"),
        Check("ridge", "projection-consistency", worst_proj <= RIDGE_TOL, f"{cases} cases, max abs err {worst_proj:.2e}"),
        Check("ridge", "non-harm", worst_harm <= 1e-9, f"max residual increase {worst_harm:.2e}"),
    ]


# --- pooling ---------------------------------------------------------------------------------------


def brute_force_views(vertices, features, G):
    """Per-vertex (front, lateral, top) features by explicit enumeration of cells and columns."""
    N, C = features.shape
    lo, hi = vertices.min(0), vertices.max(0)
    bins = np.zeros((N, 3), dtype=int)
    for n in range(N):
        for a in range(3):
            if hi[a] > lo[a]:
                bins[n, a] = min(int(np.floor((vertices[n, a] - lo[a]) / (hi[a] - lo[a]) * G)), G - 1)
    cells = {}
    for n in range(N):
        key = tuple(bins[n])
        cells[key] = features[n] if key not in cells else np.maximum(cells[key], features[n])
    out = np.zeros((N, 3 * C))
    for n in range(N):
        x, y, z = bins[n]
        for view, match in enumerate((lambda k: k[0] == x and k[1] == y,
                                      lambda k: k[1] == y and k[2] == z,
                                      lambda k: k[0] == x and k[2] == z)):
            column = [f for k, f in cells.items() if match(k)]
            out[n, view * C:(view + 1) * C] = np.max(column, axis=0)
    return out


def _random_pool_mesh(rng, G):
    N = int(rng.integers(1, 40))
    if rng.random() < 0.3:  # coarse lattice: many shared cells and exact ties
        v = rng.integers(0, 3, size=(N, 3)).astype(float)
    else:
        v = rng.normal(size=(N, 3))
    if rng.random() < 0.2:
        v[:, int(rng.integers(3))] = 0.5  # a flat axis
    feats = rng.normal(size=(N, int(rng.integers(1, 5))))
    if rng.random() < 0.3:
        feats = np.round(feats)
    return HandMesh(v, [], [list(range(N))]), feats


def suite_pooling(seed=0, meshes=100):
    rng = _rng(seed, 20)
    results = []
    for G in (2, 4, 8):
        mismatches = fused_mismatches = 0
        for _ in range(meshes):
            mesh, feats = _random_pool_mesh(rng, G)
            want = brute_force_views(mesh.vertices, feats, G)
            got = gather_view_features(three_view_pool(voxelize(mesh, feats, G)), mesh, G).concat()
            fused, _ = view_pool(feats[None], voxel_bins(mesh.vertices[None], G), G)
            mismatches += not np.array_equal(got, want)
            fused_mismatches += not np.array_equal(fused[0], want)
        results.append(Check("pooling", f"brute-force-G{G}", mismatches == 0,
                             f"{meshes} meshes, {mismatches} mismatches"))
        results.append(Check("pooling", f"fused-G{G}", fused_mismatches == 0,
                             f"{meshes} meshes, {fused_mismatches} mismatches"))
    return results


def run(suite: str = "all", seed: int = 0, fault: bool = False):
    if suite not in SUITES + ("all",):
        raise ValueError(f"unknown suite {suite!r}")
    out = []
    for name in (SUITES if suite == "all" else (suite,)):
        t0 = time.perf_counter()
        if name == "gradcheck":
            checks = suite_gradcheck(seed, fault)
        elif name == "ridge":
            checks = suite_ridge(seed)
        else:
            checks = suite_pooling(seed)
        dt = time.perf_counter() - t0
        for c in checks:
            c.detail += f" ({dt:.1f}s suite)"
        out.extend(checks)
    return out
