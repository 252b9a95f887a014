"""Command-line interface: ``dne gen|train|refine|eval|verify``.

Exit codes: 0 success, 1 verification or metric failure, 2 I/O or config error.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import io as _io
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import io as dio
from .camera import Camera, project
from .features import FeatureGrid
from .mesh import HandMesh
from .pipeline import (DataConfig, Dataset, DnePipelineParams, PipelineConfig, RefinementState,
                       evaluate, init_pipeline, make_synthetic_instance, refine, train)

log = logging.getLogger("dne")

EXIT_OK, EXIT_FAIL, EXIT_IO = 0, 1, 2
METRIC_FIELDS = ("split", "mpvpe3d", "mpjpe3d", "mpvpe2d")


class ConfigError(ValueError):
    pass


# --- dataset directories ------------------------------------------------------------


def _instance_name(i: int) -> str:
    return f"{i:05d}"


def write_instance(path: Path, inst) -> None:
    path.mkdir(parents=True, exist_ok=True)
    dio.atomic_write(path / "gt_mesh.json", inst.gt_mesh.to_json().encode())
    dio.atomic_write(path / "coarse_mesh.json", inst.coarse.mesh.to_json().encode())
    dio.atomic_write(path / "camera.json", inst.gt_camera.to_json().encode())
    dio.atomic_write(path / "coarse_camera.json", inst.coarse.camera.to_json().encode())
    dio.save_grid(path / "features.dnepack", inst.grid.values)


def read_instance(path: Path):
    """Returns ``(gt_mesh, gt_camera, coarse_state, grid)`` from an instance directory."""
    path = Path(path)
    gt = HandMesh.from_json((path / "gt_mesh.json").read_text())
    coarse = HandMesh.from_json((path / "coarse_mesh.json").read_text())
    cam = Camera.from_json((path / "camera.json").read_text())
    cam0 = Camera.from_json((path / "coarse_camera.json").read_text())
    grid = FeatureGrid(dio.load_grid(path / "features.dnepack"))
    return gt, cam, RefinementState(coarse, project(coarse.vertices, cam0), cam0), grid


def read_dataset(root: Path) -> Dataset:
    root = Path(root)
    manifest = dio.read_json(root / "manifest.json")
    items = [read_instance(root / e["name"]) for e in manifest["instances"]]
    if not items:
        raise ConfigError("dataset is empty")
    gt0 = items[0][0]
    return Dataset(
        gt0,
        np.stack([g.vertices for g, _, _, _ in items]),
        np.stack([c.as_array() for _, c, _, _ in items]),
        np.stack([s.mesh.vertices for _, _, s, _ in items]),
        np.stack([s.coords_2d for _, _, s, _ in items]),
        np.stack([s.camera.as_array() for _, _, s, _ in items]),
        np.stack([gr.values for _, _, _, gr in items]),
        np.asarray([e["seed"] for e in manifest["instances"]]),
    )


# --- config --------------------------------------------------------------------------


def _load_config(path):
    """Optional JSON with ``pipeline`` and ``data`` objects of scalar overrides."""
    if path is None:
        return {}, {}
    cfg = dio.read_json(path)
    if not isinstance(cfg, dict):
        raise ConfigError("config must be a JSON object")
    pipe, data = cfg.get("pipeline", {}), cfg.get("data", {})
    known_p = {f.name for f in dataclasses.fields(PipelineConfig)}
    known_d = {f.name for f in dataclasses.fields(DataConfig)}
    bad = sorted(set(pipe) - known_p) + sorted(set(data) - known_d)
    if bad:
        raise ConfigError(f"unknown config keys: {', '.join(bad)}")
    if "grid" in data:
        data["grid"] = tuple(data["grid"])
    return pipe, data


def _config_json(cfg) -> dict:
    return {k: (list(v) if isinstance(v, tuple) else v) for k, v in dataclasses.asdict(cfg).items()}


# --- checkpoints ------------------------------------------------------------------------


def save_params(path, params: DnePipelineParams, n_vertices: int, grid_shape) -> None:
    meta = {"config": _config_json(params.config), "n_vertices": int(n_vertices),
            "grid": [int(g) for g in grid_shape]}
    dio.save_checkpoint(path, params.arrays(), meta)


def load_params(path) -> DnePipelineParams:
    tensors, meta = dio.load_checkpoint(path)
    try:
        cfg = PipelineConfig(**meta["config"])
        skeleton = init_pipeline(cfg, meta["n_vertices"], tuple(meta["grid"]), seed=0)
    except (KeyError, TypeError) as e:
        raise ConfigError(f"checkpoint metadata incomplete: {e}") from None
    expected = skeleton.arrays()
    if set(expected) != set(tensors) or any(expected[k].shape != tensors[k].shape for k in expected):
        raise ConfigError("checkpoint tensors do not match its configuration")
    return skeleton.with_arrays(tensors)


# --- subcommands ------------------------------------------------------------------------


def cmd_gen(args) -> int:
    _, data_kw = _load_config(args.config)
    cfg = DataConfig.at_level(args.corruption, **data_kw)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    seeds = [int(s) for s in np.random.SeedSequence(args.seed).generate_state(args.count, dtype=np.uint32)]
    entries, errors = [], []
    for i, s in enumerate(seeds):
        inst = make_synthetic_instance(s, cfg)
        write_instance(out / _instance_name(i), inst)
        errors.append(float(np.linalg.norm(inst.coarse.mesh.vertices - inst.gt_mesh.vertices, axis=1).mean()))
        entries.append({"name": _instance_name(i), "seed": s})
    manifest = {"version": 1, "count": args.count, "seed": args.seed, "corruption": args.corruption,
                "data_config": _config_json(cfg), "instances": entries,
                "mean_coarse_mpvpe": float(np.mean(errors)) if errors else 0.0}
    dio.write_json(out / "manifest.json", manifest)
    print(f"wrote {args.count} instances to {out} (mean coarse MPVPE {manifest['mean_coarse_mpvpe']:.5f})")
    return EXIT_OK


def cmd_train(args) -> int:
    pipe_kw, _ = _load_config(args.config)
    pipe_kw.update(n_stages=args.modules, n_samples=args.samples)
    cfg = PipelineConfig(**pipe_kw)
    data = read_dataset(args.data)
    val = read_dataset(args.val) if args.val else None
    result = train(data, cfg, args.epochs, args.seed, val=val)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_params(out, result.params, data.template.n_vertices, data.grids.shape[1:])
    metrics = Path(args.metrics) if args.metrics else out.parent / "metrics.csv"
    dio.atomic_write(metrics, result.log_csv().encode())
    print(f"wrote {out} and {metrics}")
    return EXIT_OK


def cmd_refine(args) -> int:
    params = load_params(args.ckpt)
    _, _, coarse, grid = read_instance(Path(args.instance))
    state = refine(coarse, grid, params)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    dio.atomic_write(out / "refined_mesh.json", state.mesh.to_json().encode())
    dio.atomic_write(out / "camera.json", state.camera.to_json().encode())
    trace = {"coords_2d": state.coords_2d.tolist(),
             "stages": [{"mu_2d": t.mu_2d.tolist(), "mu_3d": t.mu_3d.tolist(),
                         "camera": json.loads(t.camera.to_json())} for t in state.trace]}
    dio.write_json(out / "trace.json", trace)
    print(f"refined {args.instance} through {len(state.trace)} stages into {out}")
    return EXIT_OK


def metrics_table(rows) -> str:
    lines = [f"{'split':<10}{'mpvpe3d':>12}{'mpjpe3d':>12}{'mpvpe2d':>12}"]
    for r in rows:
        lines.append(f"{r['split']:<10}{r['mpvpe3d']:>12.6f}{r['mpjpe3d']:>12.6f}{r['mpvpe2d']:>12.6f}")
    return "\n".join(lines)


def cmd_eval(args) -> int:
    data = read_dataset(args.data)
    rows = [dict(split="coarse", **evaluate(None, data))]
    if args.ckpt:
        rows.append(dict(split="refined", **evaluate(load_params(args.ckpt), data)))
    print(metrics_table(rows))
    buf = _io.StringIO()
    w = csv.DictWriter(buf, fieldnames=METRIC_FIELDS, lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({k: (f"{r[k]:.10g}" if isinstance(r[k], float) else r[k]) for k in METRIC_FIELDS})
    out = Path(args.out) if args.out else Path(args.data) / "eval.csv"
    dio.atomic_write(out, buf.getvalue().encode())
    return EXIT_OK


def cmd_verify(args) -> int:
    from . import verify

    results = verify.run(args.suite, seed=args.seed, fault=args.inject_fault)
    for r in results:
        print(r.line())
    failed = [r for r in results if not r.ok]
    print(f"{len(results) - len(failed)}/{len(results)} checks passed")
    return EXIT_FAIL if failed else EXIT_OK


# --- entry point -------------------------------------------------------------------------


def _nonneg_int(text):
    v = int(text)
    if v < 0:
        raise argparse.ArgumentTypeError("must be >= 0")
    return v


def _pos_int(text):
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError("must be >= 1")
    return v


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dne", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true", help="log per-epoch progress")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="generate a synthetic dataset directory")
    g.add_argument("--out", required=True)
    g.add_argument("--count", type=_nonneg_int, required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--corruption", type=float, default=DataConfig.corruption,
                   help="per-axis std of per-group coarse offsets (scene units); camera noise scales with it")
    g.add_argument("--config", help="JSON file with 'data' overrides")
    g.set_defaults(func=cmd_gen)

    t = sub.add_parser("train", help="train refinement stages on a dataset")
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True, help="checkpoint path (DNEPACK)")
    t.add_argument("--modules", type=_nonneg_int, default=PipelineConfig.n_stages)
    t.add_argument("--samples", type=_pos_int, default=PipelineConfig.n_samples)
    t.add_argument("--epochs", type=_nonneg_int, default=15)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--val", help="optional validation dataset directory")
    t.add_argument("--metrics", help="metrics CSV path (default: metrics.csv beside the checkpoint)")
    t.add_argument("--config", help="JSON file with 'pipeline' overrides")
    t.set_defaults(func=cmd_train)

    r = sub.add_parser("refine", help="refine one instance with a checkpoint")
    r.add_argument("--ckpt", required=True)
    r.add_argument("--instance", required=True)
    r.add_argument("--out", required=True)
    r.set_defaults(func=cmd_refine)

    e = sub.add_parser("eval", help="score coarse and refined meshes on a dataset")
    e.add_argument("--ckpt", help="checkpoint; omitted scores the coarse input only")
    e.add_argument("--data", required=True)
    e.add_argument("--out", help="CSV path (default: DATA/eval.csv)")
    e.set_defaults(func=cmd_eval)

    v = sub.add_parser("verify", help="run the oracle suites")
    v.add_argument("--suite", choices=("gradcheck", "ridge", "pooling", "all"), default="all")
    v.add_argument("--seed", type=int, default=0)
    v.add_argument("--inject-fault", action="store_true", help=argparse.SUPPRESS)
    v.set_defaults(func=cmd_verify)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except (OSError, dio.PackError, ConfigError, json.JSONDecodeError, KeyError) as e:
        print(f"dne: error: {e}", file=sys.stderr)
        return EXIT_IO
    except FloatingPointError as e:
        print(f"dne: numeric failure: {e}", file=sys.stderr)
        return EXIT_FAIL
    except (TypeError, ValueError) as e:
        print(f"dne: config error: {e}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
