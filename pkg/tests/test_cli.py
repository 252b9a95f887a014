import csv
import json
import time

import numpy as np
import pytest

from dne import io as dio
from dne.cli import load_params, main, read_dataset, read_instance, save_params
from dne.mesh import HandMesh, mpvpe
from dne.pipeline import PipelineConfig, evaluate, refine, zero_pipeline


def tree_bytes(root):
    return {p.relative_to(root).as_posix(): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("data")
    assert main(["gen", "--out", str(root), "--count", "6", "--seed", "3"]) == 0
    return root


def test_gen_layout(dataset):
    manifest = json.loads((dataset / "manifest.json").read_text())
    assert manifest["count"] == 6 and len(manifest["instances"]) == 6
    assert all("seed" in e for e in manifest["instances"])
    inst = dataset / manifest["instances"][0]["name"]
    for name in ("gt_mesh.json", "coarse_mesh.json", "camera.json", "features.dnepack"):
        assert (inst / name).is_file()
    assert set(json.loads((inst / "camera.json").read_text())) == {"sx", "sy", "tx", "ty"}
    assert dio.load_grid(inst / "features.dnepack").shape == (32, 32, 16)


def test_gen_byte_identical(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    assert main(["gen", "--out", str(a), "--count", "1", "--seed", "7"]) == 0
    assert main(["gen", "--out", str(b), "--count", "1", "--seed", "7"]) == 0
    assert tree_bytes(a) == tree_bytes(b)


def test_gen_zero_corruption(tmp_path):
    assert main(["gen", "--out", str(tmp_path), "--count", "2", "--seed", "1", "--corruption", "0"]) == 0
    for inst in sorted(p for p in tmp_path.iterdir() if p.is_dir()):
        gt = HandMesh.from_json((inst / "gt_mesh.json").read_text())
        coarse = HandMesh.from_json((inst / "coarse_mesh.json").read_text())
        assert np.array_equal(gt.vertices, coarse.vertices)
        assert (inst / "camera.json").read_text() == (inst / "coarse_camera.json").read_text()
    assert main(["eval", "--data", str(tmp_path)]) == 0
    with open(tmp_path / "eval.csv") as f:
        rows = list(csv.DictReader(f))
    assert [float(rows[0][k]) for k in ("mpvpe3d", "mpjpe3d", "mpvpe2d")] == [0.0, 0.0, 0.0]


def test_train_refine_eval(dataset, tmp_path, capsys):
    ckpt = tmp_path / "run" / "model.dnepack"
    args = ["train", "--data", str(dataset), "--out", str(ckpt), "--modules", "2", "--samples", "2",
            "--epochs", "2", "--seed", "5"]
    assert main(args) == 0
    metrics = (tmp_path / "run" / "metrics.csv").read_text().splitlines()
    assert metrics[0] == "epoch,split,loss,mpvpe3d,mpjpe3d,mpvpe2d" and len(metrics) == 3
    first = ckpt.read_bytes()
    assert main(args) == 0
    assert ckpt.read_bytes() == first

    out = tmp_path / "refined"
    assert main(["refine", "--ckpt", str(ckpt), "--instance", str(dataset / "00000"), "--out", str(out)]) == 0
    trace = json.loads((out / "trace.json").read_text())
    assert len(trace["stages"]) == 2
    refined = HandMesh.from_json((out / "refined_mesh.json").read_text())

    capsys.readouterr()
    assert main(["eval", "--ckpt", str(ckpt), "--data", str(dataset), "--out", str(tmp_path / "e.csv")]) == 0
    table = capsys.readouterr().out.splitlines()
    assert table[0].split() == ["split", "mpvpe3d", "mpjpe3d", "mpvpe2d"]
    with open(tmp_path / "e.csv") as f:
        rows = list(csv.DictReader(f))
    assert list(rows[0]) == ["split", "mpvpe3d", "mpjpe3d", "mpvpe2d"]
    assert [r["split"] for r in rows] == ["coarse", "refined"]

    # cross-check: eval equals refine + metrics composed by hand
    data = read_dataset(dataset)
    params = load_params(ckpt)
    manual = np.mean([mpvpe(refine(read_instance(dataset / f"{i:05d}")[2], read_instance(dataset / f"{i:05d}")[3],
                                   params).mesh, data.gt_v[i]) for i in range(len(data))])
    assert float(rows[1]["mpvpe3d"]) == pytest.approx(manual, rel=1e-9)
    assert mpvpe(refined, data.gt_v[0]) >= 0


def test_zero_epoch_dump_is_init(dataset, tmp_path):
    ckpt = tmp_path / "init.dnepack"
    assert main(["train", "--data", str(dataset), "--out", str(ckpt), "--epochs", "0", "--seed", "2"]) == 0
    from dne.pipeline import init_pipeline
    data = read_dataset(dataset)
    init = init_pipeline(PipelineConfig(), data.template.n_vertices, data.grids.shape[1:], 2)
    got = load_params(ckpt).arrays()
    assert all(np.allclose(got[k], v, atol=1e-6, rtol=1e-6) for k, v in init.arrays().items())


def test_refine_zero_checkpoint_keeps_coarse(dataset, tmp_path):
    data = read_dataset(dataset)
    ckpt = tmp_path / "zero.dnepack"
    save_params(ckpt, zero_pipeline(PipelineConfig(), data.template.n_vertices, data.grids.shape[1:]),
                data.template.n_vertices, data.grids.shape[1:])
    out = tmp_path / "z"
    assert main(["refine", "--ckpt", str(ckpt), "--instance", str(dataset / "00001"), "--out", str(out)]) == 0
    coarse = HandMesh.from_json((dataset / "00001" / "coarse_mesh.json").read_text())
    refined = HandMesh.from_json((out / "refined_mesh.json").read_text())
    assert np.array_equal(refined.vertices, coarse.vertices)
    assert len(json.loads((out / "trace.json").read_text())["stages"]) == 3
    assert evaluate(load_params(ckpt), data)["mpvpe3d"] == pytest.approx(evaluate(None, data)["mpvpe3d"])


def test_verify_suites(capsys):
    t0 = time.perf_counter()
    assert main(["verify", "--suite", "ridge"]) == 0
    assert time.perf_counter() - t0 < 5.0
    assert main(["verify", "--suite", "pooling"]) == 0
    out = capsys.readouterr().out
    assert "FAIL" not in out and "PASS" in out


def test_verify_detects_corrupted_gradient(capsys):
    assert main(["verify", "--suite", "gradcheck", "--inject-fault"]) == 1
    assert "[FAIL] gradcheck/mlp" in capsys.readouterr().out


def test_io_errors_exit_2(tmp_path):
    assert main(["eval", "--data", str(tmp_path / "missing")]) == 2
    assert main(["refine", "--ckpt", str(tmp_path / "nope"), "--instance", str(tmp_path), "--out", str(tmp_path)]) == 2
    blocker = tmp_path / "file"
    blocker.write_text("x")
    assert main(["gen", "--out", str(blocker / "sub"), "--count", "1"]) == 2
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"pipeline": {"no_such_key": 1}}))
    assert main(["gen", "--out", str(tmp_path / "g"), "--count", "1", "--config", str(bad)]) == 2


def test_config_file_overrides(dataset, tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"pipeline": {"hidden": 8, "voxel_res": 4}}))
    ckpt = tmp_path / "m.dnepack"
    assert main(["train", "--data", str(dataset), "--out", str(ckpt), "--epochs", "0", "--modules", "1",
                 "--config", str(cfg)]) == 0
    p = load_params(ckpt)
    assert p.config.hidden == 8 and p.config.voxel_res == 4 and len(p.stages) == 1


def test_default_set_band_and_trained_gain(tmp_path):
    data = tmp_path / "d"
    assert main(["gen", "--out", str(data), "--count", "100", "--seed", "4"]) == 0
    manifest = json.loads((data / "manifest.json").read_text())
    assert 0.04 <= manifest["mean_coarse_mpvpe"] <= 0.08

    ckpt = tmp_path / "m.dnepack"
    assert main(["train", "--data", str(data), "--out", str(ckpt), "--modules", "1", "--samples", "2",
                 "--epochs", "4", "--seed", "0"]) == 0
    assert main(["eval", "--ckpt", str(ckpt), "--data", str(data), "--out", str(tmp_path / "e.csv")]) == 0
    with open(tmp_path / "e.csv") as f:
        coarse, refined = (float(r["mpvpe3d"]) for r in csv.DictReader(f))
    assert refined < coarse

    assert main(["refine", "--ckpt", str(ckpt), "--instance", str(data / "00000"), "--out", str(tmp_path / "r")]) == 0
    gt = HandMesh.from_json((data / "00000" / "gt_mesh.json").read_text())
    before = HandMesh.from_json((data / "00000" / "coarse_mesh.json").read_text())
    after = HandMesh.from_json((tmp_path / "r" / "refined_mesh.json").read_text())
    assert mpvpe(after, gt) < mpvpe(before, gt)
