import json
import struct

import numpy as np
import pytest

from dne import io as dio


def test_grid_round_trip(tmp_path):
    values = np.random.default_rng(0).normal(size=(4, 5, 3))
    dio.save_grid(tmp_path / "g.dnepack", values)
    back = dio.load_grid(tmp_path / "g.dnepack")
    assert back.shape == (4, 5, 3) and back.dtype == np.float64
    assert np.array_equal(back, values.astype(np.float32).astype(np.float64))


def test_grid_layout():
    values = np.arange(6, dtype=float).reshape(1, 2, 3)
    blob = dio.encode_grid(values)
    assert blob[:8] == b"DNEPACK1"
    (n,) = struct.unpack("<I", blob[8:12])
    header = json.loads(blob[12:12 + n])
    assert header == {"shape": [1, 2, 3], "dtype": "f32le", "kind": "feature_grid"}
    assert np.array_equal(np.frombuffer(blob[12 + n:], dtype="<f4"), np.arange(6))


def test_checkpoint_round_trip(tmp_path):
    rng = np.random.default_rng(1)
    tensors = {"b": rng.normal(size=(3,)), "a.weight": rng.normal(size=(2, 4))}
    dio.save_checkpoint(tmp_path / "c.dnepack", tensors, meta={"note": 1})
    back, meta = dio.load_checkpoint(tmp_path / "c.dnepack")
    assert meta == {"note": 1}
    for k, v in tensors.items():
        assert np.allclose(back[k], v, atol=1e-6)
    header = json.loads(dio.encode_checkpoint(tensors)[12:].split(b"}]")[0] + b"}]}")
    assert header["kind"] == "checkpoint"
    assert [t["name"] for t in header["tensors"]] == ["a.weight", "b"]


def test_encoding_is_byte_stable():
    t = {"x": np.linspace(0, 1, 7)}
    assert dio.encode_checkpoint(t) == dio.encode_checkpoint({"x": np.linspace(0, 1, 7)})


@pytest.mark.parametrize("blob", [b"", b"NOTAPACK\x00\x00\x00\x00", b"DNEPACK1\xff\x00\x00\x00{}"])
def test_rejects_malformed(blob):
    with pytest.raises(dio.PackError):
        dio.decode_grid(blob)


def test_rejects_wrong_kind_and_size():
    grid = dio.encode_grid(np.zeros((2, 2, 1)))
    with pytest.raises(dio.PackError):
        dio.decode_checkpoint(grid)
    with pytest.raises(dio.PackError):
        dio.decode_grid(grid[:-4])
    with pytest.raises(dio.PackError):
        dio.decode_checkpoint(dio.encode_checkpoint({"a": np.zeros(3)}) + b"\x00" * 4)
    with pytest.raises(dio.PackError):
        dio.encode_grid(np.full((2, 2, 1), np.nan))


def test_atomic_write_leaves_no_temp(tmp_path):
    dio.atomic_write(tmp_path / "f.bin", b"abc")
    dio.atomic_write(tmp_path / "f.bin", b"xyz")
    assert (tmp_path / "f.bin").read_bytes() == b"xyz"
    assert [p.name for p in tmp_path.iterdir()] == ["f.bin"]
