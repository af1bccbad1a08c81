import json

import numpy as np
import pytest
from hypothesis import HealthCheck, given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from latentfactor.archive import TensorArchive, load_archive, save_archive
from latentfactor.errors import ArgumentError, FormatError


def test_f64_round_trip(tmp_path, rng):
    arc = TensorArchive()
    x = rng.standard_normal((3, 4))
    arc.add("w", x)
    back = load_archive(save_archive(arc, tmp_path / "a"))
    assert back["w"].tobytes() == x.tobytes()
    assert back.dtypes["w"] == "f64"


def test_f32_round_trip(tmp_path):
    arc = TensorArchive(metadata={"k": [1, 2]})
    x = np.array([[0.5, -1.25], [3.0, 1024.0]])
    arc.add("w", x, "f32")
    back = load_archive(save_archive(arc, tmp_path / "a"))
    assert np.array_equal(back["w"], x) and back["w"].dtype == np.float64
    assert back.metadata == {"k": [1, 2]}


@settings(max_examples=30, deadline=None, suppress_health_check=[HealthCheck.function_scoped_fixture])
@given(arrays(np.float64, st.tuples(st.integers(0, 4), st.integers(1, 5)), elements=st.floats(allow_nan=False)))
def test_bitwise_stable(tmp_path, x):
    arc = TensorArchive()
    arc.add("a.b", x)
    arc.add("scalar", np.float64(2.5))
    back = load_archive(save_archive(arc, tmp_path / "h"))
    assert back["a.b"].tobytes() == x.tobytes()
    assert back["scalar"].shape == ()


def test_manifest_order_independent(tmp_path, rng):
    arc = TensorArchive()
    for name in ("z", "a", "m"):
        arc.add(name, rng.standard_normal(3))
    path = save_archive(arc, tmp_path / "a")
    manifest = json.loads((path / "manifest.json").read_text())
    manifest["tensors"].reverse()
    (path / "manifest.json").write_text(json.dumps(manifest))
    back = load_archive(path)
    for name in ("z", "a", "m"):
        assert np.array_equal(back[name], arc[name])


def test_corrupted_payload(tmp_path, rng):
    arc = TensorArchive()
    arc.add("w", rng.standard_normal((3, 4)))
    path = save_archive(arc, tmp_path / "a")
    payload = next(path.glob("*.bin"))
    payload.write_bytes(payload.read_bytes()[:-3])
    with pytest.raises(FormatError):
        load_archive(path)


def _write_manifest(path, tensors):
    path.mkdir()
    (path / "manifest.json").write_text(json.dumps({"tensors": tensors}))


def test_duplicate_names(tmp_path):
    path = tmp_path / "d"
    entry = {"name": "w", "dtype": "f64", "shape": [1], "file": "w.bin"}
    _write_manifest(path, [entry, entry])
    (path / "w.bin").write_bytes(np.zeros(1).tobytes())
    with pytest.raises(FormatError):
        load_archive(path)


@pytest.mark.parametrize(
    "entry",
    [
        {"name": "w", "dtype": "i8", "shape": [1], "file": "w.bin"},
        {"name": "w", "dtype": "f64", "shape": [-1], "file": "w.bin"},
        {"name": "w", "dtype": "f64", "shape": [1], "file": "missing.bin"},
        {"name": "w", "shape": [1], "file": "w.bin"},
    ],
)
def test_bad_entries(tmp_path, entry):
    path = tmp_path / "d"
    _write_manifest(path, [entry])
    (path / "w.bin").write_bytes(np.zeros(1).tobytes())
    with pytest.raises(FormatError):
        load_archive(path)


def test_missing_and_invalid_manifest(tmp_path):
    with pytest.raises(FormatError):
        load_archive(tmp_path)
    (tmp_path / "manifest.json").write_text("{not json")
    with pytest.raises(FormatError):
        load_archive(tmp_path)


def test_bad_dtype_on_add():
    with pytest.raises(ArgumentError):
        TensorArchive().add("w", np.zeros(2), "f16")
