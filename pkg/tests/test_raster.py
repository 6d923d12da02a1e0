import io
import json
import struct
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from stfuse.errors import FormatError, StackError, TruncationError, ValidationError
from stfuse.raster import (
    ClassMap,
    ImageStack,
    ProbabilityStack,
    RasterGrid,
    StackManifest,
    raster_bytes,
    read_raster,
    validate_stack,
    write_raster,
    write_stack,
)

GOLDEN = Path(__file__).parent / "data" / "golden_2x2x3.stfr"


def test_magic_prefix():
    buf = raster_bytes(RasterGrid(np.zeros((1, 1, 1))))
    assert buf[:4] == bytes([0x53, 0x54, 0x46, 0x52])


def test_file_size_2x2x3():
    grid = RasterGrid(np.arange(12, dtype=float).reshape(3, 2, 2))
    sink = io.BytesIO()
    n = write_raster(grid, sink)
    assert n == 24 + 48 == len(sink.getvalue())


def test_golden_file_bytes():
    raw = GOLDEN.read_bytes()
    magic, version, reserved, w, h, b, nodata = struct.unpack("<4sHHIIIf", raw[:24])
    assert (magic, version, reserved, w, h, b, nodata) == (b"STFR", 1, 0, 2, 2, 3, -9999.0)
    grid = read_raster(GOLDEN)
    expected = [0.5 * k - 1.0 for k in range(12)]
    expected[5] = -9999.0
    assert grid.data.reshape(-1).tolist() == expected
    assert grid.valid().sum() == 11
    assert raster_bytes(grid) == raw


def test_band_sequential_layout():
    data = np.arange(12, dtype=float).reshape(3, 2, 2)  # band, row, col
    buf = raster_bytes(RasterGrid(data))
    samples = struct.unpack("<12f", buf[24:])
    assert samples == tuple(float(v) for v in range(12))


def test_bad_magic():
    buf = bytearray(raster_bytes(RasterGrid(np.zeros((1, 2, 2)))))
    buf[:4] = b"XXXX"
    with pytest.raises(FormatError):
        read_raster(bytes(buf))


def test_truncated_payload():
    header = struct.pack("<4sHHIIIf", b"STFR", 1, 0, 2, 2, 1, -9999.0)
    with pytest.raises(TruncationError):
        read_raster(header + struct.pack("<3f", 1, 2, 3))


def test_truncated_header():
    with pytest.raises(TruncationError):
        read_raster(b"STFR\x01\x00")


def test_non_finite_sample_rejected():
    header = struct.pack("<4sHHIIIf", b"STFR", 1, 0, 1, 1, 1, -9999.0)
    with pytest.raises(ValidationError):
        read_raster(header + struct.pack("<f", float("inf")))


def test_grid_invariants():
    with pytest.raises(ValidationError):
        RasterGrid(np.array([[[np.nan]]]))
    with pytest.raises(Exception):
        RasterGrid(np.zeros((1, 0, 3)))
    g = RasterGrid(np.zeros((2, 3, 4)))
    assert (g.bands, g.height, g.width) == (2, 3, 4)
    with pytest.raises(ValueError):
        g.data[0, 0, 0] = 1.0  # immutable


def test_path_roundtrip(tmp_path):
    grid = RasterGrid(np.float32(np.linspace(-5, 5, 24)).reshape(2, 3, 4), nodata=-1.5)
    write_raster(grid, tmp_path / "g.stfr")
    assert read_raster(tmp_path / "g.stfr") == grid


@st.composite
def grids(draw):
    w = draw(st.integers(1, 16))
    h = draw(st.integers(1, 16))
    b = draw(st.integers(1, 4))
    nodata = draw(st.sampled_from([-9999.0, 0.0, 65535.0, float(np.float32(-3.0e38))]))
    values = draw(
        st.lists(
            st.one_of(
                st.floats(-1e4, 1e4, width=32, allow_nan=False),
                st.just(nodata),
            ),
            min_size=w * h * b,
            max_size=w * h * b,
        )
    )
    return RasterGrid(np.array(values).reshape(b, h, w), nodata)


@settings(max_examples=200, deadline=None)
@given(grids())
def test_roundtrip_property(grid):
    buf = raster_bytes(grid)
    back = read_raster(buf)
    assert back == grid
    assert back.data.tobytes() == grid.data.tobytes()
    assert raster_bytes(back) == buf


def test_little_endian_regardless_of_host():
    grid = RasterGrid(np.array([[[1.0, 2.0]]]))
    buf = raster_bytes(grid)
    assert buf[8:12] == (2).to_bytes(4, "little")
    assert buf[24:28] == np.array(1.0, dtype="<f4").tobytes()


def _stack_dir(tmp_path, shapes, role="image", values=None):
    entries = []
    for i, shape in enumerate(shapes):
        arr = np.full(shape, 0.5 if values is None else values[i])
        write_raster(RasterGrid(arr), tmp_path / f"e{i}.stfr")
        entries.append({"id": f"e{i}", "path": f"e{i}.stfr"})
    doc = {"version": 1, "role": role, "epochs": entries}
    path = tmp_path / "m.json"
    path.write_text(json.dumps(doc))
    return path


def test_validate_stack_three_epochs(tmp_path):
    stack = validate_stack(StackManifest.load(_stack_dir(tmp_path, [(1, 4, 4)] * 3)))
    assert len(stack) == 3
    assert stack.epoch_ids == ("e0", "e1", "e2")


def test_validate_stack_mixed_sizes(tmp_path):
    path = _stack_dir(tmp_path, [(1, 64, 64), (1, 32, 32), (1, 64, 64)])
    with pytest.raises(StackError, match="e1"):
        validate_stack(StackManifest.load(path))


def test_validate_probability_out_of_range(tmp_path):
    path = _stack_dir(tmp_path, [(2, 4, 4)] * 2, role="probability", values=[0.5, 1.5])
    with pytest.raises(ValidationError):
        validate_stack(StackManifest.load(path))


def test_validate_probability_role(tmp_path):
    path = _stack_dir(tmp_path, [(2, 4, 4)] * 2, role="probability")
    stack = validate_stack(StackManifest.load(path))
    assert isinstance(stack, ProbabilityStack)
    assert stack.class_names == ("class0", "class1")


def test_manifest_declared_dims_checked(tmp_path):
    path = _stack_dir(tmp_path, [(1, 4, 4)] * 2)
    doc = json.loads(path.read_text())
    doc["width"] = 5
    path.write_text(json.dumps(doc))
    with pytest.raises(StackError):
        validate_stack(StackManifest.load(path))


def test_manifest_missing_file(tmp_path):
    with pytest.raises(FileNotFoundError):
        StackManifest.load(tmp_path / "nope.json")


def test_manifest_bad_role(tmp_path):
    with pytest.raises(FormatError):
        StackManifest.from_json({"version": 1, "role": "xyz", "epochs": []})


def test_write_stack_roundtrip(tmp_path):
    rng = np.random.default_rng(0)
    stack = ImageStack.from_nan(np.float32(rng.uniform(0, 9, (3, 2, 5, 4))), epoch_ids=("a", "b", "c"))
    path = write_stack(stack, tmp_path, "s")
    back = validate_stack(StackManifest.load(path))
    assert back.epoch_ids == stack.epoch_ids
    assert all(x == y for x, y in zip(back.epochs, stack.epochs))


def test_stack_invariants():
    a = RasterGrid(np.zeros((1, 4, 4)))
    with pytest.raises(StackError):
        ImageStack((a, RasterGrid(np.zeros((1, 4, 5)))))
    with pytest.raises(StackError):
        ImageStack((a, RasterGrid(np.zeros((1, 4, 4)), nodata=-1.0)))
    with pytest.raises(StackError):
        ImageStack(())


def test_classmap_roundtrip_and_checks():
    cm = ClassMap(np.array([[0, 1], [-1, 2]]), ("a", "b", "c"))
    assert ClassMap.from_grid(cm.to_grid(), cm.class_names) == cm
    with pytest.raises(ValidationError):
        ClassMap(np.array([[0, 3]]), ("a", "b", "c"))
