"""Raster data model, the STFR binary format and JSON stack manifests.

STFR layout (all integers little-endian)::

    offset  size  field
    0       4     magic b"STFR"
    4       2     format version (u16, = 1)
    6       2     reserved (u16, = 0)
    8       4     width (u32)
    12      4     height (u32)
    16      4     bands (u32)
    20      4     nodata sentinel (float32)
    24      ...   width*height*bands float32 samples, band-sequential,
                  each band plane row-major with rows top-to-bottom

In memory every grid holds float64 samples shaped ``(bands, height, width)``;
writing narrows to float32, so grids built from :func:`read_raster` round-trip
bit-for-bit.
"""

from __future__ import annotations

import io
import json
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import BinaryIO, Sequence, Union

import numpy as np

from .errors import (
    DimensionError,
    FormatError,
    StackError,
    TruncationError,
    ValidationError,
)

MAGIC = b"STFR"
FORMAT_VERSION = 1
HEADER = struct.Struct("<4sHHIIIf")
HEADER_SIZE = HEADER.size  # 24
DEFAULT_NODATA = -9999.0
NODATA_LABEL = -1
MANIFEST_VERSION = 1
ROLES = ("image", "dsm", "probability")

PathLike = Union[str, os.PathLike]


def _frozen(arr: np.ndarray) -> np.ndarray:
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class RasterGrid:
    """A 2-D multi-band float raster with a nodata sentinel.

    ``data`` is shaped ``(bands, height, width)``. Every sample must be finite
    or exactly equal to ``nodata``.
    """

    data: np.ndarray
    nodata: float = DEFAULT_NODATA

    def __post_init__(self):
        data = np.array(self.data, dtype=np.float64)
        if data.ndim == 2:
            data = data[np.newaxis]
        if data.ndim != 3:
            raise DimensionError(f"raster data must be 2-D or 3-D, got shape {data.shape}")
        if min(data.shape) < 1:
            raise DimensionError(f"raster dimensions must be >= 1, got {data.shape}")
        nodata = float(self.nodata)
        if not np.isfinite(nodata):
            raise ValidationError("nodata sentinel must be finite")
        bad = ~np.isfinite(data) & (data != nodata)
        if bad.any():
            b, y, x = np.argwhere(bad)[0]
            raise ValidationError(
                f"non-finite sample {data[b, y, x]} at band {b}, row {y}, col {x}"
            )
        object.__setattr__(self, "data", _frozen(data))
        object.__setattr__(self, "nodata", nodata)

    @property
    def bands(self) -> int:
        return self.data.shape[0]

    @property
    def height(self) -> int:
        return self.data.shape[1]

    @property
    def width(self) -> int:
        return self.data.shape[2]

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.data.shape

    def valid(self) -> np.ndarray:
        """Boolean ``(bands, height, width)`` mask of non-nodata samples."""
        return self.data != self.nodata

    def to_nan(self) -> np.ndarray:
        """Copy of the samples with nodata replaced by NaN."""
        out = self.data.copy()
        out[~self.valid()] = np.nan
        return out

    @classmethod
    def from_nan(cls, arr: np.ndarray, nodata: float = DEFAULT_NODATA) -> "RasterGrid":
        """Build a grid from an array where NaN marks missing samples."""
        arr = np.array(arr, dtype=np.float64)
        arr[np.isnan(arr)] = nodata
        return cls(arr, nodata)

    def band(self, index: int) -> "RasterGrid":
        return RasterGrid(self.data[index : index + 1], self.nodata)

    def same_geometry(self, other: "RasterGrid") -> bool:
        return (self.width, self.height) == (other.width, other.height)

    def __eq__(self, other):
        if not isinstance(other, RasterGrid):
            return NotImplemented
        return (
            self.shape == other.shape
            and np.float32(self.nodata).tobytes() == np.float32(other.nodata).tobytes()
            and np.array_equal(self.data, other.data)
        )

    __hash__ = None


@dataclass(frozen=True, eq=False)
class ClassMap:
    """Integer-labelled semantic raster; ``nodata_label`` marks unlabelled pixels."""

    labels: np.ndarray
    class_names: tuple[str, ...]
    nodata_label: int = NODATA_LABEL

    def __post_init__(self):
        labels = np.array(self.labels)
        if labels.ndim != 2 or min(labels.shape) < 1:
            raise DimensionError(f"class map must be a non-empty 2-D array, got {labels.shape}")
        if labels.dtype.kind == "f":
            if not np.all(labels == np.round(labels)):
                raise ValidationError("class labels must be integers")
        labels = labels.astype(np.int32)
        names = tuple(str(n) for n in self.class_names)
        if len(names) < 1:
            raise ValidationError("class map needs a non-empty vocabulary")
        if 0 <= self.nodata_label < len(names):
            raise ValidationError("nodata label collides with a class index")
        valid = labels != self.nodata_label
        if np.any(valid & ((labels < 0) | (labels >= len(names)))):
            bad = np.unique(labels[valid & ((labels < 0) | (labels >= len(names)))])
            raise ValidationError(f"labels {bad.tolist()} do not index the vocabulary {names}")
        object.__setattr__(self, "labels", _frozen(labels))
        object.__setattr__(self, "class_names", names)
        object.__setattr__(self, "nodata_label", int(self.nodata_label))

    @property
    def height(self) -> int:
        return self.labels.shape[0]

    @property
    def width(self) -> int:
        return self.labels.shape[1]

    def valid(self) -> np.ndarray:
        return self.labels != self.nodata_label

    def to_grid(self) -> RasterGrid:
        """Single-band float raster for STFR storage (nodata = the nodata label)."""
        return RasterGrid(self.labels.astype(np.float64)[np.newaxis], float(self.nodata_label))

    @classmethod
    def from_grid(cls, grid: RasterGrid, class_names: Sequence[str]) -> "ClassMap":
        if grid.bands != 1:
            raise DimensionError(f"class map raster must have 1 band, got {grid.bands}")
        plane = grid.data[0]
        labels = np.where(plane == grid.nodata, NODATA_LABEL, plane)
        return cls(labels, tuple(class_names))

    def __eq__(self, other):
        if not isinstance(other, ClassMap):
            return NotImplemented
        return (
            self.class_names == other.class_names
            and self.nodata_label == other.nodata_label
            and np.array_equal(self.labels, other.labels)
        )

    __hash__ = None


def _default_ids(n: int) -> tuple[str, ...]:
    return tuple(f"t{i:02d}" for i in range(n))


@dataclass(frozen=True, eq=False)
class ImageStack:
    """Ordered temporal sequence of co-registered rasters."""

    epochs: tuple[RasterGrid, ...]
    epoch_ids: tuple[str, ...] = ()

    def __post_init__(self):
        epochs = tuple(self.epochs)
        if not epochs:
            raise StackError("a stack needs at least one epoch")
        ids = tuple(str(i) for i in self.epoch_ids) or _default_ids(len(epochs))
        if len(ids) != len(epochs):
            raise StackError(f"{len(ids)} epoch ids for {len(epochs)} epochs")
        ref = epochs[0]
        for eid, grid in zip(ids, epochs):
            if grid.shape != ref.shape:
                raise StackError(
                    f"epoch {eid!r} has shape {grid.shape}, expected {ref.shape}"
                )
            if grid.nodata != ref.nodata:
                raise StackError(f"epoch {eid!r} nodata {grid.nodata} differs from {ref.nodata}")
        object.__setattr__(self, "epochs", epochs)
        object.__setattr__(self, "epoch_ids", ids)

    def __len__(self) -> int:
        return len(self.epochs)

    @property
    def width(self) -> int:
        return self.epochs[0].width

    @property
    def height(self) -> int:
        return self.epochs[0].height

    @property
    def bands(self) -> int:
        return self.epochs[0].bands

    @property
    def nodata(self) -> float:
        return self.epochs[0].nodata

    def to_nan(self) -> np.ndarray:
        """``(T, bands, height, width)`` float64 array, NaN where nodata."""
        return np.stack([g.to_nan() for g in self.epochs])

    @classmethod
    def from_nan(cls, arr, nodata=DEFAULT_NODATA, epoch_ids=()) -> "ImageStack":
        arr = np.asarray(arr, dtype=np.float64)
        if arr.ndim == 3:
            arr = arr[:, np.newaxis]
        return cls(tuple(RasterGrid.from_nan(a, nodata) for a in arr), tuple(epoch_ids))

    def permuted(self, order: Sequence[int]) -> "ImageStack":
        return ImageStack(
            tuple(self.epochs[i] for i in order), tuple(self.epoch_ids[i] for i in order)
        )


class ProbabilityStack(ImageStack):
    """Per-epoch class-probability rasters; band ``c`` of each epoch is class ``c``."""

    class_names: tuple[str, ...]

    def __init__(self, epochs, class_names=None, epoch_ids=()):
        epochs = tuple(epochs)
        if epochs and class_names is None:
            class_names = tuple(f"class{i}" for i in range(epochs[0].bands))
        object.__setattr__(self, "class_names", tuple(str(c) for c in class_names))
        super().__init__(epochs, tuple(epoch_ids))

    def __post_init__(self):
        super().__post_init__()
        n = len(self.class_names)
        if n < 2:
            raise ValidationError(f"probability stack needs >= 2 classes, got {n}")
        if self.bands != n:
            raise StackError(f"{self.bands} probability bands for {n} class names")
        for eid, grid in zip(self.epoch_ids, self.epochs):
            valid = grid.valid()
            vals = grid.data[valid]
            if vals.size and (vals.min() < 0.0 or vals.max() > 1.0):
                raise ValidationError(
                    f"epoch {eid!r} holds probabilities outside [0, 1] "
                    f"(range {vals.min()}..{vals.max()})"
                )

    @classmethod
    def from_nan(cls, arr, nodata=DEFAULT_NODATA, epoch_ids=(), class_names=None):
        arr = np.asarray(arr, dtype=np.float64)
        return cls(tuple(RasterGrid.from_nan(a, nodata) for a in arr), class_names, epoch_ids)

    def permuted(self, order):
        return ProbabilityStack(
            tuple(self.epochs[i] for i in order),
            self.class_names,
            tuple(self.epoch_ids[i] for i in order),
        )

    def __repr__(self):
        return (
            f"ProbabilityStack(T={len(self)}, classes={self.class_names}, "
            f"{self.height}x{self.width})"
        )



# --------------------------------------------------------------------------- STFR I/O


def encode_raster(grid: RasterGrid) -> bytes:
    header = HEADER.pack(
        MAGIC, FORMAT_VERSION, 0, grid.width, grid.height, grid.bands, grid.nodata
    )
    return header + grid.data.astype("<f4").tobytes(order="C")


def write_raster(grid: RasterGrid, destination: Union[PathLike, BinaryIO]) -> int:
    """Serialize ``grid`` as STFR into a path or binary sink; returns bytes written."""
    payload = encode_raster(grid)
    try:
        if hasattr(destination, "write"):
            destination.write(payload)
        else:
            with open(destination, "wb") as fh:
                fh.write(payload)
    except OSError as exc:
        raise OSError(f"cannot write raster to {destination!r}: {exc}") from exc
    return len(payload)


def decode_raster(buf: bytes) -> RasterGrid:
    if len(buf) < HEADER_SIZE:
        if len(buf) >= 4 and buf[:4] != MAGIC:
            raise FormatError(f"bad magic {buf[:4]!r}, expected {MAGIC!r}")
        raise TruncationError(f"stream holds {len(buf)} bytes, header needs {HEADER_SIZE}")
    magic, version, _reserved, width, height, bands, nodata = HEADER.unpack_from(buf)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {MAGIC!r}")
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported STFR version {version}")
    if min(width, height, bands) < 1:
        raise FormatError(f"degenerate dimensions {width}x{height}x{bands}")
    expected = width * height * bands * 4
    payload = len(buf) - HEADER_SIZE
    if payload < expected:
        raise TruncationError(
            f"declared {width}x{height}x{bands} needs {expected // 4} samples, "
            f"stream carries {payload // 4}"
        )
    if payload > expected:
        raise FormatError(f"{payload - expected} trailing bytes after raster payload")
    samples = np.frombuffer(buf, dtype="<f4", offset=HEADER_SIZE).astype(np.float64)
    return RasterGrid(samples.reshape(bands, height, width), float(nodata))


def read_raster(source: Union[PathLike, BinaryIO, bytes]) -> RasterGrid:
    """Parse a complete STFR stream from a path, binary file object or bytes."""
    if isinstance(source, (bytes, bytearray, memoryview)):
        return decode_raster(bytes(source))
    if hasattr(source, "read"):
        return decode_raster(source.read())
    with open(source, "rb") as fh:
        return decode_raster(fh.read())


def raster_bytes(grid: RasterGrid) -> bytes:
    buf = io.BytesIO()
    write_raster(grid, buf)
    return buf.getvalue()


# --------------------------------------------------------------------------- manifests


@dataclass
class StackManifest:
    """JSON description of a stack: ``{version, role, epochs: [{id, path}]}``.

    Relative epoch paths resolve against ``base_dir`` (the manifest's folder).
    ``width``/``height``/``bands`` are optional declarations checked on load.
    """

    role: str
    epochs: list[tuple[str, str]]
    version: int = MANIFEST_VERSION
    width: int | None = None
    height: int | None = None
    bands: int | None = None
    class_names: list[str] | None = None
    base_dir: Path = field(default_factory=Path)

    def __post_init__(self):
        if self.role not in ROLES:
            raise FormatError(f"manifest role {self.role!r} not one of {ROLES}")
        if self.version != MANIFEST_VERSION:
            raise FormatError(f"unsupported manifest version {self.version}")

    def resolve(self, path: str) -> Path:
        p = Path(path)
        return p if p.is_absolute() else Path(self.base_dir) / p

    def to_json(self) -> dict:
        doc = {
            "version": self.version,
            "role": self.role,
            "epochs": [{"id": eid, "path": str(p)} for eid, p in self.epochs],
        }
        for key in ("width", "height", "bands", "class_names"):
            if getattr(self, key) is not None:
                doc[key] = getattr(self, key)
        return doc

    def dump(self, path: PathLike) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_json(), fh, indent=2)
            fh.write("\n")

    @classmethod
    def from_json(cls, doc: dict, base_dir: PathLike = ".") -> "StackManifest":
        try:
            epochs = [(str(e["id"]), str(e["path"])) for e in doc["epochs"]]
            return cls(
                role=doc["role"],
                epochs=epochs,
                version=int(doc.get("version", MANIFEST_VERSION)),
                width=doc.get("width"),
                height=doc.get("height"),
                bands=doc.get("bands"),
                class_names=doc.get("class_names"),
                base_dir=Path(base_dir),
            )
        except (KeyError, TypeError) as exc:
            raise FormatError(f"malformed manifest: missing or bad field {exc}") from exc

    @classmethod
    def load(cls, path: PathLike) -> "StackManifest":
        path = Path(path)
        if not path.is_file():
            raise FileNotFoundError(f"manifest not found: {path}")
        try:
            doc = json.loads(path.read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise FormatError(f"manifest {path} is not valid JSON: {exc}") from exc
        return cls.from_json(doc, path.parent)


def validate_stack(manifest: StackManifest) -> ImageStack:
    """Load every epoch a manifest names and enforce a common geometry.

    Returns a :class:`ProbabilityStack` for the ``probability`` role, an
    :class:`ImageStack` otherwise.
    """
    if not manifest.epochs:
        raise StackError("manifest lists no epochs")
    grids, ids = [], []
    for eid, rel in manifest.epochs:
        path = manifest.resolve(rel)
        if not path.is_file():
            raise FileNotFoundError(f"epoch {eid!r}: raster not found: {path}")
        try:
            grid = read_raster(path)
        except ValidationError as exc:
            raise ValidationError(f"epoch {eid!r} ({path}): {exc}") from exc
        declared = (manifest.width, manifest.height, manifest.bands)
        actual = (grid.width, grid.height, grid.bands)
        for name, want, got in zip(("width", "height", "bands"), declared, actual):
            if want is not None and want != got:
                raise StackError(f"epoch {eid!r} has {name} {got}, manifest declares {want}")
        if grids and grid.shape != grids[0].shape:
            raise StackError(
                f"epoch {eid!r} is {grid.width}x{grid.height}x{grid.bands}, "
                f"epoch {ids[0]!r} is {grids[0].width}x{grids[0].height}x{grids[0].bands}"
            )
        grids.append(grid)
        ids.append(eid)
    if manifest.role == "probability":
        return ProbabilityStack(tuple(grids), manifest.class_names, tuple(ids))
    return ImageStack(tuple(grids), tuple(ids))


def write_stack(
    stack: ImageStack, directory: PathLike, prefix: str, role: str | None = None
) -> Path:
    """Write each epoch as ``<prefix>_<id>.stfr`` plus ``<prefix>.json``; returns the manifest path."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    if role is None:
        role = "probability" if isinstance(stack, ProbabilityStack) else "image"
    entries = []
    for eid, grid in zip(stack.epoch_ids, stack.epochs):
        name = f"{prefix}_{eid}.stfr"
        write_raster(grid, directory / name)
        entries.append((eid, name))
    manifest = StackManifest(
        role=role,
        epochs=entries,
        width=stack.width,
        height=stack.height,
        bands=stack.bands,
        class_names=list(stack.class_names) if isinstance(stack, ProbabilityStack) else None,
        base_dir=directory,
    )
    path = directory / f"{prefix}.json"
    manifest.dump(path)
    return path
