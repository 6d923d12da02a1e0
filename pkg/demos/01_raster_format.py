"""
Reading and writing STFR rasters
================================

A raster is a ``RasterGrid``: float64 samples shaped (bands, rows, cols)
plus a nodata sentinel. On disk it is a 24-byte header followed by
little-endian float32 samples, band after band.
"""

import struct
import tempfile
from pathlib import Path

import numpy as np

from stfuse import raster

# a 2-band 3x4 grid with one missing sample
data = np.arange(24, dtype=float).reshape(2, 3, 4)
data[1, 2, 3] = np.nan
grid = raster.RasterGrid.from_nan(data, nodata=-9999.0)
print(grid.shape, "valid samples:", int(grid.valid().sum()))

# the header is plain struct-packed fields
buf = raster.raster_bytes(grid)
print(struct.unpack("<4sHHIIIf", buf[:24]), len(buf), "bytes")

# round trip through a file
with tempfile.TemporaryDirectory() as tmp:
    path = Path(tmp) / "demo.stfr"
    raster.write_raster(grid, path)
    assert raster.read_raster(path) == grid

    # stacks of epochs travel as one file per epoch plus a JSON manifest
    stack = raster.ImageStack.from_nan(np.random.default_rng(0).uniform(0, 9, (3, 1, 4, 4)))
    manifest = raster.write_stack(stack, tmp, "demo")
    print(manifest.read_text())
    again = raster.validate_stack(raster.StackManifest.load(manifest))
    print(len(again), "epochs, ids", again.epoch_ids)
