"""Evaluation metrics and JSON metric records."""

from __future__ import annotations

from itertools import combinations
from typing import Any

import numpy as np

from .errors import DimensionError, EmptyEvaluationError, ValidationError
from .raster import ClassMap, ImageStack, RasterGrid


def overall_accuracy(pred: ClassMap, truth: ClassMap) -> float:
    """Fraction of pixels labelled correctly, ignoring nodata in either map."""
    if pred.labels.shape != truth.labels.shape:
        raise DimensionError(f"class maps differ in shape: {pred.labels.shape} vs {truth.labels.shape}")
    if pred.class_names != truth.class_names:
        raise ValidationError(f"vocabularies differ: {pred.class_names} vs {truth.class_names}")
    ok = pred.valid() & truth.valid()
    n = int(ok.sum())
    if n == 0:
        raise EmptyEvaluationError("no pixel is valid in both class maps")
    return float((pred.labels[ok] == truth.labels[ok]).sum() / n)


def _mask2d(mask, height, width) -> np.ndarray:
    if mask is None:
        return np.ones((height, width), dtype=bool)
    m = np.asarray(mask)
    if isinstance(mask, RasterGrid):
        m = mask.data[0] != 0
    m = m.astype(bool)
    if m.shape != (height, width):
        raise DimensionError(f"mask shape {m.shape} does not match {height}x{width}")
    return m


def rmse(pred: RasterGrid, truth: RasterGrid, mask=None) -> float:
    """Root mean squared difference over samples valid in both and inside ``mask``."""
    if pred.shape != truth.shape:
        raise DimensionError(f"rasters differ in shape: {pred.shape} vs {truth.shape}")
    m = _mask2d(mask, pred.height, pred.width)
    ok = pred.valid() & truth.valid() & m[np.newaxis]
    n = int(ok.sum())
    if n == 0:
        raise EmptyEvaluationError("no valid samples to compare")
    d = pred.data[ok] - truth.data[ok]
    return float(np.sqrt(np.mean(d * d)))


def temporal_consistency(stack: ImageStack, mask=None) -> float:
    """Mean over unordered epoch pairs of the band-mean per-band RMSE inside ``mask``."""
    if len(stack) < 2:
        raise ValidationError("temporal consistency needs at least two epochs")
    m = _mask2d(mask, stack.height, stack.width)
    if not m.any():
        raise EmptyEvaluationError("mask selects no pixels")
    arr = stack.to_nan()
    pair_values = []
    for a, b in combinations(range(len(stack)), 2):
        band_rmse = []
        for k in range(stack.bands):
            d = (arr[a, k] - arr[b, k])[m]
            d = d[~np.isnan(d)]
            if d.size:
                band_rmse.append(np.sqrt(np.mean(d * d)))
        if band_rmse:
            pair_values.append(np.mean(band_rmse))
    if not pair_values:
        raise EmptyEvaluationError("no epoch pair shares a valid masked sample")
    return float(np.mean(pair_values))


def completeness(grid: RasterGrid) -> float:
    return float(grid.valid().sum() / grid.data.size)


def metric_record(name: str, value: float, pixels: int, config: dict[str, Any] | None = None) -> dict:
    return {"metric": name, "value": value, "pixels": int(pixels), "config": dict(config or {})}
