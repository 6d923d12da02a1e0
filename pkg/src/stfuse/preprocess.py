"""Baselines and derived inputs: histogram matching, temporal median, NDVI,
nDSM, the NDVI/nDSM rule classifier and a distance-based probability seeder."""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import DimensionError, EmptyDistributionError, ParameterError
from .raster import ClassMap, ImageStack, ProbabilityStack, RasterGrid

# Vocabulary emitted by the rule classifier (index = label).
RULE_CLASSES = ("ground_road", "grass", "tree", "building")
GROUND, GRASS, TREE, BUILDING = range(4)


@dataclass(frozen=True)
class RuleThresholds:
    ndvi_veg: float = 0.3
    ndsm_high: float = 2.0

    def __post_init__(self):
        if not -1.0 < self.ndvi_veg < 1.0:
            raise ParameterError(f"ndvi_veg must lie in (-1, 1), got {self.ndvi_veg}")
        if not self.ndsm_high > 0.0:
            raise ParameterError(f"ndsm_high must be > 0, got {self.ndsm_high}")


def _single_band(grid: RasterGrid, name: str) -> np.ndarray:
    if grid.bands != 1:
        raise DimensionError(f"{name} must be a single band, got {grid.bands} bands")
    return grid.to_nan()[0]


def _check_geometry(*grids: RasterGrid) -> None:
    ref = grids[0]
    for g in grids[1:]:
        if not g.same_geometry(ref):
            raise DimensionError(
                f"geometry mismatch: {g.width}x{g.height} vs {ref.width}x{ref.height}"
            )


def histogram_match(source: RasterGrid, reference: RasterGrid) -> RasterGrid:
    """Map ``source`` onto the value distribution of ``reference``.

    Each valid source sample ``v`` sits at empirical CDF position
    ``F(v) = #{s <= v} / n`` and is replaced by the lower reference quantile
    at that position, i.e. the ``ceil(F * m)``-th smallest of the ``m``
    reference samples. Multi-band inputs are matched band by band.
    """
    if source.bands != reference.bands:
        raise DimensionError(f"band count mismatch: {source.bands} vs {reference.bands}")
    src = source.to_nan()
    ref = reference.to_nan()
    out = np.full_like(src, np.nan)
    for b in range(source.bands):
        s_ok = ~np.isnan(src[b])
        r_vals = np.sort(ref[b][~np.isnan(ref[b])])
        s_vals = src[b][s_ok]
        if s_vals.size == 0 or r_vals.size == 0:
            which = "source" if s_vals.size == 0 else "reference"
            raise EmptyDistributionError(f"band {b}: {which} has no valid samples")
        s_sorted = np.sort(s_vals)
        counts = np.searchsorted(s_sorted, s_vals, side="right")
        # ceil(count * m / n) - 1 in exact integer arithmetic
        m, n = r_vals.size, s_sorted.size
        idx = -((-counts * m) // n) - 1
        out[b][s_ok] = r_vals[idx]
    return RasterGrid.from_nan(out, source.nodata)


def temporal_median(stack: ImageStack) -> RasterGrid:
    """Per-pixel, per-band median of the valid samples across epochs."""
    arr = stack.to_nan()
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        med = np.nanmedian(arr, axis=0)
    return RasterGrid.from_nan(med, stack.nodata)


def compute_ndvi(red: RasterGrid, nir: RasterGrid) -> RasterGrid:
    _check_geometry(red, nir)
    r = _single_band(red, "red")
    n = _single_band(nir, "nir")
    den = n + r
    with np.errstate(divide="ignore", invalid="ignore"):
        ndvi = np.where(den != 0, (n - r) / den, np.nan)
    return RasterGrid.from_nan(ndvi, red.nodata)


def compute_ndsm(dsm: RasterGrid, dtm: RasterGrid) -> RasterGrid:
    """Above-ground height ``max(dsm - dtm, 0)``; nodata propagates."""
    if dsm.shape != dtm.shape:
        raise DimensionError(f"dsm {dsm.shape} and dtm {dtm.shape} differ in geometry")
    diff = dsm.to_nan() - dtm.to_nan()
    return RasterGrid.from_nan(np.where(np.isnan(diff), np.nan, np.maximum(diff, 0.0)), dsm.nodata)


def ndsm_stack(dsm_stack: ImageStack, dtm: RasterGrid) -> ImageStack:
    return ImageStack(tuple(compute_ndsm(g, dtm) for g in dsm_stack.epochs), dsm_stack.epoch_ids)


def rule_classify(
    ndvi: RasterGrid, ndsm: RasterGrid, thresholds: RuleThresholds = RuleThresholds()
) -> ClassMap:
    """Four-class map from vegetation (NDVI) and elevation (nDSM) tests."""
    _check_geometry(ndvi, ndsm)
    v = _single_band(ndvi, "ndvi")
    h = _single_band(ndsm, "ndsm")
    veg = v > thresholds.ndvi_veg
    high = h > thresholds.ndsm_high
    labels = np.select(
        [veg & high, veg & ~high, ~veg & high],
        [TREE, GRASS, BUILDING],
        default=GROUND,
    ).astype(np.int32)
    labels[np.isnan(v) | np.isnan(h)] = -1
    return ClassMap(labels, RULE_CLASSES)


def seed_probability_maps(
    stack: ImageStack,
    class_means: Sequence[Sequence[float]],
    softness: float,
    class_names: Sequence[str] | None = None,
) -> ProbabilityStack:
    """Soft nearest-mean class probabilities, ``p_c ~ exp(-|x - mean_c|^2 / softness)``.

    A pixel with any nodata band gets nodata in every class plane.
    """
    if not softness > 0:
        raise ParameterError(f"softness must be > 0, got {softness}")
    means = np.asarray(class_means, dtype=np.float64)
    if means.ndim == 1:
        means = means[:, np.newaxis]
    if means.shape[0] < 2:
        raise ParameterError("need at least two classes")
    if means.shape[1] != stack.bands:
        raise DimensionError(f"class means have {means.shape[1]} bands, stack has {stack.bands}")
    arr = stack.to_nan()  # T, B, H, W
    d2 = ((arr[:, np.newaxis] - means[np.newaxis, :, :, None, None]) ** 2).sum(axis=2)
    logits = -d2 / softness
    logits -= logits.max(axis=1, keepdims=True)
    p = np.exp(logits)
    p /= p.sum(axis=1, keepdims=True)
    return ProbabilityStack.from_nan(
        p, stack.nodata, stack.epoch_ids,
        class_names or tuple(f"class{i}" for i in range(means.shape[0])),
    )
