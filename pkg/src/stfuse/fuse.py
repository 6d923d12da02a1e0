"""Adaptive, semantic-guided fusion of a DSM stack into a single DSM.

The fused height at ``p`` is a normalized weighted sum over window pixels
``q`` and epochs ``t`` of the per-pixel temporal median ``h_med(q)``::

    W_s(p, q) * W_r(p, q) * W_h(q, t)

``W_s``/``W_r`` are the spatial and spectral kernels evaluated on the
reference orthophoto; ``W_h(q, t) = exp(-(h_med(q) - h(q, t))^2 / 2 sigma_h^2)``
rewards temporal agreement, with ``sigma_h`` chosen by the class of ``q``.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from ._parallel import run_row_blocks
from .errors import DimensionError, LabelingError, ParameterError
from .metrics import completeness, rmse
from .preprocess import temporal_median
from .raster import ClassMap, ImageStack, RasterGrid
from .refine import estimate_sigma_h
from .stfilter import _sqdist, pad_nan, window_offsets

MODES = ("median", "epoch")


@dataclass(frozen=True)
class FuseConfig:
    """``mode="median"`` sums the temporal median of each neighbour (default);
    ``mode="epoch"`` sums each epoch's own height instead."""

    sigma_s: float = 2.0
    sigma_r: float = 25.0
    window_radius: int = 2
    sigma_h_floor: float = 0.25
    sigma_h: Mapping[str, float] = field(default_factory=dict)
    mode: str = "median"

    def __post_init__(self):
        if not (self.sigma_s > 0 and self.sigma_r > 0 and self.sigma_h_floor > 0):
            raise ParameterError("bandwidths must be > 0")
        if int(self.window_radius) != self.window_radius or self.window_radius < 1:
            raise ParameterError("window_radius must be an integer >= 1")
        for name, value in self.sigma_h.items():
            if not value > 0:
                raise ParameterError(f"sigma_h override for {name!r} must be > 0")
        if self.mode not in MODES:
            raise ParameterError(f"mode must be one of {MODES}, got {self.mode!r}")


def resolve_sigma_h(dsm_stack: ImageStack, classmap: ClassMap, config: FuseConfig) -> dict[str, float]:
    """Per-class height bandwidth: explicit override if given, else estimated."""
    unknown = set(config.sigma_h) - set(classmap.class_names)
    if unknown:
        raise LabelingError(f"sigma_h overrides name unknown classes {sorted(unknown)}")
    out = {}
    for c, name in enumerate(classmap.class_names):
        if name in config.sigma_h:
            out[name] = float(config.sigma_h[name])
        else:
            out[name] = estimate_sigma_h(dsm_stack, classmap, c, config.sigma_h_floor)
    return out


def _check(dsm_stack: ImageStack, ortho: RasterGrid, classmap: ClassMap) -> None:
    if dsm_stack.bands != 1:
        raise DimensionError(f"DSM stack must be single-band, got {dsm_stack.bands}")
    geo = (dsm_stack.width, dsm_stack.height)
    if (ortho.width, ortho.height) != geo:
        raise DimensionError(f"orthophoto is {ortho.width}x{ortho.height}, DSMs are {geo[0]}x{geo[1]}")
    if (classmap.width, classmap.height) != geo:
        raise DimensionError(
            f"class map is {classmap.width}x{classmap.height}, DSMs are {geo[0]}x{geo[1]}"
        )


def fuse_dsm(
    dsm_stack: ImageStack,
    ortho: RasterGrid,
    classmap: ClassMap,
    config: FuseConfig = FuseConfig(),
    threads: int | None = 1,
) -> RasterGrid:
    """Fuse ``dsm_stack`` into one DSM guided by ``ortho`` and ``classmap``.

    Window pixels without a valid median, orthophoto value or class label
    carry zero weight; output is nodata where nothing survives or the
    orthophoto is nodata at the output pixel.
    """
    _check(dsm_stack, ortho, classmap)
    sig = resolve_sigma_h(dsm_stack, classmap, config)
    h = dsm_stack.to_nan()[:, 0]  # T, H, W
    T, H, W = h.shape
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        med = np.nanmedian(h, axis=0)

    # per-pixel 1 / (2 sigma_h^2) from the label at that pixel
    k_lut = np.array([1.0 / (2.0 * sig[n] ** 2) for n in classmap.class_names])
    labels = classmap.labels
    k_h = np.full((H, W), np.nan)
    ok = classmap.valid()
    k_h[ok] = k_lut[labels[ok]]

    # temporal agreement, summed over epochs in order
    agree = np.zeros((H, W))
    weighted = np.zeros((H, W))
    for t in range(T):
        d = med - h[t]
        wt = np.exp(-k_h * (d * d))
        wt[np.isnan(wt)] = 0.0
        agree += wt
        if config.mode == "epoch":
            weighted += wt * np.nan_to_num(h[t])
    agree[np.isnan(med) | np.isnan(k_h)] = 0.0
    # per-neighbour summand value; the weight of neighbour q is W_s * W_r * agree(q)
    if config.mode == "median":
        value = np.nan_to_num(med)
    else:
        with np.errstate(invalid="ignore", divide="ignore"):
            value = np.where(agree > 0, weighted / agree, 0.0)

    r = int(config.window_radius)
    O = pad_nan(ortho.to_nan(), r)
    A = np.pad(agree, r)
    V = np.pad(value, r)
    offsets = window_offsets(r)
    spatial = [-(dy * dy + dx * dx) / (2.0 * config.sigma_s**2) for dy, dx in offsets]
    k_r = 1.0 / (2.0 * config.sigma_r**2)
    out = np.full((H, W), np.nan)

    def block(y0: int, y1: int) -> None:
        centre = O[:, y0 + r : y1 + r, r : r + W]
        # centred on the pixel's own value so constant surfaces stay exact
        anchor = V[y0 + r : y1 + r, r : r + W]
        num = np.zeros((y1 - y0, W))
        den = np.zeros((y1 - y0, W))
        for (dy, dx), s in zip(offsets, spatial):
            nr = slice(y0 + r + dy, y1 + r + dy)
            nc = slice(r + dx, r + dx + W)
            w = np.exp(s - k_r * _sqdist(O[:, nr, nc], centre))
            w[np.isnan(w)] = 0.0
            wa = w * A[nr, nc]
            num += wa * (V[nr, nc] - anchor)
            den += wa
        with np.errstate(invalid="ignore", divide="ignore"):
            res = anchor + num / den
        res[den == 0] = np.nan
        out[y0:y1] = res

    run_row_blocks(block, H, threads)
    return RasterGrid.from_nan(out[np.newaxis], dsm_stack.nodata)


def fuse_report(
    dsm_stack: ImageStack,
    fused: RasterGrid,
    truth: RasterGrid | None = None,
    sigma_h: Mapping[str, float] | None = None,
) -> dict:
    """Summary record: completeness, sigma_h used and, given truth, RMSE of
    the fused DSM, the temporal median and each single epoch."""
    if not fused.same_geometry(dsm_stack.epochs[0]):
        raise DimensionError("fused DSM and stack differ in geometry")
    report = {
        "completeness": completeness(fused),
        "sigma_h": dict(sigma_h or {}),
        "epochs": len(dsm_stack),
    }
    if truth is not None:
        median = temporal_median(dsm_stack)
        report["rmse_fused"] = rmse(fused, truth)
        report["rmse_median"] = rmse(median, truth)
        report["completeness_median"] = completeness(median)
        report["rmse_epochs"] = [rmse(g, truth) for g in dsm_stack.epochs]
    return report
