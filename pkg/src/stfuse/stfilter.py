"""Reference-free radiometric normalization of an image stack with a 3-D
(spatial, spectral, temporal) bilateral filter.

For output epoch ``t`` and pixel ``i`` every neighbour ``j`` in the square
window, in every epoch ``u``, contributes ``I_j(u)`` with weight::

    w = exp(-|j - i|^2 / 2 sigma_s^2)                      spatial
      * exp(-|I_j(t) - I_i(t)|^2 / 2 sigma_i^2)            spectral, in the epoch being filtered
      * exp(-(|I_j(u) - I_j(t)|^2 / B) / 2 sigma_t^2)      temporal, band-averaged

Distances are taken over all ``B`` bands jointly and the shared weight is
applied to every band. The result is normalized by the weight sum. With a
single epoch this is the classic bilateral filter.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ._parallel import run_row_blocks
from .errors import ParameterError, StackError
from .raster import ImageStack


@dataclass(frozen=True)
class BandwidthConfig:
    sigma_s: float = 3.0
    sigma_i: float = 20.0
    sigma_t: float = 20.0
    window_radius: int = 3

    def __post_init__(self):
        for name in ("sigma_s", "sigma_i", "sigma_t"):
            if not getattr(self, name) > 0:
                raise ParameterError(f"{name} must be > 0, got {getattr(self, name)}")
        if int(self.window_radius) != self.window_radius or self.window_radius < 1:
            raise ParameterError(f"window_radius must be an integer >= 1, got {self.window_radius}")


def _vec(v) -> np.ndarray:
    return np.atleast_1d(np.asarray(v, dtype=np.float64))


def spatial_weight(dx: float, dy: float, sigma_s: float) -> float:
    if not sigma_s > 0:
        raise ParameterError(f"sigma_s must be > 0, got {sigma_s}")
    return float(np.exp(-(dx * dx + dy * dy) / (2.0 * sigma_s * sigma_s)))


def spectral_weight(v1, v2, sigma_i: float) -> float:
    a, b = _vec(v1), _vec(v2)
    if a.shape != b.shape:
        raise ParameterError(f"spectral vectors differ in length: {a.size} vs {b.size}")
    if not sigma_i > 0:
        raise ParameterError(f"sigma_i must be > 0, got {sigma_i}")
    return float(np.exp(-np.sum((a - b) ** 2) / (2.0 * sigma_i * sigma_i)))


def temporal_weight(v_t, v_u, sigma_t: float) -> float:
    """Gaussian of the band-averaged squared distance between two epochs' spectra."""
    a, b = _vec(v_t), _vec(v_u)
    if a.shape != b.shape:
        raise ParameterError(f"temporal vectors differ in length: {a.size} vs {b.size}")
    if not sigma_t > 0:
        raise ParameterError(f"sigma_t must be > 0, got {sigma_t}")
    return float(np.exp(-(np.sum((a - b) ** 2) / a.size) / (2.0 * sigma_t * sigma_t)))


def _sqdist(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Sum over the leading (band) axis of squared differences, fixed order."""
    d = a[0] - b[0]
    acc = d * d
    for k in range(1, a.shape[0]):
        d = a[k] - b[k]
        acc += d * d
    return acc


def window_offsets(radius: int) -> list[tuple[int, int]]:
    """Row-major ``(dy, dx)`` offsets of the square window."""
    return [(dy, dx) for dy in range(-radius, radius + 1) for dx in range(-radius, radius + 1)]


def pad_nan(arr: np.ndarray, r: int) -> np.ndarray:
    """Pad the last two axes by ``r`` with NaN."""
    pad = [(0, 0)] * (arr.ndim - 2) + [(r, r), (r, r)]
    return np.pad(arr, pad, constant_values=np.nan)


def st_bilateral_filter(
    stack: ImageStack, config: BandwidthConfig = BandwidthConfig(), threads: int | None = 1
) -> ImageStack:
    """Filter every epoch of ``stack`` using all epochs; returns a stack of equal geometry.

    Nodata contributors carry zero weight; an output sample is nodata when its
    centre pixel is nodata in the epoch being filtered or no contributor
    survives. Summation runs epoch-major, then window offsets row-major.
    """
    if stack is None or len(stack) == 0:
        raise StackError("empty stack")
    arr = stack.to_nan()
    T, B, H, W = arr.shape
    r = int(config.window_radius)
    P = pad_nan(arr, r)
    P0 = np.nan_to_num(P)
    out = np.full_like(arr, np.nan)
    offsets = window_offsets(r)
    spatial = [-(dy * dy + dx * dx) / (2.0 * config.sigma_s**2) for dy, dx in offsets]
    k_i = 1.0 / (2.0 * config.sigma_i**2)
    k_t = 1.0 / (B * 2.0 * config.sigma_t**2)

    def block(y0: int, y1: int) -> None:
        rows = slice(y0 + r, y1 + r)
        cols = slice(r, r + W)
        for t in range(T):
            centre = P[t, :, rows, cols]
            c0 = P0[t, :, rows, cols]
            num = np.zeros((B, y1 - y0, W))
            den = np.zeros((y1 - y0, W))
            for u in range(T):
                for (dy, dx), s in zip(offsets, spatial):
                    nrows = slice(y0 + r + dy, y1 + r + dy)
                    ncols = slice(r + dx, r + dx + W)
                    jt = P[t, :, nrows, ncols]
                    ju = P[u, :, nrows, ncols]
                    ju0 = P0[u, :, nrows, ncols]
                    expo = s - k_i * _sqdist(jt, centre)
                    if u != t:
                        expo -= k_t * _sqdist(ju, jt)
                    w = np.exp(expo)
                    w[np.isnan(w)] = 0.0
                    den += w
                    for b in range(B):
                        num[b] += w * (ju0[b] - c0[b])
            # centred form: constant neighbourhoods reproduce the centre exactly
            with np.errstate(invalid="ignore", divide="ignore"):
                res = c0 + num / den
            res[:, den == 0] = np.nan
            out[t, :, y0:y1] = res

    run_row_blocks(block, H, threads)
    return ImageStack.from_nan(out, stack.nodata, stack.epoch_ids)
