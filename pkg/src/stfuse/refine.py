"""Iterative spatiotemporal refinement of multitemporal class-probability maps.

Each class plane is smoothed with a weighted mean over a spatial window and
all epochs. The weight combines spatial distance, orthophoto similarity
between the two epochs involved and nDSM height similarity, whose bandwidth
``sigma_h`` is estimated per class from temporal height residuals.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from ._parallel import run_row_blocks
from .errors import DimensionError, ParameterError
from .raster import ClassMap, ImageStack, ProbabilityStack
from .stfilter import _sqdist, pad_nan, window_offsets

EPS = 1e-6
CACHE_BYTES = 512 * 2**20


@dataclass(frozen=True)
class RefineConfig:
    sigma_s: float = 2.0
    sigma_r: float = 20.0
    window_radius: int = 2
    convergence_threshold: float = 0.05
    max_iterations: int = 50
    sigma_h_floor: float = 0.25
    renormalize: bool = False

    def __post_init__(self):
        if not (self.sigma_s > 0 and self.sigma_r > 0):
            raise ParameterError("sigma_s and sigma_r must be > 0")
        if not 0 < self.convergence_threshold < 1:
            raise ParameterError(
                f"convergence_threshold must lie in (0, 1), got {self.convergence_threshold}"
            )
        if self.max_iterations < 1:
            raise ParameterError("max_iterations must be >= 1")
        if not self.sigma_h_floor > 0:
            raise ParameterError("sigma_h_floor must be > 0")
        if int(self.window_radius) != self.window_radius or self.window_radius < 1:
            raise ParameterError("window_radius must be an integer >= 1")


def estimate_sigma_h(ndsm_stack: ImageStack, classmap: ClassMap, c: int, floor: float) -> float:
    """Population standard deviation of ``h(p, t) - median_t h(p, .)`` over class-``c`` pixels,
    floored at ``floor``. A class with no valid samples gets the floor."""
    if (classmap.width, classmap.height) != (ndsm_stack.width, ndsm_stack.height):
        raise DimensionError("class map and height stack differ in geometry")
    h = ndsm_stack.to_nan()[:, 0]  # T, H, W
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        med = np.nanmedian(h, axis=0)
    resid = (h - med)[:, classmap.labels == c]
    resid = resid[~np.isnan(resid)]
    if resid.size == 0:
        return float(floor)
    return float(max(np.std(resid), floor))


def height_weight(h_a: float, h_b: float, sigma_h: float) -> float:
    if not sigma_h > 0:
        raise ParameterError(f"sigma_h must be > 0, got {sigma_h}")
    d = h_a - h_b
    return float(np.exp(-(d * d) / (2.0 * sigma_h * sigma_h)))


def class_sigma_h(
    ndsm: ImageStack, classmap: ClassMap, n_classes: int, floor: float
) -> list[float]:
    return [estimate_sigma_h(ndsm, classmap, c, floor) for c in range(n_classes)]


def _check_inputs(probs, images, ndsm, classmap):
    T = len(probs)
    if len(images) != T or len(ndsm) != T:
        raise DimensionError(
            f"epoch counts differ: probs {T}, images {len(images)}, ndsm {len(ndsm)}"
        )
    geo = (probs.height, probs.width)
    for name, obj in (("images", images), ("ndsm", ndsm), ("classmap", classmap)):
        if (obj.height, obj.width) != geo:
            raise DimensionError(f"{name} is {obj.width}x{obj.height}, probs are {geo[1]}x{geo[0]}")
    if ndsm.bands != 1:
        raise DimensionError(f"ndsm stack must be single-band, got {ndsm.bands}")


class _RefineOperator:
    """One Jacobi sweep as a reusable linear operator.

    Arrays are NaN-for-nodata: ``img`` (T, B, H, W), ``hgt`` (T, H, W) and
    ``p_valid`` (T, C, H, W). Contributors with nodata image, height or
    probability get zero weight. A centre with nodata image or probability
    stays nodata; a centre with nodata height drops the height term.

    Weights do not depend on the probability values, so when they fit in
    ``cache_bytes`` they are kept across sweeps. Cached and fresh weights are
    computed by the same code and accumulated in the same order, so results
    are bit-identical either way.
    """

    def __init__(self, img, hgt, p_valid, sigma_h, config: RefineConfig, cache_bytes: int = 0):
        self.T, self.C, self.H, self.W = p_valid.shape
        self.r = r = int(config.window_radius)
        self.Ip = pad_nan(img, r)
        self.Hp = pad_nan(hgt, r)
        self.Vp = np.pad(p_valid, [(0, 0), (0, 0), (r, r), (r, r)])
        self.p_valid = p_valid
        self.offsets = window_offsets(r)
        self.spatial = [-(dy * dy + dx * dx) / (2.0 * config.sigma_s**2) for dy, dx in self.offsets]
        self.k_r = 1.0 / (2.0 * config.sigma_r**2)
        self.k_h = [1.0 / (2.0 * s * s) for s in sigma_h]
        need = self.T * self.T * len(self.offsets) * self.C * self.H * self.W * 8
        self.cache = {} if need <= cache_bytes else None
        self.renormalize = config.renormalize

    def _weights(self, n: int, y0: int, y1: int):
        key = (n, y0)
        if self.cache is not None and key in self.cache:
            return self.cache[key]
        r, W, C = self.r, self.W, self.C
        rows, cols = slice(y0 + r, y1 + r), slice(r, r + W)
        ci = self.Ip[n, :, rows, cols]
        hi = self.Hp[n, rows, cols]
        hi_missing = np.isnan(hi)
        centre_bad = ~self.Vp[n, :, rows, cols].all(axis=0) | np.isnan(ci).any(axis=0)
        den = np.zeros((C, y1 - y0, W))
        terms = []
        for m in range(self.T):
            for (dy, dx), s in zip(self.offsets, self.spatial):
                nr = slice(y0 + r + dy, y1 + r + dy)
                nc = slice(r + dx, r + dx + W)
                base = s - self.k_r * _sqdist(self.Ip[m, :, nr, nc], ci)
                hj = self.Hp[m, nr, nc]
                dh = hj - hi
                dh2 = dh * dh
                dh2[hi_missing] = 0.0
                dh2[np.isnan(hj)] = np.nan
                vj = self.Vp[m, :, nr, nc]
                w = np.empty((C, y1 - y0, W))
                for c in range(C):
                    wc = np.exp(base - self.k_h[c] * dh2)
                    wc[np.isnan(wc) | ~vj[c]] = 0.0
                    den[c] += wc
                    w[c] = wc
                terms.append((m, nr, nc, w))
        out = (terms, den, centre_bad)
        if self.cache is not None:
            self.cache[key] = out
        return out

    def __call__(self, P: np.ndarray, threads: int | None = 1) -> np.ndarray:
        r = self.r
        Pp0 = np.nan_to_num(pad_nan(P, r))
        out = np.full_like(P, np.nan)

        def block(y0: int, y1: int) -> None:
            for n in range(self.T):
                terms, den, centre_bad = self._weights(n, y0, y1)
                c0 = Pp0[n, :, y0 + r : y1 + r, r : r + self.W]
                num = np.zeros_like(den)
                for m, nr, nc, w in terms:
                    num += w * (Pp0[m, :, nr, nc] - c0)
                # centred weighted mean keeps uniform fields exact fixed points
                with np.errstate(invalid="ignore", divide="ignore"):
                    res = c0 + num / den
                res[den == 0] = np.nan
                res[:, centre_bad] = np.nan
                out[n, :, y0:y1] = res

        run_row_blocks(block, self.H, threads)
        # guard against last-ulp excursions of the weighted mean
        np.clip(out, 0.0, 1.0, out=out)
        if self.renormalize:
            with np.errstate(invalid="ignore", divide="ignore"):
                out = out / out.sum(axis=1, keepdims=True)
        return out


def refine_step(
    probs: ProbabilityStack,
    images: ImageStack,
    ndsm: ImageStack,
    classmap: ClassMap,
    config: RefineConfig = RefineConfig(),
    threads: int | None = 1,
    sigma_h: list[float] | None = None,
) -> ProbabilityStack:
    """One refinement iteration; every class updates from the same previous state."""
    _check_inputs(probs, images, ndsm, classmap)
    C = len(probs.class_names)
    if sigma_h is None:
        sigma_h = class_sigma_h(ndsm, classmap, C, config.sigma_h_floor)
    P = probs.to_nan()
    op = _RefineOperator(images.to_nan(), ndsm.to_nan()[:, 0], ~np.isnan(P), sigma_h, config)
    out = op(P, threads)
    return ProbabilityStack.from_nan(out, probs.nodata, probs.epoch_ids, probs.class_names)


def max_relative_change(new: np.ndarray, old: np.ndarray, eps: float = EPS) -> float:
    """Largest ``|new - old| / max(new, eps)`` over samples valid in both arrays."""
    ok = ~(np.isnan(new) | np.isnan(old))
    if not ok.any():
        return 0.0
    rel = np.abs(new[ok] - old[ok]) / np.maximum(new[ok], eps)
    return float(rel.max())


@dataclass
class RefineResult:
    probs: ProbabilityStack
    iterations: int
    converged: bool
    sigma_h: list[float]
    history: list[float]

    def __iter__(self):
        # unpacks as (probs, iterations, converged)
        return iter((self.probs, self.iterations, self.converged))


def refine_until_converged(
    probs: ProbabilityStack,
    images: ImageStack,
    ndsm: ImageStack,
    classmap: ClassMap,
    config: RefineConfig = RefineConfig(),
    threads: int | None = 1,
    cache_bytes: int = CACHE_BYTES,
) -> RefineResult:
    """Repeat :func:`refine_step` until every valid sample's relative change is
    within ``config.convergence_threshold`` or ``max_iterations`` is reached.

    Weights are cached across iterations when they fit in ``cache_bytes``.
    """
    _check_inputs(probs, images, ndsm, classmap)
    C = len(probs.class_names)
    sigma_h = class_sigma_h(ndsm, classmap, C, config.sigma_h_floor)
    img = images.to_nan()
    hgt = ndsm.to_nan()[:, 0]
    cur = probs.to_nan()
    op = None
    history = []
    converged = False
    k = 0
    while k < config.max_iterations:
        valid = ~np.isnan(cur)
        if op is None or not np.array_equal(valid, op.p_valid):
            op = _RefineOperator(img, hgt, valid, sigma_h, config, cache_bytes)
        nxt = op(cur, threads)
        k += 1
        change = max_relative_change(nxt, cur)
        history.append(change)
        cur = nxt
        if change <= config.convergence_threshold:
            converged = True
            break
    out = ProbabilityStack.from_nan(cur, probs.nodata, probs.epoch_ids, probs.class_names)
    return RefineResult(out, k, converged, sigma_h, history)


def argmax_classify(probs: ProbabilityStack) -> list[ClassMap]:
    """Per-epoch maximum-probability class maps; ties go to the lowest class index."""
    maps = []
    for grid in probs.epochs:
        arr = grid.to_nan()
        missing = np.isnan(arr).all(axis=0)
        labels = np.argmax(np.nan_to_num(arr, nan=-np.inf), axis=0).astype(np.int32)
        labels[missing] = -1
        maps.append(ClassMap(labels, probs.class_names))
    return maps
