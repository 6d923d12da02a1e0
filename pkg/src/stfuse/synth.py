"""Deterministic synthetic multitemporal scenes with full ground truth.

Randomness comes from :class:`SplitMix64`, a 64-bit Weyl-sequence generator
with xorshift-multiply output mixing::

    state += 0x9E3779B97F4A7C15
    z = state
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9
    z = (z ^ (z >> 27)) * 0x94D049BB133111EB
    return z ^ (z >> 31)

(all arithmetic modulo 2**64). Uniform floats are ``(z >> 11) * 2**-53``;
normals use the cosine branch of Box-Muller on two consecutive uniforms.
Every draw below happens in a fixed order, so a seed pins the whole bundle.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .errors import ParameterError
from .preprocess import BUILDING, GRASS, GROUND, RULE_CLASSES, TREE, ndsm_stack, seed_probability_maps
from .raster import (
    ClassMap,
    ImageStack,
    ProbabilityStack,
    RasterGrid,
    write_raster,
    write_stack,
)

_GAMMA = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)
_MASK = (1 << 64) - 1


class SplitMix64:
    """Vectorised SplitMix64 stream; ``next_u64(n)`` equals ``n`` scalar steps."""

    def __init__(self, seed: int):
        self.state = int(seed) & _MASK

    def next_u64(self, n: int) -> np.ndarray:
        steps = np.arange(1, n + 1, dtype=np.uint64)
        with np.errstate(over="ignore"):
            z = np.uint64(self.state) + steps * _GAMMA
            z = (z ^ (z >> np.uint64(30))) * _M1
            z = (z ^ (z >> np.uint64(27))) * _M2
            z = z ^ (z >> np.uint64(31))
        self.state = (self.state + n * 0x9E3779B97F4A7C15) & _MASK
        return z

    def uniform(self, n: int, low: float = 0.0, high: float = 1.0) -> np.ndarray:
        u = (self.next_u64(n) >> np.uint64(11)).astype(np.float64) * 2.0**-53
        return low + (high - low) * u

    def normal(self, n: int, scale: float = 1.0) -> np.ndarray:
        u = self.uniform(2 * n)
        u1, u2 = 1.0 - u[0::2], u[1::2]
        return scale * np.sqrt(-2.0 * np.log(u1)) * np.cos(2.0 * np.pi * u2)

    def integers(self, n: int, low: int, high: int) -> np.ndarray:
        """Integers in ``[low, high)``."""
        return (low + np.floor(self.uniform(n) * (high - low))).astype(np.int64)

    def permutation(self, n: int) -> np.ndarray:
        return np.argsort(self.uniform(n), kind="stable")

    def scalar(self, low: float = 0.0, high: float = 1.0) -> float:
        return float(self.uniform(1, low, high)[0])


# Per-class reflectance signatures (blue, green, red, nir) on a 0-255 scale.
SIGNATURES = np.array(
    [
        [90.0, 95.0, 100.0, 110.0],  # ground_road
        [50.0, 80.0, 60.0, 180.0],  # grass
        [35.0, 55.0, 40.0, 140.0],  # tree
        [140.0, 135.0, 130.0, 125.0],  # building
    ]
)
RED_BAND, NIR_BAND = 2, 3


def class_signatures(bands: int) -> np.ndarray:
    """(classes, bands) mean reflectance; bands beyond four reuse the table, shifted."""
    cols = [SIGNATURES[:, k % 4] + 5.0 * (k // 4) for k in range(bands)]
    return np.stack(cols, axis=1)


@dataclass(frozen=True)
class SceneSpec:
    width: int = 128
    height: int = 128
    epochs: int = 5
    bands: int = 4
    seed: int = 1
    building_density: float = 0.15
    building_height: tuple[float, float] = (4.0, 20.0)
    grass_fraction: float = 0.25
    tree_fraction: float = 0.10
    tree_height: tuple[float, float] = (4.0, 12.0)
    texture: float = 3.0
    cloud_fraction: float = 0.0
    gain: tuple[float, float] = (1.0, 1.0)
    bias: tuple[float, float] = (0.0, 0.0)
    image_noise: float = 3.0
    cloud_value: float = 250.0
    dsm_noise: float = 0.5
    dsm_outlier_fraction: float = 0.0
    dsm_outlier_magnitude: float = 20.0
    dsm_hole_fraction: float = 0.0
    prob_noise: float = 0.0
    softness: float = 800.0

    def __post_init__(self):
        if self.width < 1 or self.height < 1:
            raise ParameterError(f"scene must have positive area, got {self.width}x{self.height}")
        if self.epochs < 1 or self.bands < 1:
            raise ParameterError("epochs and bands must be >= 1")
        for name in (
            "building_density", "grass_fraction", "tree_fraction", "cloud_fraction",
            "dsm_outlier_fraction", "dsm_hole_fraction", "prob_noise",
        ):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ParameterError(f"{name} must lie in [0, 1], got {v}")
        if self.dsm_outlier_fraction + self.dsm_hole_fraction > 1.0:
            raise ParameterError("outlier and hole fractions together exceed 1")
        for name in ("building_height", "tree_height", "gain", "bias"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise ParameterError(f"{name} range is inverted: {lo} > {hi}")
        if self.building_height[0] <= 0 or self.tree_height[0] <= 0:
            raise ParameterError("object heights must be positive")
        if min(self.texture, self.image_noise, self.dsm_noise) < 0:
            raise ParameterError("noise levels must be >= 0")
        if not self.softness > 0:
            raise ParameterError("softness must be > 0")

    @classmethod
    def from_mapping(cls, values: dict) -> "SceneSpec":
        """Build from string or typed values keyed by field name; unknown keys are an error."""
        defaults = asdict(cls())
        kwargs = {}
        for key, raw in values.items():
            key = key.replace("-", "_")
            if key not in defaults:
                raise ParameterError(f"unknown scene parameter {key!r}")
            default = defaults[key]
            if isinstance(default, (tuple, list)):
                parts = raw.split(",") if isinstance(raw, str) else list(raw)
                if len(parts) != 2:
                    raise ParameterError(f"{key} needs two values 'low, high'")
                kwargs[key] = (float(parts[0]), float(parts[1]))
            elif isinstance(default, int):
                kwargs[key] = int(raw)
            else:
                kwargs[key] = float(raw)
        return cls(**kwargs)


def rrn_scenario(seed: int = 7) -> SceneSpec:
    """256x256x4, five epochs, gain 0.8-1.2, bias +-10, 5 % cloud disks."""
    return SceneSpec(
        width=256, height=256, epochs=5, bands=4, seed=seed,
        gain=(0.8, 1.2), bias=(-10.0, 10.0), cloud_fraction=0.05,
    )


def probability_scenario(seed: int = 11) -> SceneSpec:
    return SceneSpec(
        width=128, height=128, epochs=5, bands=4, seed=seed,
        gain=(0.9, 1.1), bias=(-5.0, 5.0), prob_noise=0.25,
    )


def dsm_scenario(seed: int = 13) -> SceneSpec:
    return SceneSpec(
        width=128, height=128, epochs=5, bands=4, seed=seed,
        dsm_outlier_fraction=0.05, dsm_outlier_magnitude=20.0, dsm_hole_fraction=0.02,
    )


SCENARIOS = {"rrn": rrn_scenario, "probability": probability_scenario, "dsm": dsm_scenario}


@dataclass
class SceneBundle:
    spec: SceneSpec
    truth_classmap: ClassMap
    truth_dsm: RasterGrid
    truth_dtm: RasterGrid
    truth_reflectance: RasterGrid
    images: ImageStack
    dsms: ImageStack
    probs: ProbabilityStack
    invariant_mask: np.ndarray
    log: dict

    @property
    def ortho(self) -> RasterGrid:
        """Reference orthophoto: the first observed epoch."""
        return self.images.epochs[0]

    def ndsms(self) -> ImageStack:
        return ndsm_stack(self.dsms, self.truth_dtm)


def _disk(h: int, w: int, cy: float, cx: float, radius: float) -> np.ndarray:
    yy, xx = np.mgrid[0:h, 0:w]
    return (yy - cy) ** 2 + (xx - cx) ** 2 <= radius * radius


def _layout(spec: SceneSpec, rng: SplitMix64):
    H, W = spec.height, spec.width
    labels = np.full((H, W), GROUND, dtype=np.int32)
    ndsm = np.zeros((H, W))
    road = np.zeros((H, W), dtype=bool)

    n_roads = max(1, min(H, W) // 64)
    for _ in range(n_roads):
        width = int(rng.integers(1, 3, 7)[0])
        y = int(rng.integers(1, 0, max(1, H - width))[0])
        x = int(rng.integers(1, 0, max(1, W - width))[0])
        road[y : y + width, :] = True
        road[:, x : x + width] = True

    def fill_rects(target, lo, hi, allowed, paint):
        area, attempts = 0, 0
        goal = target * H * W
        while area < goal and attempts < 2000:
            attempts += 1
            rh, rw = (int(v) for v in rng.integers(2, lo, hi + 1))
            y0 = int(rng.integers(1, 0, max(1, H - rh + 1))[0])
            x0 = int(rng.integers(1, 0, max(1, W - rw + 1))[0])
            box = (slice(y0, y0 + rh), slice(x0, x0 + rw))
            if not allowed[box].all():
                continue
            paint(box)
            area += rh * rw

    free = ~road

    def paint_grass(box):
        labels[box] = GRASS

    fill_rects(spec.grass_fraction, max(2, min(H, W) // 12), max(3, min(H, W) // 4), free, paint_grass)

    bfree = free.copy()

    def paint_building_tracked(box):
        labels[box] = BUILDING
        ndsm[box] = rng.scalar(*spec.building_height)
        y, x = box
        bfree[max(0, y.start - 1) : y.stop + 1, max(0, x.start - 1) : x.stop + 1] = False

    fill_rects(spec.building_density, max(2, min(H, W) // 16), max(3, min(H, W) // 6), bfree, paint_building_tracked)

    goal = spec.tree_fraction * H * W
    area, attempts = 0, 0
    while area < goal and attempts < 2000:
        attempts += 1
        cy, cx = rng.uniform(2, 0, 1) * np.array([H, W])
        radius = rng.scalar(2.5, max(3.0, min(H, W) / 20))
        top = rng.scalar(*spec.tree_height)
        disk = _disk(H, W, cy, cx, radius) & ~road & (labels != BUILDING)
        if not disk.any():
            continue
        yy, xx = np.mgrid[0:H, 0:W]
        rel = np.sqrt(np.clip(1.0 - ((yy - cy) ** 2 + (xx - cx) ** 2) / radius**2, 0.0, 1.0))
        crown = top * (0.6 + 0.4 * rel)
        new = disk & (labels != TREE)
        labels[disk] = TREE
        ndsm[disk] = np.maximum(ndsm[disk], crown[disk])
        area += int(new.sum())

    labels[road] = GROUND
    ndsm[road] = 0.0
    return labels, ndsm


def synth_generate(spec: SceneSpec) -> SceneBundle:
    """Generate a scene and its degraded observations from ``spec``."""
    rng = SplitMix64(spec.seed)
    H, W, T, B = spec.height, spec.width, spec.epochs, spec.bands
    labels, ndsm = _layout(spec, rng)

    base = rng.scalar(50.0, 150.0)
    sy, sx = rng.uniform(2, -0.02, 0.02)
    yy, xx = np.mgrid[0:H, 0:W].astype(np.float64)
    dtm = base + sy * yy + sx * xx
    dsm = dtm + ndsm

    sig = class_signatures(B)
    reflect = sig[labels].transpose(2, 0, 1) + rng.normal(B * H * W, spec.texture).reshape(B, H, W)

    images, cloud_any = [], np.zeros((H, W), dtype=bool)
    log = {"epochs": []}
    for t in range(T):
        gain = rng.uniform(B, *spec.gain)
        bias = rng.uniform(B, *spec.bias)
        obs = reflect * gain[:, None, None] + bias[:, None, None]
        obs += rng.normal(B * H * W, spec.image_noise).reshape(B, H, W)
        cloud = np.zeros((H, W), dtype=bool)
        goal = spec.cloud_fraction * H * W
        attempts = 0
        while cloud.sum() < goal and attempts < 1000:
            attempts += 1
            cy, cx = rng.uniform(2, 0, 1) * np.array([H, W])
            radius = rng.scalar(4.0, max(5.0, min(H, W) / 12))
            cloud |= _disk(H, W, cy, cx, radius)
        obs[:, cloud] = spec.cloud_value
        cloud_any |= cloud
        images.append(RasterGrid(obs))
        log["epochs"].append(
            {"gain": gain.tolist(), "bias": bias.tolist(), "cloud_pixels": int(cloud.sum())}
        )

    dsms = []
    n_px = H * W
    n_out = int(round(spec.dsm_outlier_fraction * n_px))
    n_hole = int(round(spec.dsm_hole_fraction * n_px))
    for t in range(T):
        h = dsm + rng.normal(n_px, spec.dsm_noise).reshape(H, W)
        order = rng.permutation(n_px)
        signs = np.where(rng.uniform(n_out) < 0.5, -1.0, 1.0)
        flat = h.reshape(-1)
        flat[order[:n_out]] += signs * spec.dsm_outlier_magnitude
        flat[order[n_out : n_out + n_hole]] = np.nan
        dsms.append(RasterGrid.from_nan(h))
        log["epochs"][t].update(outlier_count=n_out, hole_count=n_hole)

    image_stack = ImageStack(tuple(images))
    probs = seed_probability_maps(image_stack, sig, spec.softness, RULE_CLASSES)
    parr = probs.to_nan()
    mix = 0.7
    C = len(RULE_CLASSES)
    for t in range(T):
        hit = rng.uniform(n_px) < spec.prob_noise
        target = rng.integers(n_px, 0, C)
        p = parr[t].reshape(C, -1)
        onehot = np.zeros((C, int(hit.sum())))
        onehot[target[hit], np.arange(int(hit.sum()))] = 1.0
        p[:, hit] = (1.0 - mix) * p[:, hit] + mix * onehot
        log["epochs"][t]["prob_noise_pixels"] = int(hit.sum())
    probs = ProbabilityStack.from_nan(np.clip(parr, 0.0, 1.0), class_names=RULE_CLASSES)

    return SceneBundle(
        spec=spec,
        truth_classmap=ClassMap(labels, RULE_CLASSES),
        truth_dsm=RasterGrid(dsm),
        truth_dtm=RasterGrid(dtm),
        truth_reflectance=RasterGrid(reflect),
        images=image_stack,
        dsms=ImageStack(tuple(dsms)),
        probs=probs,
        invariant_mask=~cloud_any,
        log=log,
    )


def write_bundle(bundle: SceneBundle, directory) -> Path:
    """Write every raster as STFR plus stack manifests and ``bundle.json``."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    write_raster(bundle.truth_classmap.to_grid(), d / "truth_classmap.stfr")
    write_raster(bundle.truth_dsm, d / "truth_dsm.stfr")
    write_raster(bundle.truth_dtm, d / "truth_dtm.stfr")
    write_raster(bundle.truth_reflectance, d / "truth_reflectance.stfr")
    write_raster(RasterGrid(bundle.invariant_mask.astype(np.float64)), d / "invariant_mask.stfr")
    write_raster(bundle.ortho, d / "ortho.stfr")
    write_stack(bundle.images, d, "image", role="image")
    write_stack(bundle.dsms, d, "dsm", role="dsm")
    write_stack(bundle.ndsms(), d, "ndsm", role="dsm")
    write_stack(bundle.probs, d, "prob", role="probability")
    meta = {
        "spec": asdict(bundle.spec),
        "class_names": list(bundle.truth_classmap.class_names),
        "red_band": RED_BAND,
        "nir_band": NIR_BAND,
        "log": bundle.log,
    }
    path = d / "bundle.json"
    path.write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path
