import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

import oracles
from stfuse.errors import DimensionError, ParameterError
from stfuse.raster import ClassMap, ImageStack, ProbabilityStack
from stfuse.refine import (
    RefineConfig,
    argmax_classify,
    estimate_sigma_h,
    height_weight,
    max_relative_change,
    refine_step,
    refine_until_converged,
)

NAMES = ("a", "b")


def heights(arr):
    return ImageStack.from_nan(np.asarray(arr, dtype=float)[:, None])


def test_sigma_h_plus_minus_one():
    h = np.full((2, 3, 3), 5.0)
    h[0] += 1.0
    h[1] -= 1.0
    cm = ClassMap(np.zeros((3, 3), dtype=int), NAMES)
    assert estimate_sigma_h(heights(h), cm, 0, 0.25) == pytest.approx(1.0, abs=1e-12)


def test_sigma_h_constant_and_absent_class():
    h = np.full((3, 4, 4), 7.0)
    cm = ClassMap(np.zeros((4, 4), dtype=int), NAMES)
    assert estimate_sigma_h(heights(h), cm, 0, 0.25) == 0.25
    assert estimate_sigma_h(heights(h), cm, 1, 0.4) == 0.4


def test_sigma_h_matches_oracle():
    rng = np.random.default_rng(2)
    h = rng.normal(10, 3, (4, 6, 6))
    h[1, 2, 2] = np.nan
    labels = rng.integers(-1, 2, (6, 6))
    cm = ClassMap(labels, NAMES)
    for c in (0, 1):
        ref = oracles.sigma_h(h.tolist(), labels.tolist(), c, 0.25)
        assert estimate_sigma_h(heights(h), cm, c, 0.25) == pytest.approx(ref, abs=1e-12)


def test_height_weight():
    assert height_weight(3.0, 3.0, 1.0) == 1.0
    assert height_weight(2.0, 4.5, 2.5) == pytest.approx(math.exp(-0.5), abs=1e-15)
    assert height_weight(1.0, 9.0, 2.0) == height_weight(9.0, 1.0, 2.0)
    with pytest.raises(ParameterError):
        height_weight(1.0, 2.0, 0.0)


def test_config_validated():
    for bad in ({"convergence_threshold": 0.0}, {"convergence_threshold": 1.0},
                {"max_iterations": 0}, {"sigma_h_floor": 0.0}, {"sigma_r": -1.0}):
        with pytest.raises(ParameterError):
            RefineConfig(**bad)
    assert RefineConfig().convergence_threshold == 0.05


def random_case(rng, T=2, C=2, H=3, W=3, holes=False):
    p = rng.uniform(0, 1, (T, C, H, W))
    img = rng.uniform(0, 60, (T, 2, H, W))
    h = rng.uniform(0, 8, (T, H, W))
    labels = rng.integers(0, C, (H, W))
    if holes:
        p[0, :, 0, 0] = np.nan
        img[1, :, H - 1, 0] = np.nan
        h[0, 1, 1] = np.nan
    return p, img, h, labels


def run_both(p, img, h, labels, cfg, names=NAMES):
    probs = ProbabilityStack.from_nan(p, class_names=names)
    images = ImageStack.from_nan(img)
    ndsm = heights(h)
    cm = ClassMap(labels, names)
    got = refine_step(probs, images, ndsm, cm, cfg).to_nan()
    sig = [oracles.sigma_h(h.tolist(), labels.tolist(), c, cfg.sigma_h_floor) for c in range(len(names))]
    ref = oracles.refine_step(p.tolist(), img.tolist(), h.tolist(), sig,
                              cfg.sigma_s, cfg.sigma_r, cfg.window_radius)
    return got, np.array(ref)


def test_3x3_two_epoch_hand_case():
    rng = np.random.default_rng(0)
    cfg = RefineConfig(sigma_s=1.0, sigma_r=25.0, window_radius=1)
    got, ref = run_both(*random_case(rng), cfg)
    assert np.allclose(got, ref, atol=1e-9, rtol=0, equal_nan=True)


def test_nodata_handling_matches_oracle():
    rng = np.random.default_rng(4)
    cfg = RefineConfig(sigma_s=1.5, sigma_r=30.0, window_radius=1)
    got, ref = run_both(*random_case(rng, T=3, H=5, W=4, holes=True), cfg)
    assert np.array_equal(np.isnan(got), np.isnan(ref))
    assert np.isnan(got[0, :, 0, 0]).all()
    assert np.allclose(got, ref, atol=1e-9, rtol=0, equal_nan=True)


def test_uniform_fixed_point_converges_in_one():
    rng = np.random.default_rng(1)
    p = np.empty((3, 2, 6, 6))
    p[:, 0], p[:, 1] = 0.3, 0.7
    probs = ProbabilityStack.from_nan(p, class_names=NAMES)
    images = ImageStack.from_nan(rng.uniform(0, 200, (3, 3, 6, 6)))
    ndsm = heights(rng.uniform(0, 10, (3, 6, 6)))
    cm = ClassMap(rng.integers(0, 2, (6, 6)), NAMES)
    out = refine_step(probs, images, ndsm, cm)
    assert np.array_equal(out.to_nan(), p)
    res = refine_until_converged(probs, images, ndsm, cm)
    assert (res.iterations, res.converged) == (1, True)
    assert res.history == [0.0]


def test_dimension_errors():
    rng = np.random.default_rng(1)
    p, img, h, labels = random_case(rng)
    probs = ProbabilityStack.from_nan(p, class_names=NAMES)
    with pytest.raises(DimensionError):
        refine_step(probs, ImageStack.from_nan(img[:1]), heights(h), ClassMap(labels, NAMES))
    with pytest.raises(DimensionError):
        refine_step(probs, ImageStack.from_nan(img), heights(h), ClassMap(labels[:2], NAMES))


def test_iteration_cap_reported():
    rng = np.random.default_rng(8)
    p, img, h, labels = random_case(rng, H=12, W=12)
    cfg = RefineConfig(convergence_threshold=1e-9, max_iterations=3, window_radius=1)
    res = refine_until_converged(ProbabilityStack.from_nan(p, class_names=NAMES),
                                 ImageStack.from_nan(img), heights(h), ClassMap(labels, NAMES), cfg)
    assert res.iterations == 3 and not res.converged and len(res.history) == 3


def test_cached_and_uncached_agree():
    rng = np.random.default_rng(12)
    p, img, h, labels = random_case(rng, T=3, H=40, W=11, holes=True)
    args = (ProbabilityStack.from_nan(p, class_names=NAMES), ImageStack.from_nan(img),
            heights(h), ClassMap(labels, NAMES), RefineConfig(max_iterations=4, window_radius=1))
    a = refine_until_converged(*args)
    b = refine_until_converged(*args, cache_bytes=0)
    c = refine_until_converged(*args, threads=3)
    assert a.probs.to_nan().tobytes() == b.probs.to_nan().tobytes() == c.probs.to_nan().tobytes()


def test_max_relative_change_epsilon():
    new = np.array([0.0, 0.5, np.nan])
    old = np.array([1e-8, 0.5, 0.2])
    assert max_relative_change(new, old) == pytest.approx(1e-8 / 1e-6)


def test_argmax_examples():
    p = np.array([[[[0.2, 0.5, np.nan]], [[0.7, 0.5, np.nan]], [[0.1, 0.0, np.nan]]]])
    maps = argmax_classify(ProbabilityStack.from_nan(p))
    assert maps[0].labels.tolist() == [[1, 0, -1]]


def test_renormalize_option():
    rng = np.random.default_rng(6)
    p, img, h, labels = random_case(rng, H=6, W=6)
    cfg = RefineConfig(window_radius=1, renormalize=True)
    out = refine_step(ProbabilityStack.from_nan(p, class_names=NAMES), ImageStack.from_nan(img),
                      heights(h), ClassMap(labels, NAMES), cfg).to_nan()
    assert np.allclose(out.sum(axis=1), 1.0)


probs_case = st.tuples(st.integers(1, 3), st.integers(2, 3)).flatmap(
    lambda tc: st.tuples(
        arrays(np.float64, (tc[0], tc[1], 4, 4), elements=st.floats(0, 1)),
        arrays(np.float64, (tc[0], 2, 4, 4), elements=st.floats(0, 255, width=32)),
        arrays(np.float64, (tc[0], 4, 4), elements=st.floats(0, 30, width=32)),
        arrays(np.int64, (4, 4), elements=st.integers(0, tc[1] - 1)),
    )
)


@settings(max_examples=150, deadline=None)
@given(probs_case, st.randoms(use_true_random=False))
def test_range_and_epoch_relabeling(case, rnd):
    p, img, h, labels = case
    T, C = p.shape[:2]
    names = tuple(f"k{i}" for i in range(C))
    cfg = RefineConfig(window_radius=1)
    probs = ProbabilityStack.from_nan(p, class_names=names)
    images, ndsm, cm = ImageStack.from_nan(img), heights(h), ClassMap(labels, names)
    out = refine_step(probs, images, ndsm, cm, cfg).to_nan()
    assert np.all((out >= 0) & (out <= 1))
    order = list(range(T))
    rnd.shuffle(order)
    perm = refine_step(probs.permuted(order), images.permuted(order), ndsm.permuted(order), cm, cfg)
    assert np.allclose(perm.to_nan(), out[order], atol=1e-12, rtol=0)


@settings(max_examples=100, deadline=None)
@given(arrays(np.float64, 3, elements=st.floats(0.01, 1)), st.floats(0.05, 1.0))
def test_argmax_invariant_under_scaling_on_uniform_fields(pvec, scale):
    rng = np.random.default_rng(0)
    p = np.broadcast_to(pvec[None, :, None, None], (2, 3, 5, 5)).copy()
    names = ("x", "y", "z")
    images = ImageStack.from_nan(rng.uniform(0, 100, (2, 2, 5, 5)))
    ndsm = heights(rng.uniform(0, 5, (2, 5, 5)))
    cm = ClassMap(np.zeros((5, 5), dtype=int), names)
    a = refine_step(ProbabilityStack.from_nan(p, class_names=names), images, ndsm, cm)
    b = refine_step(ProbabilityStack.from_nan(p * scale, class_names=names), images, ndsm, cm)
    for ma, mb in zip(argmax_classify(a), argmax_classify(b)):
        assert np.array_equal(ma.labels, mb.labels)
