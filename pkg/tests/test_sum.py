import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from salrefine.gradcam import class_activation_map
from salrefine.sum import (
    SaliencyUpdater,
    SumConfig,
    active_area,
    final_map,
    fuse_mask,
    mask_mining_loss,
    total_loss,
    update_loop,
)


def test_fuse_mask_at_threshold_halves(rng):
    image = rng.random((4, 5, 3))
    out = fuse_mask(image, np.full((4, 5), 0.3), SumConfig(omega=7.0, sigma=0.3))
    np.testing.assert_allclose(out, 0.5 * image, rtol=0, atol=1e-15)


def test_fuse_mask_saturated(rng):
    image = rng.random((4, 5, 3))
    out = fuse_mask(image, np.ones((4, 5)), SumConfig(omega=1000.0, sigma=0.5))
    assert np.abs(out).max() < 1e-10


def test_fuse_mask_low_map_keeps_most(rng):
    image = rng.random((4, 5, 3))
    out = fuse_mask(image, np.zeros((4, 5)), SumConfig(omega=8.0, sigma=0.5))
    factor = 1.0 / (1.0 + math.exp(4.0))
    assert abs(factor - 0.0180) < 1e-4
    np.testing.assert_allclose(out, (1 - factor) * image, rtol=1e-12)
    np.testing.assert_allclose(out / np.where(image > 0, image, 1), 0.982, atol=1e-3)


def test_fuse_mask_dimension_mismatch():
    with pytest.raises(ValueError):
        fuse_mask(np.zeros((4, 4, 3)), np.zeros((4, 5)), SumConfig())


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, (3, 4, 3), elements=st.floats(0, 1)),
       arrays(np.float64, (3, 4), elements=st.floats(0, 1)),
       arrays(np.float64, (3, 4), elements=st.floats(0, 1)),
       st.floats(0.1, 200), st.floats(0.01, 0.99))
def test_fuse_mask_bounded_and_monotone(image, m1, bump, omega, sigma):
    cfg = SumConfig(omega=omega, sigma=sigma)
    lo = fuse_mask(image, m1, cfg)
    hi = fuse_mask(image, np.maximum(m1, bump), cfg)
    assert lo.min() >= 0 and lo.max() <= 1
    assert np.all(lo <= image)
    assert np.all(hi <= lo + 1e-15)


@pytest.mark.parametrize("scores, expected", [([0.2, 0.4], 0.3), ([0.0], 0.0), ([1, 1, 1], 1.0)])
def test_mask_mining_loss(scores, expected):
    assert mask_mining_loss(scores) == pytest.approx(expected, abs=1e-15)


def test_mask_mining_loss_empty():
    with pytest.raises(ValueError):
        mask_mining_loss([])


@pytest.mark.parametrize("args, expected", [((0.7, 0.3, 1), 1.0), ((0.7, 0.3, 0), 0.7), ((1.0, 0.5, 2), 2.0)])
def test_total_loss(args, expected):
    assert total_loss(*args) == pytest.approx(expected, abs=1e-15)


@given(st.floats(-10, 10), st.floats(-10, 10), st.floats(0, 10), st.floats(-1, 1))
def test_total_loss_linear_in_mask_term(l_cls, l_mask, alpha, delta):
    assert total_loss(l_cls, l_mask + delta, alpha) - total_loss(l_cls, l_mask, alpha) == pytest.approx(
        alpha * delta, abs=1e-9)


def test_config_validation():
    for bad in (dict(omega=0), dict(sigma=1.0), dict(sigma=0.0), dict(alpha=-1), dict(iterations=0)):
        with pytest.raises(ValueError):
            SumConfig(**bad)


def test_single_iteration_is_plain_gradcam(small_model, rng):
    image = rng.random((10, 12, 3))
    records = update_loop(image, small_model, SumConfig(iterations=1), class_index=1)
    assert len(records) == 1
    gray, _ = class_activation_map(small_model, image, 1)
    np.testing.assert_array_equal(records[0].map, gray)
    np.testing.assert_array_equal(final_map(records), gray)


def test_accumulation_is_monotone(small_model, rng):
    image = rng.random((10, 12, 3))
    records = update_loop(image, small_model, SumConfig(iterations=6))
    assert [r.iteration_index for r in records] == list(range(1, 7))
    areas = [active_area(r.accumulated) for r in records]
    for prev, cur in zip(records, records[1:]):
        assert np.all(cur.accumulated >= prev.accumulated)
        assert cur.masked_image.shape == image.shape
    assert areas == sorted(areas)


def test_saliency_updater_transformer(small_model, rng):
    images = [rng.random((8, 8, 3))]
    out = SaliencyUpdater(small_model, iterations=3).fit_transform(images)
    assert out[0].shape == (8, 8)
