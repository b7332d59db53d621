import numpy as np
import pytest

from hvfi.autodiff import Tensor
from hvfi.gradcheck import gradcheck
from hvfi.losses import (CHARBONNIER_EPS, CHARBONNIER_EXP, SOFT_SIGN_EPS,
                         census_loss, census_transform, gt_pyramid, l1_loss,
                         to_grayscale, total_loss)


def test_soft_sign_indicator_value():
    # 3x3 patch, center 0.5, one neighbor 0.9: phi(0.4) = 0.4/sqrt(0.16+1e-4)
    d = 0.4
    expected = d / np.sqrt(d * d + SOFT_SIGN_EPS ** 2)
    assert expected == pytest.approx(0.99969, abs=1e-5)
    img = np.full((1, 3, 5, 5), 0.5, dtype=np.float64)
    img[:, :, 1, 2] = 0.9
    desc = census_transform(Tensor(img)).data
    assert np.abs(desc).max() == pytest.approx(expected, abs=1e-6)


def test_constant_image_zero_descriptor():
    img = Tensor(np.full((1, 3, 9, 9), 0.37, dtype=np.float64))
    desc = census_transform(img).data
    np.testing.assert_allclose(desc, 0.0, atol=1e-12)


def test_census_brightness_invariance(rng):
    x = rng.uniform(0.15, 0.75, (1, 3, 12, 12))
    a = Tensor(x)
    b = Tensor(x + 0.1)       # no clipping: stays within [0, 1]
    shifted = census_loss(a, b).data
    baseline = census_loss(a, a).data
    assert abs(float(shifted) - float(baseline)) < 1e-6


def test_census_floor_is_charbonnier_zero(rng):
    x = Tensor(rng.uniform(0, 1, (1, 3, 10, 10)))
    floor = float(census_loss(x, x).data)
    assert floor == pytest.approx(CHARBONNIER_EPS ** CHARBONNIER_EXP, rel=1e-6)


def test_l1_constant_offset(rng):
    x = Tensor(rng.uniform(0, 1, (1, 3, 8, 8)))
    y = Tensor(x.data + 0.1)
    assert float(l1_loss(y, x).data) == pytest.approx(0.1, abs=1e-6)


def test_gt_pyramid_levels(rng):
    gt = Tensor(rng.uniform(0, 1, (1, 3, 16, 16)).astype(np.float32))
    pyr = gt_pyramid(gt, 3)
    assert [p.shape for p in pyr] == [(1, 3, 4, 4), (1, 3, 8, 8),
                                      (1, 3, 16, 16)]
    np.testing.assert_array_equal(pyr[-1].data, gt.data)


def test_total_loss_minimum_at_exact_match(rng):
    gt = Tensor(rng.uniform(0, 1, (1, 3, 16, 16)).astype(np.float32))
    pyr = gt_pyramid(gt, 3)
    loss, l1s, cens = total_loss([Tensor(p.data.copy()) for p in pyr], gt)
    assert l1s == [0.0, 0.0, 0.0]
    floor = 3 * CHARBONNIER_EPS ** CHARBONNIER_EXP
    assert float(loss.data) == pytest.approx(floor, rel=1e-4)


def test_total_loss_exceeds_l1_component(rng):
    gt = Tensor(rng.uniform(0, 1, (1, 3, 8, 8)).astype(np.float32))
    pred = Tensor(rng.uniform(0, 1, (1, 3, 8, 8)).astype(np.float32))
    loss, l1s, _ = total_loss([pred], gt)
    assert float(loss.data) >= sum(l1s) >= 0.0


def test_total_loss_single_stage_constant_offset(rng):
    gt = Tensor(rng.uniform(0.2, 0.8, (1, 3, 8, 8)))
    pred = Tensor(gt.data + 0.1)
    _, l1s, _ = total_loss([pred], gt)
    assert l1s[0] == pytest.approx(0.1, abs=1e-6)


def test_total_loss_shape_mismatch(rng):
    from hvfi.autodiff import ShapeError
    gt = Tensor(rng.uniform(0, 1, (1, 3, 16, 16)).astype(np.float32))
    with pytest.raises(ShapeError):
        total_loss([Tensor(rng.uniform(0, 1, (1, 3, 8, 8)))], gt)


def test_to_grayscale_weights():
    img = np.zeros((1, 3, 2, 2), dtype=np.float64)
    img[:, 0] = 1.0
    g = to_grayscale(Tensor(img)).data
    np.testing.assert_allclose(g, 0.299, atol=1e-7)


def test_census_loss_gradcheck(f64_rng):
    a = Tensor(f64_rng.uniform(0.1, 0.9, (1, 3, 10, 10)), requires_grad=True)
    b = Tensor(f64_rng.uniform(0.1, 0.9, (1, 3, 10, 10)), requires_grad=True)
    rep = gradcheck(census_loss, [a, b], max_elems=80)
    assert rep.passed, str(rep)
