import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from memlane.metrics import MetricsRow, iou, mean, temporal_consistency

from oracles import iou_bruteforce


def all_masks(shape):
    n = int(np.prod(shape))
    bits = (np.arange(2**n)[:, None] >> np.arange(n)) & 1
    return bits.reshape((2**n,) + shape).astype(np.float64)


def test_iou_matches_bruteforce_on_all_2x2_pairs():
    masks = all_masks((1, 2, 2))
    for p, g in itertools.product(masks, masks):
        assert iou(p, g) == iou_bruteforce(p > 0.5, g > 0.5)


def test_iou_matches_bruteforce_on_65536_pairs():
    masks = all_masks((1, 2, 4))
    cases = 0
    for p, g in itertools.product(masks, masks):
        assert iou(p, g) == iou_bruteforce(p > 0.5, g > 0.5)
        cases += 1
    assert cases == 65_536


def test_adding_a_correct_pixel_never_lowers_iou():
    masks = all_masks((1, 2, 2))
    for p, g in itertools.product(masks, masks):
        base = iou(p, g)
        for idx in zip(*np.nonzero((g > 0.5) & (p < 0.5))):
            better = p.copy()
            better[idx] = 1.0
            assert iou(better, g) >= base


def test_worked_examples():
    g = np.zeros((1, 4, 4))
    g[0, 1:3, 1:3] = 1
    assert iou(g, g) == 1.0
    other = np.zeros((1, 4, 4))
    other[0, 0, 0] = 1
    assert iou(other, g) == 0.0
    top, left = np.zeros((1, 4, 4)), np.zeros((1, 4, 4))
    top[0, :2, :] = 1
    left[0, :, :2] = 1
    assert iou(top, left) == 1 / 3


def test_empty_empty_is_one():
    assert iou(np.zeros((1, 3, 3)), np.zeros((1, 3, 3))) == 1.0


def test_threshold_is_strict():
    g = np.ones((1, 1, 2))
    assert iou(np.array([[[0.5, 0.51]]]), g) == 0.5


def test_iou_rejects_shape_mismatch():
    with pytest.raises(ValueError, match="shape"):
        iou(np.zeros((1, 2, 2)), np.zeros((1, 2, 3)))


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**16 - 1), st.integers(0, 2**16 - 1))
def test_iou_symmetry(a, b):
    p = ((a >> np.arange(16)) & 1).reshape(1, 4, 4).astype(float)
    g = ((b >> np.arange(16)) & 1).reshape(1, 4, 4).astype(float)
    assert iou(p, g) == iou(g, p)


def test_tc_constant_perfect_predictions_on_frozen_scene():
    g = np.zeros((1, 4, 4))
    g[0, 2:] = 1
    tc = temporal_consistency([g * 0.9] * 5, [g] * 5)
    assert tc.value == 1.0 and not tc.unnormalized


def test_tc_alternating_disjoint_predictions_is_zero():
    g = np.zeros((1, 4, 4))
    g[0, 2:] = 1
    a, b = np.zeros((1, 4, 4)), np.zeros((1, 4, 4))
    a[0, :, :2] = 1
    b[0, :, 2:] = 1
    assert temporal_consistency([a, b, a, b], [g] * 4).value == 0.0


def test_tc_guarded_denominator_flags():
    a, b = np.zeros((1, 2, 2)), np.zeros((1, 2, 2))
    a[0, 0, 0] = 1
    b[0, 1, 1] = 1
    tc = temporal_consistency([a, a], [a, b])
    assert tc.unnormalized and tc.value == 1.0


def test_tc_on_generated_data_is_finite():
    from memlane.datagen import SceneParams, generate

    s = generate(SceneParams(seed=42, num_sequences=1))[0]
    noisy = [np.clip(m + 0.3 * (np.random.default_rng(t).random(m.shape) - 0.5), 0, 1) for t, m in enumerate(s.masks)]
    tc = temporal_consistency(noisy, list(s.masks))
    assert math.isfinite(tc.value) and tc.ground_truth_iou >= 0.6


def test_tc_errors():
    with pytest.raises(ValueError):
        temporal_consistency([np.zeros((1, 2, 2))], [np.zeros((1, 2, 2))])
    with pytest.raises(ValueError):
        temporal_consistency([np.zeros((1, 2, 2))] * 3, [np.zeros((1, 2, 2))] * 2)


def test_mean_is_order_independent():
    values = [1e16, 1.0, -1e16, 3.0] * 5
    shuffled = list(reversed(values))
    assert mean(values) == mean(shuffled) == 1.0  # (1 + 3) * 5 / 20, exactly


def test_metrics_row_validates_iou():
    with pytest.raises(ValueError):
        MetricsRow("m", "always-fast", 1.5, 10.0, 1.0)
