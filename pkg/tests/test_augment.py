import numpy as np
import pytest

from msda.augment import SpecAugmentPlan, apply_specaugment, placement_policy
from msda.rng import Rng


def test_masks_stay_within_widths_and_counts():
    x = np.random.default_rng(0).normal(size=(40, 8)) + 5.0  # no natural zeros
    plan = SpecAugmentPlan(num_time_masks=2, max_time_mask_width=0.1, num_channel_masks=1, max_channel_mask_width=2)
    for seed in range(100):
        y = apply_specaugment(x, plan, Rng(seed))
        zero_rows = np.flatnonzero(np.all(y == 0, axis=1))
        zero_cols = np.flatnonzero(np.all(y == 0, axis=0))
        assert len(zero_rows) <= 2 * 4
        assert len(zero_cols) <= 2
        untouched = np.ones_like(x, dtype=bool)
        untouched[zero_rows] = False
        untouched[:, zero_cols] = False
        assert np.array_equal(y[untouched], x[untouched])


def test_identity_plan_and_input_immutability():
    x = np.arange(12.0).reshape(4, 3)
    plan = SpecAugmentPlan(num_time_masks=0, num_channel_masks=0)
    assert plan.is_identity
    assert np.array_equal(apply_specaugment(x, plan, Rng(0)), x)
    before = x.copy()
    apply_specaugment(x, SpecAugmentPlan(max_time_mask_width=2), Rng(1))
    assert np.array_equal(x, before)


def test_same_rng_same_masks():
    x = np.random.default_rng(1).normal(size=(30, 6))
    plan = SpecAugmentPlan()
    assert np.array_equal(apply_specaugment(x, plan, Rng(3)), apply_specaugment(x, plan, Rng(3)))


def test_mask_value_is_used():
    x = np.ones((20, 4))
    plan = SpecAugmentPlan(num_time_masks=3, max_time_mask_width=5, num_channel_masks=0, mask_value=-2.0)
    hits = [np.any(apply_specaugment(x, plan, Rng(s)) == -2.0) for s in range(20)]
    assert any(hits)


def test_invalid_plans_and_inputs():
    with pytest.raises(ValueError):
        SpecAugmentPlan(num_time_masks=-1)
    with pytest.raises(ValueError):
        SpecAugmentPlan(max_channel_mask_width=-0.5)
    with pytest.raises(ValueError):
        apply_specaugment(np.ones((5, 3)), SpecAugmentPlan(max_time_mask_width=6), Rng(0))
    with pytest.raises(ValueError):
        apply_specaugment(np.ones(5), SpecAugmentPlan(), Rng(0))


def test_placement_policy():
    for stage in ("stage1", "ft", "cpt"):
        assert placement_policy(stage, "model")
    assert placement_policy("stage2", "student")
    assert not placement_policy("stage2", "teacher")
    with pytest.raises(ValueError):
        placement_policy("stage2", "critic")
    with pytest.raises(ValueError):
        placement_policy("stage3", "student")
