import dataclasses

import numpy as np
import pytest

from cgmlstm.metrics import summarize_dataset
from cgmlstm.synth import gen_cohort, gen_subject, glucose_curve, meal_events, random_profile


def test_sample_count_and_range():
    s = gen_subject(random_profile(1), 38)
    assert len(s) == 10944
    assert s.values.min() >= 40.0 and s.values.max() <= 400.0
    assert not np.isnan(s.values).any()


def test_subject_determinism():
    a = gen_subject(random_profile(5), 3)
    b = gen_subject(random_profile(5), 3)
    np.testing.assert_array_equal(a.values, b.values)


def test_cohort_shape_and_distinct_subjects():
    cohort = gen_cohort(3, 2, 0)
    assert [s.subject_id for s in cohort] == ["sim01", "sim02", "sim03"]
    assert not np.array_equal(cohort[0].values, cohort[1].values)
    assert len(gen_cohort(1, 1, 0)) == 1
    with pytest.raises(ValueError):
        gen_cohort(0, 1, 0)
    with pytest.raises(ValueError):
        gen_subject(random_profile(0), 0)


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_cohort_mean_in_band(seed):
    values = np.concatenate([s.values for s in gen_cohort(11, 10, seed)])
    assert 110.0 <= values.mean() <= 170.0


def test_full_cohort_size():
    cohort = gen_cohort(11, 38, 0)
    assert sum(len(s) for s in cohort) == 120384


def test_meal_response_is_upward():
    for seed in range(5):
        p = dataclasses.replace(random_profile(seed), noise_sigma=0.0)
        times, amps = meal_events(p, 4)
        before = glucose_curve(p, times - 5.0, (times, amps))
        after = glucose_curve(p, times + 30.0, (times, amps))
        assert np.all(after > before)


def test_summary_of_generated_subject():
    s = gen_subject(random_profile(3), 2)
    row = summarize_dataset(s)
    assert row["samples"] == 576
    assert abs(row["mean_mgdl"] - s.values.mean()) < 1e-12
