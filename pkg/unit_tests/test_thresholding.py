# Copyright (c) 2024 The harmonized-detection developers
#
# This software is made available under the MIT licence, see LICENCE.txt.

import numpy as np
import pytest
from harmonized_detection.thresholding import (
    EmptyScoreSetError,
    otsu_threshold,
    split,
)


def brute_force_otsu(values):
    values = np.asarray(values, dtype=np.float64)
    best_t, best_var = None, -1.0
    for t in np.unique(values):
        below = values[values <= t]
        above = values[values > t]
        if above.size == 0:
            var = 0.0
        else:
            w0 = below.size / values.size
            w1 = above.size / values.size
            var = w0 * w1 * (below.mean() - above.mean()) ** 2
        if var > best_var:
            best_t, best_var = t, var
    return best_t


def test_otsu_examples():
    assert otsu_threshold([0.2, 0.8]) == 0.2
    assert otsu_threshold([0.5, 0.5, 0.5]) == 0.5
    assert otsu_threshold([0.1, 0.15, 0.2, 0.8, 0.85, 0.9]) == 0.2
    assert otsu_threshold([0.7]) == 0.7


def test_otsu_tie_goes_to_smaller_threshold():
    # cutting after 0 or after 1 gives the same between-class variance
    assert otsu_threshold([0.0, 0.0, 1.0, 2.0, 2.0]) == 0.0


def test_otsu_empty():
    with pytest.raises(EmptyScoreSetError):
        otsu_threshold([])


def test_otsu_matches_brute_force():
    rng = np.random.default_rng(0)
    for _ in range(1000):
        values = rng.random(int(rng.integers(2, 65)))
        t = otsu_threshold(values)
        assert t == brute_force_otsu(values)
        assert t in values


def test_split_examples():
    above, below = split([0.2, 0.8], 0.2)
    assert above.tolist() == [1]
    assert below.tolist() == [0]
    above, below = split([0.5, 0.5], 0.5)
    assert above.tolist() == []
    assert below.tolist() == [0, 1]


def test_split_is_a_partition():
    rng = np.random.default_rng(1)
    values = rng.random(30)
    above, below = split(values, otsu_threshold(values))
    assert np.intersect1d(above, below).size == 0
    assert sorted(np.concatenate([above, below]).tolist()) == list(range(30))


@pytest.mark.parametrize("scale,offset", [(2.5, 0.125), (0.5, -3.0),
                                          (1.0, 0.25)])
def test_otsu_partition_invariant_under_affine_maps(scale, offset):
    rng = np.random.default_rng(2)
    for _ in range(100):
        values = rng.random(int(rng.integers(2, 30)))
        above, below = split(values, otsu_threshold(values))
        mapped = scale * values + offset
        mapped_above, mapped_below = split(mapped, otsu_threshold(mapped))
        assert np.array_equal(above, mapped_above)
        assert np.array_equal(below, mapped_below)


def test_otsu_partition_can_change_under_nonlinear_monotone_maps():
    values = np.array([0.0, 1.0, 3.0])
    above, _ = split(values, otsu_threshold(values))
    assert above.tolist() == [2]
    # the square root keeps the order but moves the cut
    mapped = np.sqrt(values)
    above, _ = split(mapped, otsu_threshold(mapped))
    assert above.tolist() == [1, 2]
