# Copyright (c) 2024 The harmonized-detection developers
#
# This software is made available under the MIT licence, see LICENCE.txt.

import numpy as np
import pytest
from harmonized_detection.geometry import (
    InvalidBoxError,
    aligned_iou,
    as_boxes,
    box_area,
    box_centers,
    decode,
    encode,
    iou,
    pairwise_iou,
)


def random_boxes(rng, n):
    xy = rng.uniform(0, 50, size=(n, 2))
    wh = rng.uniform(0.5, 30, size=(n, 2))
    return np.concatenate([xy, xy + wh], axis=1)


def test_iou_examples():
    assert iou((0, 0, 2, 2), (0, 0, 2, 2)) == 1.0
    assert iou((0, 0, 1, 1), (5, 5, 6, 6)) == 0.0
    assert iou((0, 0, 2, 2), (1, 1, 3, 3)) == pytest.approx(1 / 7, abs=1e-15)
    # touching boxes do not overlap
    assert iou((0, 0, 1, 1), (1, 0, 2, 1)) == 0.0


def test_iou_zero_union():
    assert iou((1, 1, 1, 1), (1, 1, 1, 1)) == 0.0
    assert iou((0, 0, 0, 3), (0, 0, 0, 3)) == 0.0


def test_iou_properties():
    rng = np.random.default_rng(0)
    a = random_boxes(rng, 200)
    b = random_boxes(rng, 200)
    overlaps = aligned_iou(a, b)
    assert np.all((overlaps >= 0) & (overlaps <= 1))
    assert np.array_equal(overlaps, aligned_iou(b, a))
    shift = rng.uniform(-100, 100, size=(200, 2))
    shift = np.concatenate([shift, shift], axis=1)
    np.testing.assert_allclose(aligned_iou(a + shift, b + shift), overlaps,
                               rtol=0, atol=1e-12)
    np.testing.assert_allclose(aligned_iou(a, a), 1.0, rtol=0, atol=1e-15)


def test_pairwise_iou_matches_scalar_iou():
    rng = np.random.default_rng(1)
    a = random_boxes(rng, 7)
    b = random_boxes(rng, 5)
    matrix = pairwise_iou(a, b)
    assert matrix.shape == (7, 5)
    for i in range(7):
        for j in range(5):
            assert matrix[i, j] == pytest.approx(iou(a[i], b[j]), abs=1e-15)
    assert pairwise_iou(a, np.empty((0, 4))).shape == (7, 0)


def test_box_area_and_centers():
    boxes = np.array([[0, 0, 2, 3], [1, 1, 1, 4]])
    assert np.array_equal(box_area(boxes), [6, 0])
    assert np.array_equal(box_centers(boxes), [[1, 1.5], [1, 2.5]])


def test_as_boxes():
    assert as_boxes([0, 0, 1, 1]).dtype == np.float64
    with pytest.raises(InvalidBoxError):
        as_boxes([0, 0, 1])
    with pytest.raises(InvalidBoxError):
        as_boxes([2, 0, 1, 1])
    with pytest.raises(InvalidBoxError):
        as_boxes([0, 0, np.nan, 1])


def test_encode_decode_examples():
    box = np.array([3.0, 4.0, 10.0, 12.0])
    assert np.array_equal(encode(box, box), [0, 0, 0, 0])
    assert np.array_equal(decode(box, [0, 0, 0, 0]), box)
    np.testing.assert_allclose(encode((0, 0, 2, 2), (1, 1, 3, 3)),
                               [0.5, 0.5, 0, 0])
    np.testing.assert_allclose(decode((0, 0, 2, 2), (0.5, 0.5, 0, 0)),
                               [1, 1, 3, 3])


def test_encode_rejects_degenerate_boxes():
    with pytest.raises(InvalidBoxError):
        encode((0, 0, 2, 2), (1, 1, 1, 3))
    with pytest.raises(InvalidBoxError):
        encode((0, 0, 0, 2), (0, 0, 1, 1))


def test_encode_decode_roundtrip():
    rng = np.random.default_rng(2)
    priors = random_boxes(rng, 1000)
    targets = random_boxes(rng, 1000)
    decoded = decode(priors, encode(priors, targets))
    scale = np.abs(targets) + 1.0
    assert np.max(np.abs(decoded - targets) / scale) < 1e-9


def test_decode_clamp():
    box = decode((0, 0, 10, 10), (0, 0, np.log(3), 0), clamp=True,
                 bounds=(20, 8))
    np.testing.assert_allclose(box, [0, 0, 20, 8])
    with pytest.raises(ValueError):
        decode((0, 0, 10, 10), (0, 0, 0, 0), clamp=True)
