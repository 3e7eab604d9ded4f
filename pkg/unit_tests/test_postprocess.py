# Copyright (c) 2024 The harmonized-detection developers
#
# This software is made available under the MIT licence, see LICENCE.txt.

import numpy as np
import pytest
from harmonized_detection.geometry import iou
from harmonized_detection.postprocess import (
    DivergenceError,
    Detections,
    NmsConfig,
    batched_nms,
    divergence_metric,
    fuse_score,
    match_divergence_pairs,
    nms,
    per_object_divergence,
)


def test_fuse_score():
    assert fuse_score(0.7, 1.0) == 0.7
    assert fuse_score(0.8, 0.5) == pytest.approx(0.4)
    rng = np.random.default_rng(0)
    conf, iou_pred = rng.random(100), rng.random(100)
    assert np.all(fuse_score(conf, iou_pred) <= np.minimum(conf, iou_pred))


def test_nms_config_validation():
    with pytest.raises(ValueError):
        NmsConfig(iou_threshold=0)
    with pytest.raises(ValueError):
        NmsConfig(mode="soft")
    with pytest.raises(ValueError):
        NmsConfig(max_out=0)
    cfg = NmsConfig(mode="iou-nms", max_out=10)
    assert NmsConfig(**cfg.to_dict()).to_dict() == cfg.to_dict()


def test_detections_validation():
    with pytest.raises(ValueError):
        Detections([[0, 0, 1, 1]], [0, 1], [0.5])
    dets = Detections([[0, 0, 1, 1]], [0], [0.5])
    assert not np.isfinite(dets.iou_pred[0])
    assert not dets.has_iou_pred
    assert Detections.empty().has_iou_pred


def test_nms_identical_boxes():
    dets = Detections([[0, 0, 10, 10]] * 2, [0, 0], [0.9, 0.8])
    kept = nms(dets)
    assert kept.ids.tolist() == [0]
    assert kept.score.tolist() == [0.9]


def test_nms_modes_example():
    # IoU of the two boxes is 0.7
    dets = Detections([[0, 0, 10, 10], [0, 0, 10, 7]], [0, 0], [0.9, 0.6],
                      iou_pred=[0.3, 0.9])
    assert nms(dets, NmsConfig(mode="standard")).ids.tolist() == [0]
    kept = nms(dets, NmsConfig(mode="rescored"))
    assert kept.ids.tolist() == [1]
    assert kept.score[0] == pytest.approx(0.54)
    kept = nms(dets, NmsConfig(mode="iou-nms"))
    assert kept.ids.tolist() == [1]
    # the survivor takes the highest confidence of its cluster
    assert kept.score[0] == pytest.approx(0.9)
    # no suppression above the threshold
    kept = nms(dets, NmsConfig(mode="rescored", iou_threshold=0.75))
    assert kept.ids.tolist() == [1, 0]


def test_nms_requires_iou_pred():
    dets = Detections([[0, 0, 10, 10]], [0], [0.9])
    with pytest.raises(ValueError):
        nms(dets, NmsConfig(mode="rescored"))
    assert len(nms(Detections.empty(), NmsConfig(mode="iou-nms"))) == 0


def test_nms_ties_go_to_lowest_id():
    dets = Detections([[0, 0, 10, 10]] * 3, [0] * 3, [0.5] * 3,
                      ids=[7, 3, 5])
    assert nms(dets).ids.tolist() == [3]


def brute_force_nms(dets, cfg):
    if cfg.mode == "standard":
        key = dets.raw_conf
    elif cfg.mode == "rescored":
        key = dets.raw_conf * dets.iou_pred
    else:
        key = dets.iou_pred
    alive = list(range(len(dets)))
    kept, scores = [], []
    while alive and len(kept) < cfg.max_out:
        best = max(alive, key=lambda i: (key[i], -dets.ids[i]))
        alive.remove(best)
        cluster = [i for i in alive
                   if iou(dets.boxes[best], dets.boxes[i])
                   >= cfg.iou_threshold]
        alive = [i for i in alive if i not in cluster]
        kept.append(int(dets.ids[best]))
        if cfg.mode == "iou-nms":
            scores.append(max([dets.raw_conf[best]]
                              + [dets.raw_conf[i] for i in cluster]))
        else:
            scores.append(key[best])
    return kept, scores


def random_detections(rng, n):
    corners = rng.uniform(0, 40, size=(n, 2))
    sizes = rng.uniform(2, 20, size=(n, 2))
    return Detections(np.concatenate([corners, corners + sizes], axis=1),
                      np.zeros(n), rng.random(n), iou_pred=rng.random(n),
                      ids=rng.permutation(n))


@pytest.mark.parametrize("mode", ["standard", "rescored", "iou-nms"])
def test_nms_matches_brute_force(mode):
    for seed in range(500):
        rng = np.random.default_rng(seed)
        dets = random_detections(rng, int(rng.integers(0, 21)))
        cfg = NmsConfig(iou_threshold=float(rng.uniform(0.1, 0.9)),
                        mode=mode, max_out=int(rng.integers(1, 25)))
        kept = nms(dets, cfg)
        expected_ids, expected_scores = brute_force_nms(dets, cfg)
        assert kept.ids.tolist() == expected_ids
        np.testing.assert_allclose(kept.score, expected_scores)


def test_nms_properties():
    rng = np.random.default_rng(1)
    cfg = NmsConfig(iou_threshold=0.4)
    for _ in range(100):
        dets = random_detections(rng, 20)
        kept = nms(dets, cfg)
        assert set(kept.ids.tolist()) <= set(dets.ids.tolist())
        for i in range(len(kept)):
            for j in range(i + 1, len(kept)):
                assert iou(kept.boxes[i], kept.boxes[j]) < cfg.iou_threshold
        shuffled = nms(dets.take(rng.permutation(len(dets))), cfg)
        assert np.array_equal(kept.ids, shuffled.ids)


def test_batched_nms():
    boxes = [[0, 0, 10, 10], [0, 0, 10, 10], [0, 0, 10, 10],
             [0, 0, 10, 10], [20, 20, 30, 30]]
    dets = Detections(boxes, [0, 0, 1, 0, 0], [0.9, 0.8, 0.7, 0.6, 0.5],
                      image_ids=[1, 1, 1, 0, 0])
    kept = batched_nms(dets)
    # classes are suppressed separately, images are kept apart
    assert kept.image_ids.tolist() == [0, 0, 1, 1]
    assert kept.ids.tolist() == [3, 4, 0, 2]
    kept = batched_nms(dets, NmsConfig(max_out=1))
    assert kept.ids.tolist() == [3, 0]


def test_divergence_metric_examples():
    assert divergence_metric([0.1, 0.2, 0.3], [0.1, 0.5, 0.9]) == (
        pytest.approx(1.0), False)
    assert divergence_metric([0.1, 0.2, 0.3], [0.9, 0.5, 0.1]) == (
        pytest.approx(-1.0), False)
    rho, degenerate = divergence_metric([0.1, 0.2, 0.3], [0.3, 0.1, 0.2])
    assert rho == pytest.approx(-0.5)
    assert not degenerate
    assert divergence_metric([0.5, 0.5, 0.5], [0.1, 0.2, 0.3]) == (0.0, True)


def test_divergence_metric_ties_use_average_ranks():
    # ranks (1.5, 1.5, 3) against (1, 2, 3)
    rho, _ = divergence_metric([0.2, 0.2, 0.9], [0.1, 0.2, 0.3])
    assert rho == pytest.approx(np.sqrt(3) / 2)


def test_divergence_metric_errors():
    with pytest.raises(DivergenceError):
        divergence_metric([0.5], [0.5])
    with pytest.raises(DivergenceError):
        divergence_metric([0.5, np.nan], [0.5, 0.6])
    with pytest.raises(DivergenceError):
        divergence_metric([0.5, 0.6], [0.5])


def test_divergence_metric_invariances():
    rng = np.random.default_rng(2)
    for _ in range(50):
        x = rng.random(15)
        y = rng.random(15)
        rho, _ = divergence_metric(x, y)
        assert rho == pytest.approx(divergence_metric(np.exp(3 * x), y)[0])
        assert rho == pytest.approx(divergence_metric(x, y ** 3 + 1)[0])
        assert divergence_metric(x, x)[0] == pytest.approx(1.0)


def test_per_object_divergence():
    confidences = [0.1, 0.2, 0.3, 0.1, 0.2, 0.7, 0.5, 0.5]
    ious = [0.1, 0.2, 0.3, 0.9, 0.5, 0.4, 0.2, 0.3]
    keys = [(0, 0)] * 3 + [(0, 1)] * 2 + [(1, 0)] + [(2, 0)] * 2
    mean, count = per_object_divergence(confidences, ious, keys)
    # the single-pair and the constant-confidence objects are left out
    assert count == 2
    assert mean == pytest.approx(0.0)
    assert per_object_divergence([], [], np.empty((0, 2))) == (None, 0)


def test_match_divergence_pairs():
    dets = Detections([[0, 0, 10, 10], [0, 0, 10, 5], [50, 50, 60, 60],
                       [0, 0, 10, 10], [0, 0, 10, 10]],
                      [0, 0, 0, 1, 0], [0.9, 0.8, 0.7, 0.6, 0.5],
                      image_ids=[0, 0, 0, 0, 1])
    gt_boxes = [[0, 0, 10, 10], [0, 0, 10, 8]]
    confidences, ious, keys = match_divergence_pairs(
        dets, gt_boxes, [0, 0], [0, 0], [4, 2])
    # no overlap, other class and other image are left out
    assert confidences.tolist() == [0.9, 0.8]
    assert ious.tolist() == pytest.approx([1.0, 5 / 8])
    assert keys.tolist() == [[0, 4], [0, 2]]
    confidences, _, keys = match_divergence_pairs(
        Detections.empty(), gt_boxes, [0, 0], [0, 0], [4, 2])
    assert confidences.size == 0
    assert keys.shape == (0, 2)
