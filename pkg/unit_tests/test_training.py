# Copyright (c) 2024 The harmonized-detection developers
#
# This software is made available under the MIT licence, see LICENCE.txt.

import numpy as np
import pytest
from harmonized_detection.model import HeadParams
from harmonized_detection.postprocess import NmsConfig
from harmonized_detection.scene import SceneConfig, generate_scene
from harmonized_detection.training import (
    NumericalError,
    TrainConfig,
    detect,
    evaluate_model,
    learning_rate,
    phase_mode,
    propose,
    train,
)

TINY_SCENES = SceneConfig(image_size=(32, 32), objects_per_scene=(1, 2),
                          num_classes=2, prior_stride=8, prior_size=12.0,
                          object_size=(8.0, 16.0), feature_dim=8, seed=3)


def tiny_train_config(**kwargs):
    options = dict(epochs=3, scenes_per_epoch=4, val_scenes=2,
                   lr_drop_epochs=(2,), mlc_enable_epoch=1)
    options.update(kwargs)
    return TrainConfig(**options)


@pytest.mark.parametrize("kwargs", [
    {"epochs": 0},
    {"scenes_per_epoch": 0},
    {"lr": 0.0},
    {"lr_drop_factor": 1.5},
    {"mlc_enable_epoch": 30},
    {"baseline_mode": "soft-labels"},
    {"eval_interval": -1},
])
def test_train_config_validation(kwargs):
    with pytest.raises(ValueError):
        TrainConfig(**kwargs)


def test_train_config_replace():
    cfg = TrainConfig()
    changed = cfg.replace(baseline_mode="fixed-threshold", iur=False)
    assert changed.baseline_mode == "fixed-threshold"
    assert not changed.iur
    assert changed.epochs == cfg.epochs
    assert changed.assignment is cfg.assignment
    assert cfg.baseline_mode == "mutual-labeling"


def test_learning_rate_schedule():
    cfg = TrainConfig()
    assert learning_rate(cfg, 1) == pytest.approx(0.2)
    assert learning_rate(cfg, 20) == pytest.approx(0.2)
    assert learning_rate(cfg, 21) == pytest.approx(0.02)
    assert learning_rate(cfg, 24) == pytest.approx(0.002)


def test_phase_mode():
    cfg = TrainConfig(baseline_mode="prediction-alignment")
    assert phase_mode(cfg, 12) == "fixed-threshold"
    assert phase_mode(cfg, 13) == "prediction-alignment"
    assert phase_mode(TrainConfig(mlc_enable_epoch=0), 1) == \
        "mutual-labeling"


def test_numerical_error_message():
    exc = NumericalError("the training loss is not finite", 3, 7)
    assert exc.epoch == 3
    assert exc.step == 7
    assert "epoch 3, step 7" in str(exc)


@pytest.mark.parametrize("baseline_mode", ["fixed-threshold",
                                           "mutual-labeling",
                                           "prediction-alignment"])
def test_train_is_deterministic(baseline_mode):
    cfg = tiny_train_config(baseline_mode=baseline_mode)
    params, log = train(TINY_SCENES, cfg)
    again, log_again = train(TINY_SCENES, cfg)
    assert np.array_equal(params.flatten(), again.flatten())
    assert log == log_again
    assert [record["epoch"] for record in log] == [1, 2, 3]
    assert [record["mode"] for record in log] == [
        "fixed-threshold", baseline_mode, baseline_mode]
    assert [record["lr"] for record in log] == pytest.approx(
        [0.1, 0.1, 0.01])
    for record in log:
        assert np.isfinite(record["loss"]["total"])
        assert "val" in record
    other, _ = train(TINY_SCENES, cfg, seed=4)
    assert not np.array_equal(params.flatten(), other.flatten())


def test_train_without_iur_leaves_the_iou_branch():
    params, _ = train(TINY_SCENES, tiny_train_config(iur=False))
    assert np.all(params["w_iur"] == 0)
    assert np.all(params["b_iur"] == 0)


def test_train_eval_interval():
    _, log = train(TINY_SCENES, tiny_train_config(eval_interval=0))
    assert ["val" in record for record in log] == [False, False, True]


def test_train_from_initial_params():
    initial = HeadParams.random(2, 8, np.random.default_rng(0))
    before = initial.flatten()
    params, _ = train(TINY_SCENES, tiny_train_config(), initial_params=initial)
    assert np.array_equal(initial.flatten(), before)
    zero_start, _ = train(TINY_SCENES, tiny_train_config())
    assert not np.array_equal(params.flatten(), zero_start.flatten())
    with pytest.raises(ValueError):
        train(TINY_SCENES, tiny_train_config(),
              initial_params=HeadParams.zeros(3, 8))


def test_detect_candidates():
    scene = generate_scene(TINY_SCENES, np.random.default_rng(0), image_id=9)
    params = HeadParams.zeros(2, 8)
    num_priors = scene.priors.shape[0]
    candidates = detect(params, scene, TINY_SCENES,
                        NmsConfig(score_threshold=0.0), suppress=False)
    assert len(candidates) == 2 * num_priors
    assert candidates.ids.tolist() == list(range(2 * num_priors))
    assert candidates.labels.tolist() == [0, 1] * num_priors
    assert np.all(candidates.image_ids == 9)
    assert np.all(candidates.boxes >= 0)
    assert np.all(candidates.boxes <= 32)
    assert np.all(candidates.raw_conf == 0.5)
    assert np.all(candidates.iou_pred == 0.5)
    # every confidence is 0.5, below the threshold nothing remains
    assert len(detect(params, scene, TINY_SCENES,
                      NmsConfig(score_threshold=0.6))) == 0
    suppressed = detect(params, scene, TINY_SCENES,
                        NmsConfig(score_threshold=0.0,
                                  iou_threshold=0.1))
    assert 0 < len(suppressed) < len(candidates)


def test_propose_is_class_agnostic():
    scene = generate_scene(TINY_SCENES, np.random.default_rng(1))
    params = HeadParams.random(2, 8, np.random.default_rng(2))
    proposals = propose(params, scene, TINY_SCENES)
    assert np.all(proposals.labels == 0)
    assert np.all(np.diff(proposals.score) <= 0)


def test_evaluate_model_report():
    scenes = [generate_scene(TINY_SCENES, np.random.default_rng(i), i)
              for i in range(3)]
    params = HeadParams.random(2, 8, np.random.default_rng(5))
    report = evaluate_model(params, scenes, TINY_SCENES)
    assert report.num_images == 3
    assert report.num_objects == sum(s.num_objects for s in scenes)
    assert 0.0 <= report.ap <= 1.0
    assert set(report.divergence) == {"population", "num_pairs", "pooled",
                                      "degenerate", "per_object_mean",
                                      "num_objects"}
    noisy = evaluate_model(params, scenes, TINY_SCENES,
                           nms_cfg=NmsConfig(mode="rescored"), iou_noise=0.1,
                           seed=1, with_divergence=False)
    assert noisy.divergence is None
    again = evaluate_model(params, scenes, TINY_SCENES,
                           nms_cfg=NmsConfig(mode="rescored"), iou_noise=0.1,
                           seed=1, with_divergence=False)
    assert noisy.to_dict() == again.to_dict()
