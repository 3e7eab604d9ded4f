# Copyright (c) 2024 The harmonized-detection developers
#
# This software is made available under the MIT licence, see LICENCE.txt.

import json

import pytest
from harmonized_detection.benchmark import (
    BenchmarkConfig,
    benchmark_cells,
    format_report,
    run_benchmark,
)
from harmonized_detection.evaluation import EvalConfig
from harmonized_detection.scene import SceneConfig
from harmonized_detection.training import TrainConfig
from harmonized_detection.utils import dumps_json

TINY_SCENES = SceneConfig(image_size=(32, 32), objects_per_scene=(1, 2),
                          num_classes=2, prior_stride=8, prior_size=12.0,
                          object_size=(8.0, 16.0), feature_dim=8)
TINY_TRAINING = TrainConfig(epochs=2, scenes_per_epoch=3, val_scenes=2,
                            lr_drop_epochs=(), mlc_enable_epoch=1)


@pytest.mark.parametrize("kwargs", [
    {"seeds": []},
    {"seeds": [1, 1]},
    {"seeds": [-1]},
    {"alpha_sweep": [-0.5]},
    {"iou_noise_sigma": -1.0},
])
def test_benchmark_config_validation(kwargs):
    with pytest.raises(ValueError):
        BenchmarkConfig(**kwargs)


def test_benchmark_cells():
    names = [cell.name for cell in benchmark_cells(BenchmarkConfig())]
    assert names == ["baseline", "ml", "iur", "mlc", "alignment",
                     "baseline-unbiased"]
    cells = benchmark_cells(BenchmarkConfig(include_alignment=False,
                                            alpha_sweep=[0.5, 2],
                                            bias_check=False))
    assert [cell.name for cell in cells] == [
        "baseline", "ml", "iur", "mlc", "ml-alpha-0.5", "ml-alpha-2"]
    assert [cell.nms_mode for cell in cells[:4]] == [
        "standard", "standard", "rescored", "rescored"]
    assert cells[5].alpha == 2.0


def test_run_benchmark_report_structure():
    bench_cfg = BenchmarkConfig(seeds=[0, 1], alpha_sweep=[0.5])
    report = run_benchmark(TINY_SCENES, TINY_TRAINING,
                           eval_cfg=EvalConfig(ar_limits=(3, 10)),
                           bench_cfg=bench_cfg)
    assert report["schema"] == 1
    assert list(report["cells"]) == ["baseline", "ml", "iur", "mlc",
                                     "alignment", "ml-alpha-0.5",
                                     "baseline-unbiased"]
    for cell in report["cells"].values():
        assert [m["seed"] for m in cell["per_seed"]] == [0, 1]
        mean = cell["mean"]
        assert set(mean["ap"]) == {"standard", "rescored", "iou-nms",
                                   "rescored-noisy", "iou-nms-noisy"}
        assert set(mean["ar"]) == {"3", "10"}
        assert "seed" not in mean
    assert report["cells"]["baseline-unbiased"]["divergence_bias"] == 0.0
    names = [check["name"] for check in report["checks"]]
    assert names == ["ml-raises-divergence", "ml-raises-ap",
                     "rescoring-raises-ap", "noisy-iou-nms-below-rescored",
                     "mlc-best-of-grid", "ml-raises-ar",
                     "bias-causes-divergence"]
    for check in report["checks"]:
        assert isinstance(check["passed"], bool)
    assert report["config"]["benchmark"]["seeds"] == [0, 1]
    assert json.loads(dumps_json(report))["schema"] == 1

    text = format_report(report)
    assert text.startswith("Mean over seeds [0, 1]\n")
    for name in names:
        assert f"  {name}: " in text
    assert "AR@10" in text


def test_run_benchmark_is_reproducible():
    bench_cfg = BenchmarkConfig(seeds=[3], include_alignment=False)
    first = run_benchmark(TINY_SCENES, TINY_TRAINING, bench_cfg=bench_cfg)
    second = run_benchmark(TINY_SCENES, TINY_TRAINING, bench_cfg=bench_cfg)
    assert dumps_json(first) == dumps_json(second)


@pytest.mark.slow
def test_default_benchmark_passes_every_check():
    report = run_benchmark(SceneConfig(), TrainConfig())
    failed = [check["description"] for check in report["checks"]
              if not check["passed"]]
    assert failed == []
    assert len(report["checks"]) == 7
