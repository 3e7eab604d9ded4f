# Copyright (c) 2024 The harmonized-detection developers
#
# This software is made available under the MIT licence, see LICENCE.txt.

"""Ablation benchmark of mutual labeling and IoU rescoring.

Every *cell* of the benchmark is a training recipe: the 2×2 grid of
mutual labeling (on/off) × IoU prediction (on/off), optionally the
prediction-alignment recipe, an α sweep of mutual labeling, and a baseline
trained on scenes without divergence bias. Each cell is trained once per
seed, and evaluated on the seed's validation scenes with every NMS mode
(and with noise-degraded IoU predictions). Metrics are averaged over the
seeds, and the expected directions of the effects are checked and
reported as passed or failed.
"""

import logging

import numpy as np
from tqdm import tqdm

from harmonized_detection.assignment import AssignmentConfig
from harmonized_detection.evaluation import EvalConfig
from harmonized_detection.postprocess import NMS_MODES, NmsConfig
from harmonized_detection.scene import SceneConfig, generate_scenes
from harmonized_detection.training import evaluate_model, train
from harmonized_detection.utils import (
    STREAM_TRAIN_SCENES,
    STREAM_VAL_SCENES,
    format_table,
)

__all__ = [
    "BenchmarkConfig",
    "Cell",
    "benchmark_cells",
    "run_benchmark",
    "format_report",
]


logger = logging.getLogger(__name__)

NOISY_MODES = ("rescored", "iou-nms")


class BenchmarkConfig:
    """Parameters of the benchmark.

    :param seeds: seeds of the repeated runs
    :param bool include_alignment: add the prediction-alignment cell
    :param alpha_sweep: α values of additional mutual-labeling cells (α
        only matters with the IoU-band matcher, the inside-box matcher
        leaves no ignored priors)
    :param float iou_noise_sigma: noise added to the IoU predictions for
        the noise-degraded evaluations
    :param bool bias_check: add a baseline cell trained on scenes without
        divergence bias
    :param float min_divergence_gain: smallest mean divergence improvement
        of mutual labeling counted as a pass
    """
    def __init__(self, seeds=(0, 1, 2, 3, 4), include_alignment=True,
                 alpha_sweep=(), iou_noise_sigma=0.25, bias_check=True,
                 min_divergence_gain=0.05):
        seeds = [int(s) for s in seeds]
        if not seeds:
            raise ValueError("seeds must not be empty")
        if len(set(seeds)) != len(seeds) or any(s < 0 for s in seeds):
            raise ValueError("seeds must be distinct non-negative integers")
        if any(not a >= 0 for a in alpha_sweep):
            raise ValueError("alpha_sweep values must be >= 0")
        if not iou_noise_sigma >= 0:
            raise ValueError("iou_noise_sigma must be >= 0")
        self.seeds = tuple(seeds)
        self.include_alignment = bool(include_alignment)
        self.alpha_sweep = tuple(float(a) for a in alpha_sweep)
        self.iou_noise_sigma = float(iou_noise_sigma)
        self.bias_check = bool(bias_check)
        self.min_divergence_gain = float(min_divergence_gain)

    def to_dict(self):
        return {
            "seeds": list(self.seeds),
            "include_alignment": self.include_alignment,
            "alpha_sweep": list(self.alpha_sweep),
            "iou_noise_sigma": self.iou_noise_sigma,
            "bias_check": self.bias_check,
            "min_divergence_gain": self.min_divergence_gain,
        }


class Cell:
    """One training recipe of the benchmark.

    :param str name: row name in the report
    :param str baseline_mode: labeling after the switch epoch
    :param bool iur: train the IoU prediction branch
    :param float alpha: ignored-sample weight exponent (``None`` keeps
        the configured value)
    :param float divergence_bias: scene divergence bias (``None`` keeps the
        configured value)
    """
    def __init__(self, name, baseline_mode, iur, alpha=None,
                 divergence_bias=None):
        self.name = name
        self.baseline_mode = baseline_mode
        self.iur = iur
        self.alpha = alpha
        self.divergence_bias = divergence_bias

    @property
    def nms_mode(self):
        """NMS mode that goes with the recipe."""
        return "rescored" if self.iur else "standard"

    def to_dict(self):
        return {
            "baseline_mode": self.baseline_mode,
            "iur": self.iur,
            "alpha": self.alpha,
            "divergence_bias": self.divergence_bias,
            "nms_mode": self.nms_mode,
        }


def benchmark_cells(bench_cfg):
    """List the cells of a benchmark, the 2×2 grid first.

    :rtype: list
    """
    cells = [
        Cell("baseline", "fixed-threshold", False),
        Cell("ml", "mutual-labeling", False),
        Cell("iur", "fixed-threshold", True),
        Cell("mlc", "mutual-labeling", True),
    ]
    if bench_cfg.include_alignment:
        cells.append(Cell("alignment", "prediction-alignment", False))
    for alpha in bench_cfg.alpha_sweep:
        cells.append(Cell(f"ml-alpha-{alpha:g}", "mutual-labeling", False,
                          alpha=alpha))
    if bench_cfg.bias_check:
        cells.append(Cell("baseline-unbiased", "fixed-threshold", False,
                          divergence_bias=0.0))
    return cells


def _cell_configs(cell, scene_cfg, train_cfg):
    if cell.divergence_bias is not None:
        scene_cfg = SceneConfig(**{**scene_cfg.to_dict(),
                                   "divergence_bias": cell.divergence_bias})
    assignment = train_cfg.assignment
    if cell.alpha is not None:
        assignment = AssignmentConfig(**{**assignment.to_dict(),
                                         "alpha": cell.alpha})
    # Validation happens once after training, outside of the loop
    train_cfg = train_cfg.replace(baseline_mode=cell.baseline_mode,
                                  iur=cell.iur, assignment=assignment,
                                  eval_interval=0)
    return scene_cfg, train_cfg


def _evaluate_cell(params, val_scenes, scene_cfg, train_cfg, nms_cfg,
                   eval_cfg, bench_cfg, seed):
    metrics = {"ap": {}, "ap50": {}, "ap75": {}}
    standard = NmsConfig(**{**nms_cfg.to_dict(), "mode": "standard"})
    report = evaluate_model(params, val_scenes, scene_cfg,
                            train_cfg.assignment, standard, eval_cfg,
                            seed=seed)
    metrics["ar"] = {str(k): v for k, v in report.ar_at_k.items()}
    metrics["divergence"] = report.divergence["pooled"]
    metrics["divergence_per_object"] = report.divergence["per_object_mean"]
    no_ar = EvalConfig(**{**eval_cfg.to_dict(), "ar_limits": ()})
    variants = [(mode, mode, 0.0) for mode in NMS_MODES]
    variants += [(f"{mode}-noisy", mode, bench_cfg.iou_noise_sigma)
                 for mode in NOISY_MODES]
    for name, mode, noise in variants:
        if name == "standard":
            result = report
        else:
            result = evaluate_model(
                params, val_scenes, scene_cfg, train_cfg.assignment,
                NmsConfig(**{**nms_cfg.to_dict(), "mode": mode}),
                no_ar, iou_noise=noise, seed=seed, with_divergence=False)
        metrics["ap"][name] = result.ap
        metrics["ap50"][name] = result.ap50
        metrics["ap75"][name] = result.ap75
    return metrics


def _mean(values):
    values = [v for v in values if v is not None]
    return float(np.mean(values)) if values else None


def _aggregate(per_seed):
    """Mean over seeds of every (possibly nested) metric."""
    first = per_seed[0]
    if isinstance(first, dict):
        return {key: _aggregate([m[key] for m in per_seed]) for key in first}
    return _mean(per_seed)


def _mean_gain(cells, better, worse, getter):
    gains = []
    for b, w in zip(cells[better]["per_seed"], cells[worse]["per_seed"]):
        vb, vw = getter(b), getter(w)
        if vb is None or vw is None:
            return None
        gains.append(vb - vw)
    return float(np.mean(gains))


def _check(name, description, value, passed):
    return {
        "name": name,
        "description": description,
        "value": value,
        "passed": bool(passed) if value is not None else False,
    }


def _natural_ap(cells, name):
    mode = cells[name]["nms_mode"]
    return cells[name]["mean"]["ap"][mode]


def _directional_checks(cells, bench_cfg):
    checks = []

    def ap_of(mode):
        return lambda m: m["ap"][mode]

    gain = _mean_gain(cells, "ml", "baseline", lambda m: m["divergence"])
    checks.append(_check(
        "ml-raises-divergence",
        "mutual labeling raises the divergence metric over the fixed rule "
        f"by at least {bench_cfg.min_divergence_gain:g} on average",
        gain, gain is not None and gain >= bench_cfg.min_divergence_gain))
    gain = _mean_gain(cells, "ml", "baseline", ap_of("standard"))
    checks.append(_check(
        "ml-raises-ap",
        "mutual labeling raises the AP over the fixed rule on average",
        gain, gain is not None and gain > 0))
    iur = cells["iur"]["per_seed"]
    gains = [m["ap"]["rescored"] - m["ap"]["standard"] for m in iur
             if m["ap"]["rescored"] is not None
             and m["ap"]["standard"] is not None]
    gain = float(np.mean(gains)) if gains else None
    checks.append(_check(
        "rescoring-raises-ap",
        "with IoU prediction, rescored NMS beats standard NMS on average",
        gain, gain is not None and gain > 0))
    gaps = [m["ap"]["rescored-noisy"] - m["ap"]["iou-nms-noisy"]
            for m in iur if m["ap"]["rescored-noisy"] is not None
            and m["ap"]["iou-nms-noisy"] is not None]
    gap = float(np.mean(gaps)) if gaps else None
    checks.append(_check(
        "noisy-iou-nms-below-rescored",
        f"with IoU predictions degraded by noise of standard deviation "
        f"{bench_cfg.iou_noise_sigma:g}, iou-nms scores below rescored NMS",
        gap, gap is not None and gap > 0))
    grid = {name: _natural_ap(cells, name)
            for name in ("baseline", "ml", "iur", "mlc")}
    best = max((v for v in grid.values() if v is not None), default=None)
    checks.append(_check(
        "mlc-best-of-grid",
        "mutual labeling with IoU rescoring has the highest mean AP of the "
        "2×2 grid",
        grid["mlc"], grid["mlc"] is not None and grid["mlc"] == best))
    ar_ml = cells["ml"]["mean"]["ar"]
    ar_base = cells["baseline"]["mean"]["ar"]
    deltas = {k: (ar_ml[k] - ar_base[k]
                  if ar_ml[k] is not None and ar_base[k] is not None
                  else None) for k in ar_ml}
    checks.append(_check(
        "ml-raises-ar",
        "mutual labeling raises the proposal AR@k for every k",
        deltas, deltas and all(d is not None and d > 0
                               for d in deltas.values())))
    if "baseline-unbiased" in cells:
        gain = _mean_gain(cells, "baseline-unbiased", "baseline",
                          lambda m: m["divergence"])
        checks.append(_check(
            "bias-causes-divergence",
            "without divergence bias in the scenes, the baseline divergence "
            "metric is higher",
            gain, gain is not None and gain > 0))
    return checks


def run_benchmark(scene_cfg, train_cfg, nms_cfg=None, eval_cfg=None,
                  bench_cfg=None, progress=False):
    """Train and evaluate every cell of the benchmark for every seed.

    :returns: the report, a JSON-serializable dict
    :rtype: dict
    :raises NumericalError: if a training run fails
    """
    if nms_cfg is None:
        nms_cfg = NmsConfig()
    if eval_cfg is None:
        eval_cfg = EvalConfig()
    if bench_cfg is None:
        bench_cfg = BenchmarkConfig()
    cells = benchmark_cells(bench_cfg)
    results = {cell.name: dict(cell.to_dict(), per_seed=[]) for cell in cells}
    jobs = [(seed, cell) for seed in bench_cfg.seeds for cell in cells]
    scenes_cache = {}
    for seed, cell in tqdm(jobs, desc="benchmark", unit="run",
                           leave=True, disable=not progress):
        cell_scene_cfg, cell_train_cfg = _cell_configs(cell, scene_cfg,
                                                       train_cfg)
        key = (seed, cell_scene_cfg.divergence_bias)
        if key not in scenes_cache:
            scenes_cache.clear()
            train_scenes = generate_scenes(cell_scene_cfg, seed,
                                           train_cfg.scenes_per_epoch,
                                           STREAM_TRAIN_SCENES)
            val_scenes = generate_scenes(cell_scene_cfg, seed,
                                         train_cfg.val_scenes,
                                         STREAM_VAL_SCENES,
                                         first_image_id=len(train_scenes))
            scenes_cache[key] = (train_scenes, val_scenes)
        train_scenes, val_scenes = scenes_cache[key]
        logger.info("seed %d: training cell %s", seed, cell.name)
        params, log = train(cell_scene_cfg, cell_train_cfg, nms_cfg,
                            eval_cfg, seed=seed, train_scenes=train_scenes,
                            val_scenes=val_scenes)
        metrics = _evaluate_cell(params, val_scenes, cell_scene_cfg,
                                 cell_train_cfg, nms_cfg, eval_cfg,
                                 bench_cfg, seed)
        metrics["seed"] = seed
        metrics["final_loss"] = log[-1]["loss"]["total"]
        results[cell.name]["per_seed"].append(metrics)
    for result in results.values():
        per_seed = [{k: v for k, v in m.items() if k != "seed"}
                    for m in result["per_seed"]]
        result["mean"] = _aggregate(per_seed)
    checks = _directional_checks(results, bench_cfg)
    for check in checks:
        logger.info("%s: %s", "PASS" if check["passed"] else "FAIL",
                    check["description"])
    return {
        "schema": 1,
        "cells": results,
        "checks": checks,
        "config": {
            "scene": scene_cfg.to_dict(),
            "train": train_cfg.to_dict(),
            "assignment": train_cfg.assignment.to_dict(),
            "losses": train_cfg.losses.to_dict(),
            "nms": nms_cfg.to_dict(),
            "eval": eval_cfg.to_dict(),
            "benchmark": bench_cfg.to_dict(),
        },
    }


def format_report(report):
    """Render a benchmark report as plain-text tables.

    :param dict report: output of :func:`run_benchmark`
    :rtype: str
    """
    cells = report["cells"]
    ar_keys = list(next(iter(cells.values()))["mean"]["ar"])
    header = (["cell", "nms", "AP", "AP50", "AP75"]
              + [f"AR@{k}" for k in ar_keys] + ["divergence"])
    rows = []
    for name, cell in cells.items():
        mean = cell["mean"]
        mode = cell["nms_mode"]
        rows.append([name, mode, mean["ap"][mode], mean["ap50"][mode],
                     mean["ap75"][mode]]
                    + [mean["ar"][k] for k in ar_keys]
                    + [mean["divergence"]])
    modes = list(next(iter(cells.values()))["mean"]["ap"])
    nms_rows = [[name] + [cell["mean"]["ap"][m] for m in modes]
                for name, cell in cells.items()]
    lines = [
        f"Mean over seeds {report['config']['benchmark']['seeds']}",
        "",
        format_table(header, rows),
        "AP by NMS mode",
        "",
        format_table(["cell"] + modes, nms_rows),
        "Directional checks",
        "",
    ]
    for check in report["checks"]:
        lines.append(f"{'PASS' if check['passed'] else 'FAIL'}  "
                     f"{check['name']}: {check['description']}")
    return "\n".join(lines) + "\n"
