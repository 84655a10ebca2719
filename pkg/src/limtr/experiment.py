"""Desk-scale comparison of the LiDAR model against the history-only baseline."""
from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np

from .dataset import build_dataset, split_indices
from .model import ModelConfig
from .sim import CueSpec, gen_scenario
from .train import OptimConfig, train

TOY_OPTIM = dict(epochs=30, lr_peak=2e-3, batch_size=64)


def toy_optim(seed: int = 0, **overrides) -> OptimConfig:
    """Optimizer settings used for every desk-scale run."""
    return OptimConfig(**{**TOY_OPTIM, "seed": seed, **overrides})


def generate(n_scenarios: int, cue_strength: float, data_seed: int = 7):
    return [gen_scenario((data_seed, i), None, CueSpec(cue_strength), scenario_id=f"scn{i:05d}")
            for i in range(n_scenarios)]


def mean_std(values) -> tuple[float, float]:
    """Mean and population standard deviation."""
    vals = [float(v) for v in values]
    mean = math.fsum(vals) / len(vals)
    return mean, math.sqrt(math.fsum((v - mean) ** 2 for v in vals) / len(vals))


@dataclass
class ArmResult:
    use_lidar: bool
    minade: list[float] = field(default_factory=list)
    map: list[float] = field(default_factory=list)
    seconds: float = 0.0

    def summary(self) -> dict:
        (ma, sa), (mm, sm) = mean_std(self.minade), mean_std(self.map)
        return {"minADE": ma, "minADE_std": sa, "mAP": mm, "mAP_std": sm}


@dataclass
class GainResult:
    cue_strength: float
    lidar: ArmResult
    baseline: ArmResult
    seconds: float = 0.0

    @property
    def minade_reduction(self) -> float:
        base = self.baseline.summary()["minADE"]
        return (base - self.lidar.summary()["minADE"]) / base

    def intervals_overlap(self, metric: str) -> bool:
        a, b = self.lidar.summary(), self.baseline.summary()
        lo = max(a[metric] - a[metric + "_std"], b[metric] - b[metric + "_std"])
        hi = min(a[metric] + a[metric + "_std"], b[metric] + b[metric + "_std"])
        return lo <= hi


def lidar_gain(n_scenarios: int = 2000, cue_strength: float = 1.0, seeds=(0, 1), data_seed: int = 7,
               model_overrides: dict | None = None, optim_overrides: dict | None = None, log=None) -> GainResult:
    """Train the toy LiDAR model and the no-LiDAR baseline on one synthetic corpus.

    Both arms share the scenarios, the held-out 20% split and the seeds; only
    the presence of the LiDAR encoder differs.
    """
    start = time.perf_counter()
    scenarios = generate(n_scenarios, cue_strength, data_seed)
    tr, va = split_indices(len(scenarios))
    base = ModelConfig.toy(**(model_overrides or {}))
    train_ds = build_dataset([scenarios[i] for i in tr], base.features, base.frames, base.n_points, data_seed)
    val_ds = build_dataset([scenarios[i] for i in va], base.features, base.frames, base.n_points, data_seed)
    arms = {True: ArmResult(True), False: ArmResult(False)}
    for use_lidar, arm in arms.items():
        for seed in seeds:
            t0 = time.perf_counter()
            cfg = ModelConfig.from_dict({**base.to_dict(), "use_lidar": use_lidar, "seed": seed})
            res = train(cfg, train_ds, toy_optim(seed, **(optim_overrides or {})), val_ds)
            arm.minade.append(res.report.overall["minADE"])
            arm.map.append(res.report.overall["mAP"])
            arm.seconds += time.perf_counter() - t0
            if log:
                log(f"cue={cue_strength} lidar={use_lidar} seed={seed} minADE={arm.minade[-1]:.4f} "
                    f"mAP={arm.map[-1]:.4f} ({time.perf_counter() - t0:.0f}s)")
    return GainResult(cue_strength, arms[True], arms[False], time.perf_counter() - start)
