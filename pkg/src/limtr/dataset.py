"""Per-target training samples assembled from scenario bundles."""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import checkpoint
from .data import Scenario
from .head import history_features
from .lidar import build_lidar_tensor, normalize_selection, target_seed
from .metrics import EvalConfig, classify_behavior
from .sim import read_bundle


@dataclass
class Dataset:
    """Stacked per-target arrays; all coordinates in each target's current agent frame."""

    hist: np.ndarray        # (B, 11, 11)
    hist_valid: np.ndarray  # (B, 11)
    fut_xy: np.ndarray      # (B, 80, 2)
    fut_vel: np.ndarray     # (B, 80, 2)
    fut_valid: np.ndarray   # (B, 80)
    v0: np.ndarray          # (B,)
    classes: list[str]
    buckets: list[str]
    keys: list[tuple[str, int]]
    lidar: np.ndarray | None = None       # (B, T, N, D)
    lidar_mask: np.ndarray | None = None  # (B, T, N)
    meta: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.classes)

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx, dtype=int)
        pick = lambda a: None if a is None else a[idx]
        return Dataset(self.hist[idx], self.hist_valid[idx], self.fut_xy[idx], self.fut_vel[idx],
                       self.fut_valid[idx], self.v0[idx], [self.classes[i] for i in idx],
                       [self.buckets[i] for i in idx], [self.keys[i] for i in idx],
                       pick(self.lidar), pick(self.lidar_mask), dict(self.meta))


def _to_agent(track):
    x0, y0, _, h0 = track.current_pose
    c, s = np.cos(h0), np.sin(h0)
    rot = np.array([[c, s], [-s, c]])
    xy = (track.future_xy.astype(np.float64) - np.array([x0, y0])) @ rot.T
    vel = track.future_vel.astype(np.float64) @ rot.T
    return xy, vel


def build_dataset(scenarios: list[Scenario], features=("intensity",), frames: int = 11, n_points: int = 512,
                  seed: int = 0, with_lidar: bool = True, eval_config: EvalConfig = EvalConfig()) -> Dataset:
    hist, hvalid, fxy, fvel, fvalid, v0, classes, buckets, keys = ([] for _ in range(9))
    lidar, lmask = [], []
    for scn in scenarios:
        for tr in scn.agents:
            h, hv = history_features(tr)
            xy, vel = _to_agent(tr)
            hist.append(h)
            hvalid.append(hv)
            fxy.append(xy)
            fvel.append(vel)
            fvalid.append(tr.future_valid)
            v0.append(tr.current_speed)
            classes.append(tr.cls)
            buckets.append(classify_behavior(xy, vel, tr.future_valid, config=eval_config))
            keys.append((scn.scenario_id, tr.agent_id))
            if with_lidar:
                lt = build_lidar_tensor(scn.frames, tr, features, n_points,
                                        target_seed(seed, scn.scenario_id, tr.agent_id), frames)
                lidar.append(lt.data)
                lmask.append(lt.mask)
    if not classes:
        raise ValueError("no targets found in the given scenarios")
    ds = Dataset(np.asarray(hist, np.float32), np.asarray(hvalid, bool), np.asarray(fxy, np.float32),
                 np.asarray(fvel, np.float32), np.asarray(fvalid, bool), np.asarray(v0), classes, buckets, keys)
    if with_lidar:
        ds.lidar = np.stack(lidar)
        ds.lidar_mask = np.stack(lmask)
    ds.meta = {"features": list(features) if not isinstance(features, str) else [features],
               "frames": frames, "n_points": n_points, "seed": seed}
    return ds


def scenario_dirs(data_dir) -> list[Path]:
    root = Path(data_dir)
    dirs = sorted(p for p in root.iterdir() if (p / "header.json").is_file())
    if not dirs:
        raise FileNotFoundError(f"no scenario bundles under {root}")
    return dirs


def load_scenarios(data_dir) -> list[Scenario]:
    return [read_bundle(d) for d in scenario_dirs(data_dir)]


def split_indices(n_scenarios: int, val_fraction: float = 0.2) -> tuple[np.ndarray, np.ndarray]:
    """Deterministic scenario split: every round(1/val_fraction)-th scenario is held out."""
    stride = max(int(round(1.0 / val_fraction)), 2)
    idx = np.arange(n_scenarios)
    val = idx % stride == stride - 1
    return idx[~val], idx[val]


def save_lidar_cache(path, scenarios: list[Scenario], features=("intensity",), frames: int = 11,
                     n_points: int = 512, seed: int = 0) -> int:
    """Write preprocessed tensors as checkpoint records ``lidar/<scenario>/<agent>`` (+ ``/mask``)."""
    arrays = {}
    for scn in scenarios:
        for tr in scn.agents:
            lt = build_lidar_tensor(scn.frames, tr, features, n_points,
                                    target_seed(seed, scn.scenario_id, tr.agent_id), frames)
            arrays[f"lidar/{scn.scenario_id}/{tr.agent_id}"] = lt.data
            arrays[f"lidar/{scn.scenario_id}/{tr.agent_id}/mask"] = lt.mask.astype(np.float32)
    checkpoint.save(path, arrays)
    return len(arrays) // 2


def cache_name(features=("intensity",), frames: int = 11, n_points: int = 512, seed: int = 0) -> str:
    """File name that identifies a LiDAR cache by its preprocessing settings."""
    feats = "-".join(normalize_selection(features)) or "none"
    return f"lidar_{feats}_f{frames}_n{n_points}_s{seed}.bin"


def attach_lidar_cache(ds: Dataset, path) -> Dataset:
    """Fill ``ds.lidar`` from a cache written by :func:`save_lidar_cache`."""
    arrays = checkpoint.load(path)
    try:
        data = [arrays[f"lidar/{s}/{a}"] for s, a in ds.keys]
        mask = [arrays[f"lidar/{s}/{a}/mask"] > 0.5 for s, a in ds.keys]
    except KeyError as exc:
        raise KeyError(f"LiDAR cache {path} has no entry {exc.args[0]}") from None
    ds.lidar = np.stack(data)
    ds.lidar_mask = np.stack(mask)
    return ds
