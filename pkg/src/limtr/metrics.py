"""Motion-prediction challenge metrics: minADE, miss rate and behavior-bucketed mAP.

Predictions and ground truth are evaluated at 2 Hz. Sums use exactly-rounded
summation (``math.fsum``) so results do not depend on reduction order.
"""
from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field

import numpy as np

from .data import CLASSES

BUCKETS = ("stationary", "straight", "straight-left", "straight-right",
           "left-turn", "right-turn", "left-u-turn", "right-u-turn")


@dataclass
class EvalConfig:
    horizons: tuple[int, ...] = (3, 5, 8)
    eval_rate: int = 2
    source_rate: int = 10
    lon_thresholds: tuple[float, ...] = (2.0, 3.6, 6.0)
    lat_thresholds: tuple[float, ...] = (1.0, 1.8, 3.0)
    speed_lower: float = 1.4
    speed_upper: float = 11.0
    scale_lower: float = 0.5
    scale_upper: float = 1.0
    n_modes: int = 6
    stationary_dist: float = 2.0
    uturn_angle: float = 3 * math.pi / 4
    turn_angle: float = math.pi / 6
    lateral_dev: float = 1.6
    moving_speed: float = 0.1

    def horizon_steps(self, horizon: int) -> int:
        return int(horizon * self.eval_rate)

    def thresholds(self, horizon: int) -> tuple[float, float]:
        i = self.horizons.index(horizon)
        return self.lon_thresholds[i], self.lat_thresholds[i]


def speed_scale(v0: float, config: EvalConfig = EvalConfig()) -> float:
    """Piecewise-linear threshold scale in [scale_lower, scale_upper]."""
    if v0 <= config.speed_lower:
        return config.scale_lower
    if v0 >= config.speed_upper:
        return config.scale_upper
    frac = (v0 - config.speed_lower) / (config.speed_upper - config.speed_lower)
    return config.scale_lower + frac * (config.scale_upper - config.scale_lower)


def decimate(arr, config: EvalConfig = EvalConfig(), axis: int = -2):
    """Keep every ``source_rate/eval_rate``-th step ending on the last one (80 -> 16 steps)."""
    arr = np.asarray(arr)
    if arr.ndim == 1:
        axis = 0
    n = arr.shape[axis]
    factor = config.source_rate // config.eval_rate
    expected = max(config.horizons) * config.source_rate
    if n != expected:
        raise ValueError(f"decimate expects {expected} steps along axis {axis}, got {n}")
    idx = np.arange(factor - 1, n, factor)
    return np.take(arr, idx, axis=axis)


def min_ade(preds, gt_xy, gt_valid, horizon: int, config: EvalConfig = EvalConfig()):
    """Minimum over modes of the mean L2 error over valid steps up to ``horizon``.

    Returns None (skip) when no gt step is valid within the horizon.
    """
    h = config.horizon_steps(horizon)
    valid = np.asarray(gt_valid[:h], dtype=bool)
    if not valid.any():
        return None
    steps = np.nonzero(valid)[0]
    best = math.inf
    for mode in np.asarray(preds):
        d = mode[steps] - gt_xy[steps]
        err = np.sqrt(d[:, 0] * d[:, 0] + d[:, 1] * d[:, 1])
        best = min(best, math.fsum(err.tolist()) / len(steps))
    return best


def gt_heading(gt_vel, step: int) -> float:
    vx, vy = gt_vel[step]
    return math.atan2(float(vy), float(vx))


def correct_modes(preds, gt_xy, gt_vel, gt_valid, horizon: int, v0: float,
                  config: EvalConfig = EvalConfig()):
    """Per-mode correctness at the horizon, or None when the horizon step is invalid."""
    i = config.horizon_steps(horizon) - 1
    if not gt_valid[i]:
        return None
    lon_th, lat_th = config.thresholds(horizon)
    s = speed_scale(v0, config)
    theta = gt_heading(gt_vel, i)
    c, sn = math.cos(theta), math.sin(theta)
    out = []
    for mode in np.asarray(preds):
        dx = float(mode[i, 0] - gt_xy[i, 0])
        dy = float(mode[i, 1] - gt_xy[i, 1])
        lon = dx * c + dy * sn
        lat = -dx * sn + dy * c
        out.append(abs(lon) <= s * lon_th and abs(lat) <= s * lat_th)
    return out


def is_miss(preds, gt_xy, gt_vel, gt_valid, horizon: int, v0: float,
            config: EvalConfig = EvalConfig()):
    """True when no mode's final position lies inside both scaled thresholds; None to skip."""
    ok = correct_modes(preds, gt_xy, gt_vel, gt_valid, horizon, v0, config)
    if ok is None:
        return None
    return not any(ok)


def _wrap(angle: float) -> float:
    return (angle + math.pi) % (2 * math.pi) - math.pi


def classify_behavior(gt_xy, gt_vel, gt_valid=None, start_xy=(0.0, 0.0), start_heading: float = 0.0,
                      config: EvalConfig = EvalConfig()) -> str:
    """Bucket a gt trajectory by displacement, heading change and lateral offset."""
    gt_xy = np.asarray(gt_xy, dtype=np.float64)
    gt_vel = np.asarray(gt_vel, dtype=np.float64)
    valid = np.ones(len(gt_xy), bool) if gt_valid is None else np.asarray(gt_valid, bool)
    idx = np.nonzero(valid)[0]
    if len(idx) == 0:
        return "stationary"
    end = gt_xy[idx[-1]] - np.asarray(start_xy, dtype=np.float64)
    if math.hypot(*end) < config.stationary_dist:
        return "stationary"
    final_heading = start_heading
    for i in idx[::-1]:
        if math.hypot(*gt_vel[i]) > config.moving_speed:
            final_heading = math.atan2(gt_vel[i, 1], gt_vel[i, 0])
            break
    dh = _wrap(final_heading - start_heading)
    if abs(dh) > config.uturn_angle:
        return "left-u-turn" if dh > 0 else "right-u-turn"
    if abs(dh) > config.turn_angle:
        return "left-turn" if dh > 0 else "right-turn"
    lateral = -end[0] * math.sin(start_heading) + end[1] * math.cos(start_heading)
    if abs(lateral) > config.lateral_dev:
        return "straight-left" if lateral > 0 else "straight-right"
    return "straight"


@dataclass
class EvalCase:
    """One target's predictions and gt at the evaluation rate."""

    probs: np.ndarray     # (K,)
    preds: np.ndarray     # (K, S, 2)
    gt_xy: np.ndarray     # (S, 2)
    gt_vel: np.ndarray    # (S, 2)
    gt_valid: np.ndarray  # (S,)
    v0: float
    bucket: str
    cls: str = "vehicle"


def average_precision(ranked_correct: list[tuple[int, bool]], n_gt: int) -> float:
    """AP for a ranked list of (target, geometrically-correct) with at most one TP per target.

    Uses the monotone precision envelope.
    """
    matched: set[int] = set()
    tp_flags, precisions = [], []
    tp = 0
    for rank, (target, ok) in enumerate(ranked_correct, start=1):
        hit = ok and target not in matched
        if hit:
            matched.add(target)
            tp += 1
        tp_flags.append(hit)
        precisions.append(tp / rank)
    envelope = 0.0
    area = []
    for hit, p in zip(reversed(tp_flags), reversed(precisions)):
        envelope = max(envelope, p)
        if hit:
            area.append(envelope)
    return math.fsum(area) / n_gt


def compute_map(cases: list[EvalCase], horizon: int, config: EvalConfig = EvalConfig()):
    """Mean over behavior buckets (with >= 1 evaluable gt) of AP; None when nothing is evaluable."""
    per_bucket: dict[str, list] = {}
    counts: dict[str, int] = {}
    for t, case in enumerate(cases):
        ok = correct_modes(case.preds, case.gt_xy, case.gt_vel, case.gt_valid, horizon, case.v0, config)
        if ok is None:
            continue
        counts[case.bucket] = counts.get(case.bucket, 0) + 1
        entries = per_bucket.setdefault(case.bucket, [])
        for k, (p, c) in enumerate(zip(np.asarray(case.probs).tolist(), ok)):
            entries.append((-p, t, k, c))
    if not counts:
        return None
    aps = []
    for bucket in BUCKETS:
        if bucket not in counts:
            continue
        ranked = sorted(per_bucket[bucket], key=lambda e: (e[0], e[1], e[2]))
        aps.append(average_precision([(t, c) for _, t, _, c in ranked], counts[bucket]))
    return math.fsum(aps) / len(aps)


@dataclass
class MetricsReport:
    cells: dict[tuple[str, int], dict[str, float]]
    by_class: dict[str, dict[str, float]] = field(default_factory=dict)
    overall: dict[str, float] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "cells": [{"class": c, "horizon": h, **v} for (c, h), v in sorted(
                self.cells.items(), key=lambda kv: (CLASSES.index(kv[0][0]), kv[0][1]))],
            "by_class": self.by_class,
            "overall": self.overall,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["class", "horizon", "minADE", "MR", "mAP", "count"])
        for row in self.to_dict()["cells"]:
            writer.writerow([row["class"], row["horizon"], repr(row["minADE"]), repr(row["MR"]),
                             repr(row["mAP"]), row["count"]])
        return buf.getvalue()

    def table(self) -> str:
        """Per-class columns (mAP, minADE, MR), averaged over horizons."""
        head = f"{'':8s}{'mAP':>8s}{'minADE':>9s}" + "".join(
            f"  {c[:4]}:mAP  minADE      MR" for c in self.by_class)
        vals = f"{'avg':8s}{self.overall['mAP']:8.4f}{self.overall['minADE']:9.4f}" + "".join(
            f"  {v['mAP']:8.4f}{v['minADE']:8.4f}{v['MR']:8.4f}" for v in self.by_class.values())
        return head + "\n" + vals


def aggregate(cells: dict[tuple[str, int], dict[str, float]]) -> MetricsReport:
    """Average cells over horizons per class, then over classes."""
    cells = {k: v for k, v in cells.items() if v is not None}
    if not cells:
        raise ValueError("no evaluable cases to aggregate")
    by_class: dict[str, dict[str, float]] = {}
    for cls in CLASSES:
        rows = [v for (c, _), v in sorted(cells.items()) if c == cls]
        if rows:
            by_class[cls] = {m: math.fsum(r[m] for r in rows) / len(rows) for m in ("minADE", "MR", "mAP")}
    overall = {m: math.fsum(v[m] for v in by_class.values()) / len(by_class) for m in ("minADE", "MR", "mAP")}
    return MetricsReport(cells, by_class, overall)


def evaluate_cases(cases: list[EvalCase], config: EvalConfig = EvalConfig()) -> MetricsReport:
    cells = {}
    for cls in CLASSES:
        group = [c for c in cases if c.cls == cls]
        if not group:
            continue
        for h in config.horizons:
            ades = [min_ade(c.preds, c.gt_xy, c.gt_valid, h, config) for c in group]
            misses = [is_miss(c.preds, c.gt_xy, c.gt_vel, c.gt_valid, h, c.v0, config) for c in group]
            ades = [a for a in ades if a is not None]
            misses = [m for m in misses if m is not None]
            m_ap = compute_map(group, h, config)
            if not ades or not misses or m_ap is None:
                continue
            cells[(cls, h)] = {
                "minADE": math.fsum(ades) / len(ades),
                "MR": sum(misses) / len(misses),
                "mAP": m_ap,
                "count": len(misses),
            }
    return aggregate(cells)
