"""Scenario data model shared by the simulator, LiDAR pipeline and trainer."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

CLASSES = ("vehicle", "pedestrian", "cyclist")
POINT_FIELDS = ("x", "y", "z", "range", "intensity", "elongation")
LIDAR_FEATURES = ("range", "intensity", "elongation")

N_PAST = 11
N_FUTURE = 80
DT = 0.1


def class_index(name: str) -> int:
    try:
        return CLASSES.index(name)
    except ValueError:
        raise ValueError(f"unknown target class {name!r}; expected one of {CLASSES}") from None


@dataclass
class PointFrame:
    """One timestamp of LiDAR returns; ``points`` rows are (x, y, z, range, intensity, elongation)."""

    timestamp_index: int
    points: np.ndarray

    def __post_init__(self):
        self.points = np.asarray(self.points).reshape(-1, len(POINT_FIELDS))

    def __len__(self) -> int:
        return self.points.shape[0]


@dataclass
class OrientedBox:
    center: np.ndarray
    half_extents: np.ndarray
    heading: float

    def __post_init__(self):
        self.center = np.asarray(self.center, dtype=np.float64)
        self.half_extents = np.asarray(self.half_extents, dtype=np.float64)
        if np.any(self.half_extents <= 0):
            raise ValueError(f"box half extents must be positive, got {self.half_extents}")


@dataclass
class AgentTrack:
    """Past states (11 steps at 10 Hz) and ground-truth future (80 steps at 10 Hz).

    Past arrays are indexed by timestep; the last past step is the current time.
    ``size`` holds full box dimensions (length, width, height).
    """

    agent_id: int
    cls: str
    past_xyz: np.ndarray
    past_vel: np.ndarray
    past_heading: np.ndarray
    size: np.ndarray
    past_valid: np.ndarray
    future_xy: np.ndarray
    future_vel: np.ndarray
    future_valid: np.ndarray
    meta: dict = field(default_factory=dict)

    def box(self, t: int) -> OrientedBox:
        return OrientedBox(self.past_xyz[t], self.size[t] / 2.0, float(self.past_heading[t]))

    @property
    def current_pose(self) -> tuple[float, float, float, float]:
        t = N_PAST - 1
        x, y, z = (float(v) for v in self.past_xyz[t])
        return x, y, z, float(self.past_heading[t])

    @property
    def current_speed(self) -> float:
        return float(np.hypot(*self.past_vel[N_PAST - 1]))


@dataclass
class Scenario:
    scenario_id: str
    agents: list[AgentTrack]
    frames: list[PointFrame]
