"""Per-target LiDAR preprocessing: crop, agent-frame transform, sample/pad, featurize."""
from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np

from .data import CLASSES, LIDAR_FEATURES, N_PAST, AgentTrack, OrientedBox, PointFrame, class_index

FRAME_INDICES = {
    11: tuple(range(11)),
    6: (0, 2, 4, 6, 8, 10),
    3: (0, 5, 10),
    1: (10,),
}


@dataclass
class LidarTensor:
    data: np.ndarray  # (T, N, D)
    mask: np.ndarray  # (T, N) bool
    target_class: str


def normalize_selection(selection) -> tuple[str, ...]:
    """Return the feature subset in the fixed order range, intensity, elongation."""
    if selection is None or selection == "none":
        return ()
    if selection == "all":
        return LIDAR_FEATURES
    if isinstance(selection, str):
        selection = [selection]
    chosen = set(selection)
    unknown = chosen - set(LIDAR_FEATURES)
    if unknown:
        raise ValueError(f"unknown LiDAR features {sorted(unknown)}; choose from {LIDAR_FEATURES}")
    return tuple(f for f in LIDAR_FEATURES if f in chosen)


def feature_dim(selection) -> int:
    return 3 + len(normalize_selection(selection)) + len(CLASSES)


def target_seed(global_seed: int, scenario_id: str, agent_id: int) -> int:
    """Per-(scenario, agent) sampling seed: first 8 bytes of blake2b("seed:scenario:agent")."""
    key = f"{global_seed}:{scenario_id}:{agent_id}".encode()
    return int.from_bytes(hashlib.blake2b(key, digest_size=8).digest(), "little")


def _rot(heading: float) -> np.ndarray:
    c, s = np.cos(heading), np.sin(heading)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def crop_to_box(frame: PointFrame, box: OrientedBox, margin: float = 0.15) -> PointFrame:
    """Keep points inside ``box`` with half extents scaled by (1 + margin) on all axes."""
    if margin < 0:
        raise ValueError("margin must be non-negative")
    pts = frame.points
    local = (pts[:, :3].astype(np.float64) - box.center) @ _rot(box.heading)
    inside = np.all(np.abs(local) <= (1.0 + margin) * box.half_extents, axis=1)
    return PointFrame(frame.timestamp_index, pts[inside])


def to_agent_frame(frame: PointFrame, agent_pose) -> PointFrame:
    """Center on the agent and rotate so its heading points along +x."""
    x, y, z, heading = agent_pose
    pts = frame.points.astype(np.float64, copy=True)
    pts[:, :3] = (pts[:, :3] - np.array([x, y, z])) @ _rot(heading)
    return PointFrame(frame.timestamp_index, pts)


def from_agent_frame(frame: PointFrame, agent_pose) -> PointFrame:
    x, y, z, heading = agent_pose
    pts = frame.points.astype(np.float64, copy=True)
    pts[:, :3] = pts[:, :3] @ _rot(heading).T + np.array([x, y, z])
    return PointFrame(frame.timestamp_index, pts)


def sample_or_pad(frame: PointFrame | np.ndarray, n_max: int = 512, rng_seed=0):
    """Subsample (without replacement) or zero-pad to exactly ``n_max`` rows."""
    if n_max < 1:
        raise ValueError("n_max must be >= 1")
    pts = frame.points if isinstance(frame, PointFrame) else np.asarray(frame)
    rng = rng_seed if isinstance(rng_seed, np.random.Generator) else np.random.default_rng(rng_seed)
    n = pts.shape[0]
    out = np.zeros((n_max, pts.shape[1]), dtype=np.float64)
    mask = np.zeros(n_max, dtype=bool)
    if n > n_max:
        keep = np.sort(rng.choice(n, size=n_max, replace=False))
        out[:] = pts[keep]
        mask[:] = True
    else:
        out[:n] = pts
        mask[:n] = True
    return out, mask


def featurize(points: np.ndarray, mask: np.ndarray, selection, target_class: str) -> np.ndarray:
    """Rows of [x, y, z] ++ selected features ++ one-hot(class); padded rows stay zero."""
    cidx = class_index(target_class)
    sel = normalize_selection(selection)
    cols = [0, 1, 2] + [3 + LIDAR_FEATURES.index(f) for f in sel]
    rows = np.zeros((points.shape[0], len(cols) + len(CLASSES)), dtype=np.float64)
    rows[:, :len(cols)] = points[:, cols]
    rows[:, len(cols) + cidx] = 1.0
    rows[~mask] = 0.0
    return rows


def select_frames(frames: list, count: int) -> list:
    if len(frames) != N_PAST:
        raise ValueError(f"expected {N_PAST} frames, got {len(frames)}")
    if count not in FRAME_INDICES:
        raise ValueError(f"unsupported frame count {count}; choose from {sorted(FRAME_INDICES)}")
    return [frames[i] for i in FRAME_INDICES[count]]


def build_lidar_tensor(scene_frames: list[PointFrame], track: AgentTrack, selection=("intensity",),
                       n_max: int = 512, rng_seed=0, frames: int = 11,
                       margin: float = 0.15) -> LidarTensor:
    """Stack per-frame crops of ``track`` into a (T, N, D) tensor in the current agent frame."""
    if len(scene_frames) != N_PAST:
        raise ValueError(f"expected {N_PAST} scene frames, got {len(scene_frames)}")
    rng = np.random.default_rng(rng_seed)
    pose = track.current_pose
    idx = FRAME_INDICES.get(frames)
    if idx is None:
        raise ValueError(f"unsupported frame count {frames}; choose from {sorted(FRAME_INDICES)}")
    data = np.zeros((len(idx), n_max, feature_dim(selection)), dtype=np.float32)
    mask = np.zeros((len(idx), n_max), dtype=bool)
    for out_t, t in enumerate(idx):
        if not track.past_valid[t]:
            continue
        local = to_agent_frame(crop_to_box(scene_frames[t], track.box(t), margin), pose)
        pts, m = sample_or_pad(local, n_max, rng)
        data[out_t] = featurize(pts, m, selection, track.cls)
        mask[out_t] = m
    return LidarTensor(data, mask, track.cls)
