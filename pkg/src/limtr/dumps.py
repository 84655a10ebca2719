"""Prediction dumps: one JSON line per (scenario, agent).

Each line holds ``scenario``, ``agent``, ``class``, ``probs`` (K floats),
``shape`` ([K, steps, 7]) and ``traj``, the base64 encoding of the
little-endian float32 block of that shape with columns
(x, y, std_x, std_y, rho, vx, vy) in the agent frame.
"""
from __future__ import annotations

import base64
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np


@dataclass
class PredictionRecord:
    scenario: str
    agent: int
    cls: str
    probs: np.ndarray
    traj: np.ndarray

    def to_json(self) -> str:
        traj = np.ascontiguousarray(self.traj, dtype="<f4")
        return json.dumps({
            "scenario": self.scenario,
            "agent": int(self.agent),
            "class": self.cls,
            "probs": [float(p) for p in self.probs],
            "shape": list(traj.shape),
            "traj": base64.b64encode(traj.tobytes()).decode("ascii"),
        }, sort_keys=True)

    @classmethod
    def from_json(cls, line: str) -> "PredictionRecord":
        d = json.loads(line)
        shape = tuple(d["shape"])
        raw = base64.b64decode(d["traj"])
        if len(raw) != 4 * int(np.prod(shape)):
            raise ValueError(f"trajectory block has {len(raw)} bytes, shape {shape} needs {4 * int(np.prod(shape))}")
        traj = np.frombuffer(raw, dtype="<f4").reshape(shape).astype(np.float32)
        return cls(d["scenario"], d["agent"], d["class"], np.asarray(d["probs"], dtype=np.float64), traj)


def write_dump(path, keys, classes, probs: np.ndarray, traj: np.ndarray) -> int:
    lines = [PredictionRecord(s, a, c, p, t).to_json()
             for (s, a), c, p, t in zip(keys, classes, probs, traj)]
    Path(path).write_text("".join(line + "\n" for line in lines))
    return len(lines)


def read_dump(path) -> list[PredictionRecord]:
    out = []
    for n, line in enumerate(Path(path).read_text().splitlines(), start=1):
        if line.strip():
            try:
                out.append(PredictionRecord.from_json(line))
            except (ValueError, KeyError) as exc:
                raise ValueError(f"{path}:{n}: {exc}") from exc
    return out
