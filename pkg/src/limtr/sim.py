"""Synthetic scenarios with planted LiDAR cues, and the on-disk scenario bundle format.

Bundle layout (one directory per scenario)::

    header.json              version, id, class names, field lists, per-frame point counts, agents
    points_t00.bin .. t10    float32 LE rows (x, y, z, range, intensity, elongation)
    tracks.bin               per agent, in header order:
                               11 past rows  (x, y, z, vx, vy, heading, length, width, height, valid)
                               80 future rows (x, y, vx, vy, valid)

Every float is stored as little-endian float32; scenarios are generated in
float32 so a write/read round trip is bit-exact.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .data import CLASSES, DT, N_FUTURE, N_PAST, POINT_FIELDS, AgentTrack, OrientedBox, PointFrame, Scenario

BUNDLE_VERSION = 1
PAST_FIELDS = ("x", "y", "z", "vx", "vy", "heading", "length", "width", "height", "valid")
FUTURE_FIELDS = ("x", "y", "vx", "vy", "valid")
SENSOR = np.array([0.0, 0.0, 1.8])


class BundleError(ValueError):
    pass


@dataclass
class CueSpec:
    """How strongly the rendered point cloud reveals the agent's future turn.

    With probability ``cue_strength`` (drawn once per agent) the head cluster
    sits at a lateral offset equal to the future turn rate as a fraction of the
    class maximum; otherwise the offset is uniform random.
    """

    cue_strength: float = 1.0
    classes: tuple[str, ...] = ("pedestrian", "cyclist")

    def __post_init__(self):
        if not 0.0 <= self.cue_strength <= 1.0:
            raise ValueError("cue_strength must lie in [0, 1]")


@dataclass(frozen=True)
class ClassProfile:
    size_lo: tuple[float, float, float]
    size_hi: tuple[float, float, float]
    speed: tuple[float, float]
    maneuvers: tuple[tuple[str, float], ...]
    turn_rate: tuple[float, float]
    onset: float
    n_points: int
    intensity: float


# Every manoeuvre starts at t=0, so past motion is constant-velocity and the
# clouds carry no future information beyond the cue.
PROFILES = {
    "vehicle": ClassProfile((4.2, 1.8, 1.5), (5.0, 2.1, 1.8), (4.0, 12.0),
                            (("cv", 0.4), ("turn", 0.4), ("stop", 0.2)), (0.05, 0.2), 0.0, 120, 0.6),
    "pedestrian": ClassProfile((0.5, 0.5, 1.6), (0.8, 0.8, 1.9), (0.8, 1.8),
                               (("turn", 0.8), ("stop", 0.2)), (0.0, 0.35), 0.0, 40, 0.3),
    "cyclist": ClassProfile((1.6, 0.6, 1.6), (1.9, 0.8, 1.9), (3.0, 6.0),
                            (("turn", 0.8), ("stop", 0.2)), (0.0, 0.3), 0.0, 50, 0.45),
}
CLASS_WEIGHTS = (0.3, 0.35, 0.35)
CLUSTER_POINTS = 10


@dataclass
class Kinematics:
    """Unicycle motion: straight at ``speed`` until ``onset``, then turn at ``omega`` or brake at ``decel``.

    Times are in seconds relative to the current frame (t=0); the state is
    anchored at t=-1 s, the first past frame.
    """

    x: float
    y: float
    heading: float
    speed: float
    omega: float = 0.0
    decel: float = 0.0
    onset: float = -1.0
    t0: float = -1.0

    def state(self, t):
        """Return (x, y, heading, vx, vy) arrays at times ``t`` (closed form)."""
        t = np.asarray(t, dtype=np.float64)
        pre = np.minimum(t, self.onset) - self.t0
        x = self.x + self.speed * pre * math.cos(self.heading)
        y = self.y + self.speed * pre * math.sin(self.heading)
        tau = np.maximum(t - self.onset, 0.0)
        heading = np.full_like(t, self.heading)
        speed = np.full_like(t, self.speed)
        if self.omega != 0.0:
            heading = self.heading + self.omega * tau
            r = self.speed / self.omega
            x = x + r * (np.sin(heading) - math.sin(self.heading))
            y = y - r * (np.cos(heading) - math.cos(self.heading))
        elif self.decel > 0.0:
            t_stop = self.speed / self.decel
            tt = np.minimum(tau, t_stop)
            dist = self.speed * tt - 0.5 * self.decel * tt * tt
            x = x + dist * math.cos(self.heading)
            y = y + dist * math.sin(self.heading)
            speed = np.maximum(self.speed - self.decel * tau, 0.0)
        else:
            x = x + self.speed * tau * math.cos(self.heading)
            y = y + self.speed * tau * math.sin(self.heading)
        return x, y, heading, speed * np.cos(heading), speed * np.sin(heading)


PAST_TIMES = (np.arange(N_PAST) - (N_PAST - 1)) * DT
FUTURE_TIMES = np.arange(1, N_FUTURE + 1) * DT


def _surface_points(half: np.ndarray, n: int, rng: np.random.Generator, z_top: float) -> np.ndarray:
    """Uniform samples on the four side faces and the cap at ``z_top`` of a box in its own frame."""
    hx, hy, hz = half
    height = z_top + hz
    areas = np.array([hy * height, hy * height, hx * height, hx * height, 2 * hx * hy])
    face = rng.choice(5, size=n, p=areas / areas.sum())
    u = rng.uniform(-1.0, 1.0, size=(n, 2))
    z = -hz + (u[:, 1] + 1.0) / 2.0 * height
    pts = np.empty((n, 3))
    for f, sign in ((0, 1.0), (1, -1.0)):
        sel = face == f
        pts[sel] = np.stack([np.full(sel.sum(), sign * hx), u[sel, 0] * hy, z[sel]], axis=1)
    for f, sign in ((2, 1.0), (3, -1.0)):
        sel = face == f
        pts[sel] = np.stack([u[sel, 0] * hx, np.full(sel.sum(), sign * hy), z[sel]], axis=1)
    sel = face == 4
    pts[sel] = np.stack([u[sel, 0] * hx, u[sel, 1] * hy, np.full(sel.sum(), z_top)], axis=1)
    return pts


def render_points(box: OrientedBox, cls: str, cue_value: float | None, rng: np.random.Generator) -> np.ndarray:
    """Sample one frame of LiDAR returns for an agent.

    Body points lie on the box surface. When ``cue_value`` (in [-1, 1]) is
    given, a small bright "head" cluster is added near the top of the box at
    lateral offset ``cue_value`` times 0.8 of the half width. All points stay
    within 1.05x the half extents in the box frame.
    """
    prof = PROFILES[cls]
    half = box.half_extents
    n_body = max(int(rng.poisson(prof.n_points)), 1)
    vru = cls != "vehicle"
    body = _surface_points(half, n_body, rng, 0.25 * half[2] if vru else half[2])
    body += rng.normal(0.0, 0.02, body.shape)
    intensity = prof.intensity + rng.normal(0.0, 0.05, n_body)
    parts, inten = [body], [intensity]
    if cue_value is not None:
        center = np.array([0.3 * half[0], cue_value * 0.8 * half[1], 0.8 * half[2]])
        cluster = center + rng.normal(0.0, 0.04, (CLUSTER_POINTS, 3))
        parts.append(cluster)
        inten.append(prof.intensity + 0.4 + rng.normal(0.0, 0.05, CLUSTER_POINTS))
    local = np.clip(np.concatenate(parts), -1.05 * half, 1.05 * half)
    c, s = math.cos(box.heading), math.sin(box.heading)
    rot = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
    xyz = local @ rot.T + box.center
    out = np.empty((len(xyz), 6))
    out[:, :3] = xyz
    out[:, 3] = np.linalg.norm(xyz - SENSOR, axis=1)
    out[:, 4] = np.maximum(np.concatenate(inten), 0.0)
    out[:, 5] = np.abs(rng.normal(0.0, 0.1, len(xyz)))
    return out


def _sample_agent(rng: np.random.Generator, cls: str, origin) -> tuple[Kinematics, np.ndarray, dict]:
    prof = PROFILES[cls]
    size = rng.uniform(prof.size_lo, prof.size_hi)
    speed = rng.uniform(*prof.speed)
    names = [m for m, _ in prof.maneuvers]
    maneuver = names[rng.choice(len(names), p=[p for _, p in prof.maneuvers])]
    heading = rng.uniform(-math.pi, math.pi)
    omega = decel = 0.0
    onset = prof.onset
    turn_frac = 0.0
    if maneuver == "turn":
        lo, hi = prof.turn_rate
        if cls == "vehicle":
            omega = rng.choice([-1.0, 1.0]) * rng.uniform(lo, hi)
        else:
            omega = rng.uniform(-hi, hi)
            turn_frac = omega / hi
    elif maneuver == "stop":
        decel = speed / rng.uniform(1.5, 6.0)
    kin = Kinematics(float(origin[0]), float(origin[1]), heading, speed, omega, decel, onset)
    meta = {"maneuver": maneuver, "omega": float(omega), "decel": float(decel), "onset": float(onset),
            "turn_fraction": float(turn_frac)}
    return kin, size, meta


def cue_offset(turn_fraction: float, cue: CueSpec, rng: np.random.Generator) -> tuple[float, bool]:
    """Rendered lateral cue offset for one agent and whether it is truthful."""
    # always two draws, so datasets that differ only in cue_strength share every other sample
    u, decoy = rng.uniform(), float(rng.uniform(-1.0, 1.0))
    truthful = bool(u < cue.cue_strength)
    return (turn_fraction if truthful else decoy), truthful


def gen_scenario(seed, n_agents: int | None = None, cue: CueSpec | None = None,
                 scenario_id: str | None = None) -> Scenario:
    """Deterministic synthetic scenario with 1-8 agents; ``n_agents=None`` draws it from the seed."""
    cue = CueSpec() if cue is None else cue
    seq = np.random.SeedSequence(seed)
    rng = np.random.default_rng(seq)
    cue_rng = np.random.default_rng(seq.spawn(1)[0])
    if n_agents is None:
        n_agents = int(rng.integers(1, 9))
    if not 1 <= n_agents <= 8:
        raise ValueError(f"n_agents must lie in [1, 8], got {n_agents}")
    scenario_id = scenario_id if scenario_id is not None else f"scn{seed}"
    slots = rng.permutation(9)[:n_agents]
    agents, boxes, cues = [], [], []
    for a, slot in enumerate(slots):
        cls = CLASSES[rng.choice(3, p=CLASS_WEIGHTS)]
        origin = np.array([(slot % 3 - 1) * 30.0, (slot // 3 - 1) * 30.0]) + rng.uniform(-5, 5, 2)
        kin, size, meta = _sample_agent(rng, cls, origin)
        cue_val = None
        if cls in cue.classes:
            cue_val, meta["cue_truthful"] = cue_offset(meta["turn_fraction"], cue, cue_rng)
            meta["cue_value"] = cue_val
        px, py, ph, pvx, pvy = kin.state(PAST_TIMES)
        fx, fy, _, fvx, fvy = kin.state(FUTURE_TIMES)
        z = np.full(N_PAST, size[2] / 2.0)
        track = AgentTrack(
            agent_id=a, cls=cls,
            past_xyz=np.stack([px, py, z], axis=1).astype(np.float32),
            past_vel=np.stack([pvx, pvy], axis=1).astype(np.float32),
            past_heading=ph.astype(np.float32),
            size=np.tile(size, (N_PAST, 1)).astype(np.float32),
            past_valid=np.ones(N_PAST, dtype=bool),
            future_xy=np.stack([fx, fy], axis=1).astype(np.float32),
            future_vel=np.stack([fvx, fvy], axis=1).astype(np.float32),
            future_valid=np.ones(N_FUTURE, dtype=bool),
            meta=meta,
        )
        agents.append(track)
        cues.append(cue_val)
    frames = []
    for t in range(N_PAST):
        chunks = [render_points(tr.box(t), tr.cls, cv, rng) for tr, cv in zip(agents, cues)]
        clutter = np.zeros((200, 6))
        clutter[:, :2] = rng.uniform(-50, 50, (200, 2))
        clutter[:, 2] = rng.normal(0.0, 0.03, 200)
        clutter[:, 3] = np.linalg.norm(clutter[:, :3] - SENSOR, axis=1)
        clutter[:, 4] = np.abs(rng.normal(0.1, 0.05, 200))
        clutter[:, 5] = np.abs(rng.normal(0.0, 0.1, 200))
        chunks.append(clutter)
        frames.append(PointFrame(t, np.concatenate(chunks).astype(np.float32)))
    return Scenario(scenario_id, agents, frames)


def write_bundle(scenario: Scenario, directory) -> Path:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    header = {
        "format": "limtr-scenario",
        "version": BUNDLE_VERSION,
        "id": scenario.scenario_id,
        "class_names": list(CLASSES),
        "n_past": N_PAST,
        "n_future": N_FUTURE,
        "dt": DT,
        "point_fields": list(POINT_FIELDS),
        "past_fields": list(PAST_FIELDS),
        "future_fields": list(FUTURE_FIELDS),
        "point_counts": [len(f) for f in scenario.frames],
        "agents": [{"id": a.agent_id, "class": a.cls, "meta": a.meta} for a in scenario.agents],
    }
    (d / "header.json").write_text(json.dumps(header, indent=1, sort_keys=True))
    for f in scenario.frames:
        (d / f"points_t{f.timestamp_index:02d}.bin").write_bytes(
            np.ascontiguousarray(f.points, dtype="<f4").tobytes())
    rows = []
    for a in scenario.agents:
        past = np.concatenate([a.past_xyz, a.past_vel, a.past_heading[:, None], a.size,
                               a.past_valid[:, None]], axis=1)
        fut = np.concatenate([a.future_xy, a.future_vel, a.future_valid[:, None]], axis=1)
        rows.append(np.ascontiguousarray(past, dtype="<f4").tobytes())
        rows.append(np.ascontiguousarray(fut, dtype="<f4").tobytes())
    (d / "tracks.bin").write_bytes(b"".join(rows))
    return d


def _read_rows(path: Path, n_rows: int, width: int) -> np.ndarray:
    buf = path.read_bytes()
    expected = n_rows * width * 4
    if len(buf) != expected:
        raise BundleError(f"{path.name}: expected {expected} bytes, data ends at byte offset {len(buf)}")
    return np.frombuffer(buf, dtype="<f4").reshape(n_rows, width).astype(np.float32)


def read_bundle(directory) -> Scenario:
    d = Path(directory)
    try:
        header = json.loads((d / "header.json").read_text())
    except json.JSONDecodeError as exc:
        raise BundleError(f"header.json: malformed JSON at byte offset {exc.pos}") from exc
    if header.get("version") != BUNDLE_VERSION:
        raise BundleError(f"unsupported bundle version {header.get('version')!r} (expected {BUNDLE_VERSION})")
    n_past, n_future = header["n_past"], header["n_future"]
    frames = []
    for t, count in enumerate(header["point_counts"]):
        pts = _read_rows(d / f"points_t{t:02d}.bin", count, len(POINT_FIELDS))
        frames.append(PointFrame(t, pts))
    agents_meta = header["agents"]
    per_agent = n_past * len(PAST_FIELDS) + n_future * len(FUTURE_FIELDS)
    flat = _read_rows(d / "tracks.bin", len(agents_meta), per_agent)
    agents = []
    for row, meta in zip(flat, agents_meta):
        past = row[:n_past * len(PAST_FIELDS)].reshape(n_past, len(PAST_FIELDS))
        fut = row[n_past * len(PAST_FIELDS):].reshape(n_future, len(FUTURE_FIELDS))
        agents.append(AgentTrack(
            agent_id=meta["id"], cls=meta["class"],
            past_xyz=past[:, 0:3].copy(), past_vel=past[:, 3:5].copy(), past_heading=past[:, 5].copy(),
            size=past[:, 6:9].copy(), past_valid=past[:, 9] > 0.5,
            future_xy=fut[:, 0:2].copy(), future_vel=fut[:, 2:4].copy(), future_valid=fut[:, 4] > 0.5,
            meta=meta.get("meta", {}),
        ))
    return Scenario(header["id"], agents, frames)
