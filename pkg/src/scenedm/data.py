"""Synthetic driving scenarios and the JSONL scenario / rollout formats.

Agents follow dense reference paths (lane centrelines, lane-change blends,
constant-radius turn connectors, sidewalks) with a clipped constant
acceleration along the path. Every pose stores the heading and speed of the
chord from the previous tick, so positions are exactly the Euler integral of
the stored speed and heading.
"""
from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .scene import HEADING, SPEED, X, Y, Agent, Polyline, Scene, to_scene_frame
from .scoring import collision_matrix, offroad_matrix

MAP_KINDS = ("straight", "lane-change", "intersection")
LANE_SPACING = 3.5
LANE_WIDTH = 3.6  # a hair wider than the spacing so lane unions have no seams
SIDEWALK_WIDTH = 2.0
MAX_AGENTS = {"straight": 12, "lane-change": 12, "intersection": 10}

SIZES = {"vehicle": ((4.0, 5.0), (1.8, 2.1)), "pedestrian": ((0.5, 0.7), (0.5, 0.7)), "bicycle": ((1.6, 1.9), (0.6, 0.8))}
SPEEDS = {"pedestrian": (0.8, 1.8), "bicycle": (2.0, 5.0)}
TURN_SPEED = 5.0
MIN_SPEED = 0.5


@dataclass
class GenSpec:
    n_scenes: int = 200
    n_agents_range: tuple[int, int] = (2, 6)
    map_kinds: tuple[str, ...] = MAP_KINDS
    dt: float = 0.5
    t_hist: int = 3
    t_fut: int = 16
    seed: int = 0
    vehicle_speed: tuple[float, float] = (3.0, 10.0)
    accel_range: tuple[float, float] = (-0.6, 0.6)
    max_attempts: int = 200

    def __post_init__(self):
        self.n_agents_range = tuple(self.n_agents_range)
        self.map_kinds = tuple(self.map_kinds)
        lo, hi = self.n_agents_range
        if self.n_scenes < 1:
            raise ValueError("n_scenes must be >= 1")
        if not 1 <= lo <= hi:
            raise ValueError(f"invalid agent range {self.n_agents_range}")
        if not self.map_kinds or any(k not in MAP_KINDS for k in self.map_kinds):
            raise ValueError(f"map kinds must be drawn from {MAP_KINDS}")
        for k in self.map_kinds:
            if hi > MAX_AGENTS[k]:
                raise ValueError(f"{hi} agents do not fit a {k} map (max {MAX_AGENTS[k]})")
        if self.dt <= 0 or self.t_hist < 1 or self.t_fut < 2:
            raise ValueError("need dt > 0, t_hist >= 1 and t_fut >= 2")
        if not 0 < self.vehicle_speed[0] <= self.vehicle_speed[1]:
            raise ValueError("invalid vehicle speed range")

    def to_dict(self) -> dict:
        return asdict(self)


class InfeasibleSpec(ValueError):
    pass


# --------------------------------------------------------------------------
# reference paths


@dataclass
class Path2D:
    points: np.ndarray  # dense (P, 2)
    kind: str  # lane | bike | sidewalk
    turning: bool = False
    start_range: tuple[float, float] = (0.0, 80.0)
    cum: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        seg = np.linalg.norm(np.diff(self.points, axis=0), axis=1)
        self.cum = np.concatenate([[0.0], np.cumsum(seg)])

    @property
    def length(self) -> float:
        return float(self.cum[-1])

    def at(self, s: np.ndarray) -> np.ndarray:
        s = np.asarray(s, dtype=np.float64)
        return np.stack([np.interp(s, self.cum, self.points[:, 0]), np.interp(s, self.cum, self.points[:, 1])], -1)


def _line(p0, p1, step: float = 0.5) -> np.ndarray:
    p0, p1 = np.asarray(p0, float), np.asarray(p1, float)
    n = max(2, int(np.ceil(np.linalg.norm(p1 - p0) / step)) + 1)
    return p0 + np.linspace(0.0, 1.0, n)[:, None] * (p1 - p0)


def _arc(center, radius: float, a0: float, a1: float, step: float = 0.25) -> np.ndarray:
    n = max(3, int(np.ceil(abs(a1 - a0) * radius / step)) + 1)
    a = np.linspace(a0, a1, n)
    return np.asarray(center, float) + radius * np.stack([np.cos(a), np.sin(a)], -1)


def _join(*parts) -> np.ndarray:
    out = [parts[0]]
    for p in parts[1:]:
        out.append(p[1:] if np.allclose(p[0], out[-1][-1]) else p)
    return np.concatenate(out)


def _rotate(points: np.ndarray, angle: float) -> np.ndarray:
    c, s = np.cos(angle), np.sin(angle)
    return points @ np.array([[c, s], [-s, c]])


def straight_map(lane_change: bool = False) -> tuple[list[Polyline], list[Path2D]]:
    x0, x1 = -60.0, 200.0
    lanes_y = (0.0, LANE_SPACING, 2 * LANE_SPACING)
    polylines = [Polyline(_line((x0, y), (x1, y), 5.0), LANE_WIDTH) for y in lanes_y]
    walk_y = (-LANE_SPACING / 2 - 2.0, 2.5 * LANE_SPACING + 2.0)
    polylines += [Polyline(_line((x0, y), (x1, y), 5.0), SIDEWALK_WIDTH) for y in walk_y]
    paths = [
        Path2D(_line((x0, 0.0), (x1, 0.0)), "lane", start_range=(40.0, 120.0)),
        Path2D(_line((x0, LANE_SPACING), (x1, LANE_SPACING)), "lane", start_range=(40.0, 120.0)),
        # the far lane runs the other way
        Path2D(_line((x1, 2 * LANE_SPACING), (x0, 2 * LANE_SPACING)), "lane", start_range=(80.0, 160.0)),
        Path2D(_line((x0, 0.0), (x1, 0.0)), "bike", start_range=(40.0, 120.0)),
    ]
    for y in walk_y:
        paths.append(Path2D(_line((x0, y), (x1, y)), "sidewalk", start_range=(50.0, 110.0)))
        paths.append(Path2D(_line((x1, y), (x0, y)), "sidewalk", start_range=(90.0, 150.0)))
    if lane_change:
        for ya, yb in ((0.0, LANE_SPACING), (LANE_SPACING, 0.0)):
            u = np.linspace(0.0, 1.0, 121)
            blend = np.stack([40.0 + 30.0 * u, ya + (yb - ya) * (1 - np.cos(np.pi * u)) / 2], -1)
            pts = _join(_line((x0, ya), (40.0, ya)), blend, _line((70.0, yb), (x1, yb)))
            paths.append(Path2D(pts, "lane", start_range=(60.0, 95.0)))
            paths.append(Path2D(pts, "lane", start_range=(60.0, 95.0)))
    return polylines, paths


def intersection_map() -> tuple[list[Polyline], list[Path2D]]:
    """Four-way crossing of two two-lane roads with right-hand traffic."""
    half, reach = LANE_SPACING / 2, 90.0
    r_right, r_left = 6.0, 10.0
    polylines: list[Polyline] = []
    paths: list[Path2D] = []
    walk = LANE_SPACING + 2.0
    for q in range(4):
        ang = q * np.pi / 2
        # approach heading +x in the canonical frame, lane at y = -half
        straight = _line((-reach, -half), (reach, -half))
        start_turn_r = -half - r_right
        right = _join(
            _line((-reach, -half), (start_turn_r, -half)),
            _arc((start_turn_r, -half - r_right), r_right, np.pi / 2, 0.0),
            _line((-half, -half - r_right), (-half, -reach)),
        )
        start_turn_l = half - r_left
        left = _join(
            _line((-reach, -half), (start_turn_l, -half)),
            _arc((start_turn_l, -half + r_left), r_left, -np.pi / 2, 0.0),
            _line((half, -half + r_left), (half, reach)),
        )
        polylines.append(Polyline(_rotate(_line((-reach, -half), (reach, -half), 5.0), ang), LANE_WIDTH))
        polylines.append(Polyline(_rotate(_arc((start_turn_r, -half - r_right), r_right, np.pi / 2, 0.0, 1.0), ang), LANE_WIDTH))
        polylines.append(Polyline(_rotate(_arc((start_turn_l, -half + r_left), r_left, -np.pi / 2, 0.0, 1.0), ang), LANE_WIDTH))
        polylines.append(Polyline(_rotate(_line((-reach, -walk), (reach, -walk), 5.0), ang), SIDEWALK_WIDTH))
        approach = (reach - 40.0, reach - 12.0)
        paths.append(Path2D(_rotate(straight, ang), "lane", start_range=approach))
        paths.append(Path2D(_rotate(right, ang), "lane", turning=True, start_range=approach))
        paths.append(Path2D(_rotate(left, ang), "lane", turning=True, start_range=approach))
        paths.append(Path2D(_rotate(straight, ang), "bike", start_range=approach))
        paths.append(Path2D(_rotate(right, ang), "bike", turning=True, start_range=approach))
        paths.append(Path2D(_rotate(_line((-reach, -walk), (reach, -walk)), ang), "sidewalk", start_range=(70.0, 100.0)))
    return polylines, paths


def build_map(kind: str) -> tuple[list[Polyline], list[Path2D]]:
    if kind == "straight":
        return straight_map(False)
    if kind == "lane-change":
        return straight_map(True)
    if kind == "intersection":
        return intersection_map()
    raise ValueError(f"unknown map kind {kind!r}")


# --------------------------------------------------------------------------
# trajectories


def speed_profile(v0: float, accel: float, n: int, dt: float, vmin: float, vmax: float) -> np.ndarray:
    """Speeds at ticks 0..n-1 under a clipped constant acceleration."""
    return np.clip(v0 + accel * dt * np.arange(n), vmin, vmax)


def track_along(path: Path2D, s0: float, speeds: np.ndarray, dt: float) -> np.ndarray:
    """Poses (n, 4) following ``path`` from arc length ``s0``.

    Tick ``i`` moves ``speeds[i] * dt`` along the path from tick ``i-1``;
    heading and speed are those of the chord, so ``p[i] = p[i-1] +
    dt * speed[i] * (cos heading[i], sin heading[i])`` holds exactly.
    """
    s = s0 + np.concatenate([[-speeds[0] * dt], np.cumsum(np.concatenate([[0.0], speeds[1:]]) * dt)])
    pts = path.at(s)
    d = np.diff(pts, axis=0)
    out = np.empty((len(speeds), 4))
    out[:, X:Y + 1] = pts[1:]
    out[:, HEADING] = np.arctan2(d[:, 1], d[:, 0])
    out[:, SPEED] = np.hypot(d[:, 0], d[:, 1]) / dt
    return out


def _sample_agent(rng: np.random.Generator, paths: list[Path2D], spec: GenSpec, ego: bool) -> tuple[Agent, np.ndarray]:
    n_ticks = spec.t_hist + spec.t_fut
    if ego:
        atype = "vehicle"
    else:
        atype = str(rng.choice(["vehicle", "pedestrian", "bicycle"], p=[0.7, 0.15, 0.15]))
    want = {"vehicle": "lane", "pedestrian": "sidewalk", "bicycle": "bike"}[atype]
    cands = [p for p in paths if p.kind == want]
    path = cands[int(rng.integers(len(cands)))]
    (l0, l1), (w0, w1) = SIZES[atype]
    length, width = float(rng.uniform(l0, l1)), float(rng.uniform(w0, w1))
    if atype == "vehicle":
        vlo, vhi = spec.vehicle_speed
        a_lo, a_hi = spec.accel_range
    else:
        vlo, vhi = SPEEDS[atype]
        a_lo, a_hi = (0.3 * a for a in spec.accel_range)
    if path.turning:
        vhi = min(vhi, TURN_SPEED)
        vlo = min(vlo, vhi)
    v0 = float(rng.uniform(vlo, vhi))
    accel = float(rng.uniform(a_lo, a_hi))
    speeds = speed_profile(v0, accel, n_ticks, spec.dt, min(MIN_SPEED, vlo), vhi)
    s0 = float(rng.uniform(*path.start_range))
    poses = track_along(path, s0, speeds, spec.dt)
    agent = Agent(atype, length, width, poses[: spec.t_hist], poses[spec.t_hist:])
    return agent, poses


def _scene_ok(poses: np.ndarray, lengths: np.ndarray, widths: np.ndarray, road: list[Polyline]) -> bool:
    return not collision_matrix(poses, lengths, widths).any() and not offroad_matrix(poses, road).any()


def generate_scene(rng: np.random.Generator, spec: GenSpec, scene_id: str, kind: str, n_agents: int) -> Scene:
    road, paths = build_map(kind)
    agents: list[Agent] = []
    tracks: list[np.ndarray] = []
    for i in range(n_agents):
        for _ in range(spec.max_attempts):
            agent, poses = _sample_agent(rng, paths, spec, ego=(i == 0))
            cand = np.stack(tracks + [poses])
            ls = np.array([a.length for a in agents] + [agent.length])
            ws = np.array([a.width for a in agents] + [agent.width])
            if _scene_ok(cand, ls, ws, road):
                agents.append(agent)
                tracks.append(poses)
                break
        else:
            raise InfeasibleSpec(f"could not place agent {i} of {n_agents} on a {kind} map")
    scene = Scene(scene_id, road, agents, ego_index=0, dt=spec.dt, meta={"map_kind": kind})
    return to_scene_frame(scene)


def gen_data(spec: GenSpec) -> list[Scene]:
    """Deterministic list of scene-centric scenes with ground-truth futures."""
    root = np.random.SeedSequence(spec.seed)
    scenes = []
    for i, child in enumerate(root.spawn(spec.n_scenes)):
        rng = np.random.default_rng(child)
        kind = spec.map_kinds[int(rng.integers(len(spec.map_kinds)))]
        n = int(rng.integers(spec.n_agents_range[0], spec.n_agents_range[1] + 1))
        scenes.append(generate_scene(rng, spec, f"scene_{spec.seed}_{i:05d}", kind, n))
    return scenes


# --------------------------------------------------------------------------
# scenario JSONL


class FormatError(ValueError):
    pass


def poses_to_records(poses: np.ndarray, t0: int, dt: float) -> list[dict]:
    return [
        {"t": (t0 + i) * dt, "x": float(p[X]), "y": float(p[Y]), "heading": float(p[HEADING]), "speed": float(p[SPEED])}
        for i, p in enumerate(poses)
    ]


def records_to_poses(records: list[dict]) -> tuple[np.ndarray, np.ndarray]:
    try:
        t = np.array([r["t"] for r in records], dtype=np.float64)
        poses = np.array([[r["x"], r["y"], r["heading"], r["speed"]] for r in records], dtype=np.float64)
    except (KeyError, TypeError) as e:
        raise FormatError(f"bad pose record: {e}") from None
    if poses.size and not np.all(np.isfinite(poses)):
        raise FormatError("non-finite pose value")
    return t, poses.reshape(-1, 4)


def scene_to_dict(scene: Scene) -> dict:
    t_hist = scene.agents[0].history.shape[0] if scene.agents else 0
    agents = []
    for a in scene.agents:
        rec = {
            "type": a.type,
            "length": a.length,
            "width": a.width,
            "history": poses_to_records(a.history, 1 - t_hist, scene.dt),
        }
        if a.future is not None:
            rec["future"] = poses_to_records(a.future, 1, scene.dt)
        agents.append(rec)
    return {
        "scene_id": scene.scene_id,
        "dt": scene.dt,
        "ego_index": scene.ego_index,
        "map": [{"points": p.points.tolist(), "width": p.width} for p in scene.polylines],
        "agents": agents,
        **({"meta": scene.meta} if scene.meta else {}),
    }


def _check_ticks(t: np.ndarray, dt: float, what: str) -> None:
    if len(t) > 1 and not np.allclose(np.diff(t), dt, atol=1e-9):
        raise FormatError(f"{what}: ticks are not uniform at dt={dt}")


def scene_from_dict(d: dict) -> Scene:
    try:
        dt = float(d.get("dt", 0.5))
        polylines = [Polyline(np.asarray(m["points"], dtype=np.float64), float(m["width"])) for m in d["map"]]
        agents = []
        for j, a in enumerate(d["agents"]):
            th, hist = records_to_poses(a["history"])
            _check_ticks(th, dt, f"agent {j} history")
            fut = None
            if a.get("future") is not None:
                tf, fut = records_to_poses(a["future"])
                _check_ticks(tf, dt, f"agent {j} future")
                if len(tf) and len(th) and not np.isclose(tf[0] - th[-1], dt, atol=1e-9):
                    raise FormatError(f"agent {j}: future is not contiguous with history")
            agents.append(Agent(a["type"], float(a["length"]), float(a["width"]), hist, fut))
        scene = Scene(str(d["scene_id"]), polylines, agents, int(d.get("ego_index", 0)), dt, d.get("meta", {}))
    except (KeyError, TypeError) as e:
        raise FormatError(f"scene record missing or malformed field: {e}") from None
    for pl in polylines:
        if not np.all(np.isfinite(pl.points)):
            raise FormatError(f"scene {scene.scene_id}: non-finite map point")
    if len({a.history.shape[0] for a in agents}) > 1:
        raise FormatError(f"scene {scene.scene_id}: histories are not time-aligned")
    return scene


def write_scenarios(path: str | Path, scenes: list[Scene]) -> None:
    with open(path, "w") as fh:
        for sc in scenes:
            fh.write(json.dumps(scene_to_dict(sc), separators=(",", ":")) + "\n")


def read_scenarios(path: str | Path) -> list[Scene]:
    scenes = []
    with open(path) as fh:
        for n, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                d = json.loads(line)
            except json.JSONDecodeError as e:
                raise FormatError(f"line {n}: invalid JSON ({e.msg})") from None
            scenes.append(scene_from_dict(d))
    return scenes


# --------------------------------------------------------------------------
# rollout JSONL


def rollouts_to_dict(rs, dt: float, config_hash: str, checkpoint_hash: str, seed: int) -> dict:
    out = []
    for m in range(rs.M):
        rec = {
            "rollout_id": int(rs.rollout_ids[m]),
            "overlap_gap": float(rs.overlap_gap[m]),
            "agents": [poses_to_records(rs.poses[m, i], 1, dt) for i in range(rs.poses.shape[1])],
        }
        if rs.scores is not None:
            rec["score"] = rs.scores[m]
        out.append(rec)
    return {
        "scene_id": rs.scene_id,
        "config_hash": config_hash,
        "checkpoint_hash": checkpoint_hash,
        "seed": seed,
        "frame": "scene_centric",
        "dt": dt,
        "rollouts": out,
    }


@dataclass
class RolloutRecord:
    rollouts: object  # RolloutSet
    config_hash: str
    checkpoint_hash: str
    seed: int
    dt: float


def rollouts_from_dict(d: dict) -> RolloutRecord:
    from .sampler import RolloutSet

    try:
        rolls = d["rollouts"]
        if not rolls:
            raise FormatError(f"scene {d['scene_id']}: no rollouts")
        poses = np.stack([np.stack([records_to_poses(a)[1] for a in r["agents"]]) for r in rolls])
        gaps = np.array([float(r.get("overlap_gap", 0.0)) for r in rolls])
        ids = [int(r["rollout_id"]) for r in rolls]
        scores = [r["score"] for r in rolls] if all("score" in r for r in rolls) else None
        rs = RolloutSet(str(d["scene_id"]), poses, None, gaps, ids, scores)
        return RolloutRecord(rs, str(d["config_hash"]), str(d["checkpoint_hash"]), int(d["seed"]), float(d["dt"]))
    except (KeyError, TypeError, ValueError) as e:
        if isinstance(e, FormatError):
            raise
        raise FormatError(f"rollout record malformed: {e}") from None


def write_rollouts(path: str | Path, records: list[RolloutRecord]) -> None:
    with open(path, "w") as fh:
        for r in records:
            d = rollouts_to_dict(r.rollouts, r.dt, r.config_hash, r.checkpoint_hash, r.seed)
            fh.write(json.dumps(d, separators=(",", ":")) + "\n")


def read_rollouts(path: str | Path) -> list[RolloutRecord]:
    out = []
    with open(path) as fh:
        for n, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                d = json.loads(line)
            except json.JSONDecodeError as e:
                raise FormatError(f"line {n}: invalid JSON ({e.msg})") from None
            out.append(rollouts_from_dict(d))
    return out


PLOT_FIELDS = ("scene_id", "rollout_id", "agent", "t", "x", "y", "heading", "speed")


def write_plot_csv(path: str | Path, records: list[RolloutRecord]) -> None:
    """Long-format trajectories, one row per (scene, rollout, agent, tick)."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(PLOT_FIELDS)
        for r in records:
            rs = r.rollouts
            for m in range(rs.M):
                for i in range(rs.poses.shape[1]):
                    for t, p in enumerate(rs.poses[m, i], 1):
                        w.writerow([rs.scene_id, rs.rollout_ids[m], i, repr(t * r.dt), *(repr(float(v)) for v in p)])
