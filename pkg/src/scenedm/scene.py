"""Scene containers, the scene-centric frame, and model input features."""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

AGENT_TYPES = ("vehicle", "pedestrian", "bicycle")

# pose columns
X, Y, HEADING, SPEED = range(4)


def wrap_angle(a):
    return (np.asarray(a) + np.pi) % (2 * np.pi) - np.pi


@dataclass
class Polyline:
    points: np.ndarray  # (P, 2)
    width: float

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 2)


@dataclass
class Agent:
    type: str
    length: float
    width: float
    history: np.ndarray  # (T_hist, 4) x, y, heading, speed
    future: np.ndarray | None = None  # (T_fut, 4)

    def __post_init__(self):
        if self.type not in AGENT_TYPES:
            raise ValueError(f"unknown agent type {self.type!r}")
        self.history = np.asarray(self.history, dtype=np.float64).reshape(-1, 4)
        if self.future is not None:
            self.future = np.asarray(self.future, dtype=np.float64).reshape(-1, 4)

    @property
    def last_pose(self) -> np.ndarray:
        return self.history[-1]


@dataclass
class Scene:
    scene_id: str
    polylines: list[Polyline]
    agents: list[Agent]
    ego_index: int = 0
    dt: float = 0.5
    meta: dict = field(default_factory=dict)

    @property
    def n_agents(self) -> int:
        return len(self.agents)

    @property
    def has_future(self) -> bool:
        return bool(self.agents) and all(a.future is not None for a in self.agents)

    def boxes(self) -> tuple[np.ndarray, np.ndarray]:
        return (np.array([a.length for a in self.agents]), np.array([a.width for a in self.agents]))

    def future_poses(self) -> np.ndarray:
        """(N, T, 4) ground-truth future poses."""
        return np.stack([a.future for a in self.agents])

    def last_poses(self) -> np.ndarray:
        return np.stack([a.last_pose for a in self.agents])


def transform_poses(poses: np.ndarray, origin: np.ndarray, heading: float) -> np.ndarray:
    """Express poses (..., 4) in the frame at ``origin`` rotated by ``heading``."""
    c, s = np.cos(heading), np.sin(heading)
    out = np.array(poses, dtype=np.float64, copy=True)
    dx, dy = poses[..., X] - origin[0], poses[..., Y] - origin[1]
    out[..., X] = c * dx + s * dy
    out[..., Y] = -s * dx + c * dy
    out[..., HEADING] = wrap_angle(poses[..., HEADING] - heading)
    return out


def transform_points(points: np.ndarray, origin: np.ndarray, heading: float) -> np.ndarray:
    c, s = np.cos(heading), np.sin(heading)
    d = np.asarray(points, dtype=np.float64) - np.asarray(origin)[:2]
    return np.stack([c * d[..., 0] + s * d[..., 1], -s * d[..., 0] + c * d[..., 1]], axis=-1)


def to_scene_frame(scene: Scene) -> Scene:
    """Re-centre so the ego's current pose is the origin facing +x."""
    if not scene.agents:
        raise ValueError("scene has no agents")
    ego = scene.agents[scene.ego_index].last_pose
    origin, heading = ego[:2].copy(), float(ego[HEADING])
    agents = [
        replace(
            a,
            history=transform_poses(a.history, origin, heading),
            future=None if a.future is None else transform_poses(a.future, origin, heading),
        )
        for a in scene.agents
    ]
    polylines = [Polyline(transform_points(p.points, origin, heading), p.width) for p in scene.polylines]
    return replace(scene, agents=agents, polylines=polylines)


def velocity_states(last_pose: np.ndarray, future: np.ndarray, dt: float) -> np.ndarray:
    """Per-step (vx, vy, yaw_rate) whose Euler integral reproduces ``future``.

    ``last_pose`` is (..., 4) and ``future`` (..., T, 4).
    """
    pos = np.concatenate([last_pose[..., None, :2], future[..., :2]], axis=-2)
    head = np.concatenate([last_pose[..., None, HEADING], future[..., HEADING]], axis=-1)
    v = np.diff(pos, axis=-2) / dt
    w = wrap_angle(np.diff(head, axis=-1)) / dt
    return np.concatenate([v, w[..., None]], axis=-1)


def integrate_velocities(vel: np.ndarray, last_pose: np.ndarray, dt: float) -> np.ndarray:
    """Explicit Euler integration of (vx, vy, yaw_rate) from ``last_pose``.

    Returns (..., T, 4) poses with speed = |(vx, vy)|.
    """
    vel = np.asarray(vel, dtype=np.float64)
    out = np.empty(vel.shape[:-1] + (4,))
    out[..., X] = last_pose[..., None, X] + np.cumsum(vel[..., 0], axis=-1) * dt
    out[..., Y] = last_pose[..., None, Y] + np.cumsum(vel[..., 1], axis=-1) * dt
    out[..., HEADING] = wrap_angle(last_pose[..., None, HEADING] + np.cumsum(vel[..., 2], axis=-1) * dt)
    out[..., SPEED] = np.hypot(vel[..., 0], vel[..., 1])
    return out


# --------------------------------------------------------------------------
# model features

POS_SCALE = 20.0
SPEED_SCALE = 10.0


def split_polyline(points: np.ndarray, max_len: float) -> list[np.ndarray]:
    """Cut a polyline into pieces no longer than ``max_len`` metres."""
    seg = np.linalg.norm(np.diff(points, axis=0), axis=1)
    total = float(seg.sum())
    if total <= max_len or len(points) < 2:
        return [points]
    n = int(np.ceil(total / max_len))
    cum = np.concatenate([[0.0], np.cumsum(seg)])
    cuts = np.linspace(0.0, total, n + 1)
    pieces = []
    for a, b in zip(cuts[:-1], cuts[1:]):
        inner = points[(cum > a) & (cum < b)]
        pa = _interp_polyline(points, cum, a)
        pb = _interp_polyline(points, cum, b)
        pieces.append(np.vstack([pa, inner, pb]))
    return pieces


def _interp_polyline(points: np.ndarray, cum: np.ndarray, s: float) -> np.ndarray:
    return np.stack([np.interp(s, cum, points[:, 0]), np.interp(s, cum, points[:, 1])])


def resample_polyline(points: np.ndarray, n: int) -> np.ndarray:
    if len(points) == 1:
        return np.repeat(points, n, axis=0)
    cum = np.concatenate([[0.0], np.cumsum(np.linalg.norm(np.diff(points, axis=0), axis=1))])
    s = np.linspace(0.0, cum[-1], n)
    return np.stack([np.interp(s, cum, points[:, 0]), np.interp(s, cum, points[:, 1])], axis=1)


def point_polyline_distance(p: np.ndarray, points: np.ndarray) -> np.ndarray:
    """Distance from points ``p`` (..., 2) to the polyline ``points`` (P, 2)."""
    p = np.asarray(p, dtype=np.float64)
    if len(points) == 1:
        return np.linalg.norm(p - points[0], axis=-1)
    a, b = points[:-1], points[1:]
    ab = b - a
    denom = np.maximum((ab * ab).sum(-1), 1e-12)
    ap = p[..., None, :] - a
    u = np.clip((ap * ab).sum(-1) / denom, 0.0, 1.0)
    closest = a + u[..., None] * ab
    return np.linalg.norm(p[..., None, :] - closest, axis=-1).min(axis=-1)


@dataclass
class SceneFeatures:
    """Fixed-shape model inputs for one scene padded to ``n_max`` agents."""

    hist: np.ndarray  # (N, F)
    poly: np.ndarray  # (N, A, P, 3)
    poly_mask: np.ndarray  # (N, A) bool, True = real polyline
    agent_mask: np.ndarray  # (N,) bool
    last_pose: np.ndarray  # (N, 4)


def hist_feature_dim(t_hist: int) -> int:
    return 5 * t_hist + len(AGENT_TYPES) + 2


def scene_features(scene: Scene, n_max: int, t_hist: int, n_polylines: int = 4, poly_points: int = 8,
                   max_piece_len: float = 20.0) -> SceneFeatures:
    """Features for a scene already in the scene-centric frame."""
    if not scene.agents:
        raise ValueError(f"scene {scene.scene_id}: empty scene")
    if scene.n_agents > n_max:
        raise ValueError(f"scene {scene.scene_id}: {scene.n_agents} agents exceeds n_max={n_max}")
    F = hist_feature_dim(t_hist)
    hist = np.zeros((n_max, F))
    poly = np.zeros((n_max, n_polylines, poly_points, 3))
    poly_mask = np.zeros((n_max, n_polylines), dtype=bool)
    agent_mask = np.zeros(n_max, dtype=bool)
    last_pose = np.zeros((n_max, 4))

    pieces, widths = [], []
    for pl in scene.polylines:
        for piece in split_polyline(pl.points, max_piece_len):
            pieces.append(piece)
            widths.append(pl.width)
    resampled = [resample_polyline(p, poly_points) for p in pieces]

    for i, a in enumerate(scene.agents):
        h = a.history
        if len(h) != t_hist:
            raise ValueError(f"scene {scene.scene_id}: agent {i} has {len(h)} history ticks, expected {t_hist}")
        per_tick = np.stack(
            [h[:, X] / POS_SCALE, h[:, Y] / POS_SCALE, np.cos(h[:, HEADING]), np.sin(h[:, HEADING]), h[:, SPEED] / SPEED_SCALE],
            axis=1,
        )
        onehot = np.zeros(len(AGENT_TYPES))
        onehot[AGENT_TYPES.index(a.type)] = 1.0
        hist[i] = np.concatenate([per_tick.reshape(-1), onehot, [a.length / 5.0, a.width / 2.0]])
        agent_mask[i] = True
        lp = a.last_pose
        last_pose[i] = lp
        if pieces:
            d = np.array([point_polyline_distance(lp[:2], p) for p in pieces])
            order = np.argsort(d, kind="stable")[:n_polylines]
            for j, idx in enumerate(order):
                local = transform_points(resampled[idx], lp[:2], lp[HEADING]) / POS_SCALE
                poly[i, j, :, :2] = local
                poly[i, j, :, 2] = widths[idx] / 4.0
                poly_mask[i, j] = True
    return SceneFeatures(hist, poly, poly_mask, agent_mask, last_pose)
