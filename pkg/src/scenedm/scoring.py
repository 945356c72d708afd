"""Collision and road-adherence scoring of generated scenes.

Per agent, ``r1`` counts timesteps in collision with any other agent and
``r2`` counts timesteps whose box centre lies off every road polyline. The
agent score is ``f = r1 + r2``; the scene score is the mean ``f`` over
agents, so lower is better.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .scene import HEADING, Polyline, X, Y, point_polyline_distance


@dataclass(frozen=True)
class OrientedBox:
    x: float
    y: float
    heading: float
    length: float
    width: float

    def __post_init__(self):
        if self.length <= 0 or self.width <= 0:
            raise ValueError("box length and width must be positive")

    @property
    def center(self) -> np.ndarray:
        return np.array([self.x, self.y])

    def corners(self) -> np.ndarray:
        return box_corners(self.center, self.heading, self.length, self.width)


def box_corners(center, heading, length, width) -> np.ndarray:
    c, s = np.cos(heading), np.sin(heading)
    ax = np.array([c, s]) * length / 2
    ay = np.array([-s, c]) * width / 2
    ctr = np.asarray(center, dtype=np.float64)
    return np.stack([ctr + ax + ay, ctr - ax + ay, ctr - ax - ay, ctr + ax - ay])


def penetration_depth_arrays(ca, ha, la, wa, cb, hb, lb, wb) -> np.ndarray:
    """Vectorised separating-axis depth over broadcastable box arrays.

    Centres are (..., 2); headings and extents (...). Positive means overlap.
    """
    ca, cb = np.asarray(ca, dtype=np.float64), np.asarray(cb, dtype=np.float64)
    ua = np.stack([np.cos(ha), np.sin(ha)], -1)
    va = np.stack([-np.sin(ha), np.cos(ha)], -1)
    ub = np.stack([np.cos(hb), np.sin(hb)], -1)
    vb = np.stack([-np.sin(hb), np.cos(hb)], -1)
    la, wa, lb, wb = (np.asarray(v, dtype=np.float64) / 2 for v in (la, wa, lb, wb))
    d = cb - ca

    def dot(p, q):
        return (p * q).sum(-1)

    overlaps = []
    for axis, ra in ((ua, la), (va, wa)):
        rb = lb * np.abs(dot(axis, ub)) + wb * np.abs(dot(axis, vb))
        overlaps.append(ra + rb - np.abs(dot(axis, d)))
    for axis, rb in ((ub, lb), (vb, wb)):
        ra = la * np.abs(dot(axis, ua)) + wa * np.abs(dot(axis, va))
        overlaps.append(ra + rb - np.abs(dot(axis, d)))
    return np.min(np.stack(overlaps), axis=0)


def penetration_depth(a: OrientedBox, b: OrientedBox) -> float:
    return float(penetration_depth_arrays(a.center, a.heading, a.length, a.width, b.center, b.heading, b.length, b.width))


def _count(violations: np.ndarray, counting: str) -> np.ndarray:
    """Count violating steps along the last axis, or entry events when
    ``counting == 'episodes'``."""
    if counting == "timesteps":
        return violations.sum(axis=-1)
    if counting == "episodes":
        starts = violations[..., :1].astype(int)
        entries = (violations[..., 1:] & ~violations[..., :-1]).sum(axis=-1)
        return starts[..., 0] + entries
    raise ValueError(f"unknown counting unit {counting!r}")


def collision_matrix(poses: np.ndarray, lengths: np.ndarray, widths: np.ndarray, valid: np.ndarray | None = None) -> np.ndarray:
    """(N, T) boolean: agent i collides with some other agent at step t."""
    N, T = poses.shape[:2]
    if valid is None:
        valid = np.ones(N, dtype=bool)
    hit = np.zeros((N, T), dtype=bool)
    radius = 0.5 * np.hypot(lengths, widths)
    for i in range(N):
        if not valid[i]:
            continue
        for j in range(i + 1, N):
            if not valid[j]:
                continue
            dist = np.hypot(poses[i, :, X] - poses[j, :, X], poses[i, :, Y] - poses[j, :, Y])
            near = dist <= radius[i] + radius[j]
            if not near.any():
                continue
            t = np.nonzero(near)[0]
            depth = penetration_depth_arrays(
                poses[i, t, :2], poses[i, t, HEADING], lengths[i], widths[i],
                poses[j, t, :2], poses[j, t, HEADING], lengths[j], widths[j],
            )
            coll = t[depth > 0]
            hit[i, coll] = True
            hit[j, coll] = True
    return hit


def count_collisions(poses: np.ndarray, lengths, widths, valid=None, counting: str = "timesteps") -> np.ndarray:
    """r1 for every agent of one rollout; ``poses`` is (N, T, 4)."""
    return _count(collision_matrix(poses, np.asarray(lengths, float), np.asarray(widths, float), valid), counting)


def offroad_matrix(poses: np.ndarray, road: list[Polyline]) -> np.ndarray:
    """(N, T) boolean: box centre farther than half-width from every polyline."""
    if not road:
        return np.ones(poses.shape[:2], dtype=bool)
    centers = poses[..., :2]
    on = np.zeros(poses.shape[:2], dtype=bool)
    for pl in road:
        on |= point_polyline_distance(centers, pl.points) <= pl.width / 2
    return ~on


def count_offroad(poses: np.ndarray, road: list[Polyline], counting: str = "timesteps") -> np.ndarray:
    """r2 for every agent of one rollout; an empty road counts every step."""
    return _count(offroad_matrix(poses, road), counting)


@dataclass
class TrajectoryScore:
    r1: int
    r2: int

    @property
    def f(self) -> int:
        return self.r1 + self.r2

    def to_dict(self) -> dict:
        return {"r1": self.r1, "r2": self.r2, "f": self.f}


def score_rollout(poses: np.ndarray, lengths, widths, road: list[Polyline], valid=None,
                  counting: str = "timesteps") -> list[TrajectoryScore]:
    r1 = count_collisions(poses, lengths, widths, valid, counting)
    r2 = count_offroad(poses, road, counting)
    n = poses.shape[0]
    valid = np.ones(n, dtype=bool) if valid is None else np.asarray(valid)
    return [TrajectoryScore(int(r1[i]), int(r2[i])) for i in range(n) if valid[i]]


def score_scene(per_agent: list[TrajectoryScore] | list[int]) -> float:
    """Mean agent score; lower is better."""
    if len(per_agent) == 0:
        raise ValueError("scene has no valid agents to score")
    fs = [s.f if isinstance(s, TrajectoryScore) else s for s in per_agent]
    return float(np.mean(fs))


def score_report(rollout_id: int, per_agent: list[TrajectoryScore]) -> dict:
    return {
        "rollout_id": rollout_id,
        "per_agent": [s.to_dict() for s in per_agent],
        "scene_score": score_scene(per_agent),
    }


def score_rollouts(rollouts, scene, counting: str = "timesteps") -> list[dict]:
    """Score every rollout of a RolloutSet against its (scene-frame) scene."""
    lengths, widths = scene.boxes()
    reports = []
    for m in range(rollouts.M):
        per_agent = score_rollout(rollouts.poses[m], lengths, widths, scene.polylines, counting=counting)
        reports.append(score_report(rollouts.rollout_ids[m], per_agent))
    return reports


def select_best(scene_scores, keep: int) -> list[int]:
    """Indices of the ``keep`` lowest scores, ties broken by index."""
    scene_scores = list(scene_scores)
    if keep > len(scene_scores):
        raise ValueError(f"cannot keep {keep} of {len(scene_scores)} rollouts")
    if keep < 1:
        raise ValueError("keep must be >= 1")
    order = sorted(range(len(scene_scores)), key=lambda i: (scene_scores[i], i))
    return sorted(order[:keep])


def filter_rollouts(rollouts, keep: int, scene=None, counting: str = "timesteps"):
    """Keep the ``keep`` best rollouts by scene score, preserving order."""
    if rollouts.scores is None:
        if scene is None:
            raise ValueError("rollouts are unscored and no scene was given")
        rollouts.scores = score_rollouts(rollouts, scene, counting)
    idx = select_best([s["scene_score"] for s in rollouts.scores], keep)
    return rollouts.subset(idx)

