"""Histogram-likelihood realism metrics for generated scene ensembles.

Every metric fits a Laplace-smoothed histogram to the generated features of
a scene (pooled over rollouts, agents and steps) and scores the ground-truth
features as ``exp(-mean NLL)``. Scores lie in (0, 1]; higher is better.
"""
from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .scene import HEADING, SPEED, Scene, point_polyline_distance, wrap_angle
from .scoring import collision_matrix, offroad_matrix, penetration_depth_arrays


@dataclass(frozen=True)
class BinSpec:
    lo: float
    hi: float
    n: int = 32
    overflow: bool = True

    @property
    def n_bins(self) -> int:
        return self.n + (2 if self.overflow else 0)

    def index(self, values: np.ndarray) -> np.ndarray:
        v = np.asarray(values, dtype=np.float64).reshape(-1)
        idx = np.floor((v - self.lo) / (self.hi - self.lo) * self.n).astype(np.int64)
        if self.overflow:
            return np.clip(idx, -1, self.n) + 1
        return np.clip(idx, 0, self.n - 1)


BINARY = BinSpec(-0.5, 1.5, 2, overflow=False)

DEFAULT_BINS = {
    "linear_speed": BinSpec(0.0, 15.0),
    "linear_accel": BinSpec(-8.0, 8.0),
    "angular_speed": BinSpec(-1.0, 1.0),
    "angular_accel": BinSpec(-2.0, 2.0),
    "dist_to_object": BinSpec(-2.0, 30.0),
    "collision_rate": BINARY,
    "dist_to_roadedge": BinSpec(-4.0, 4.0),
    "offroad_rate": BINARY,
}

FAMILIES = {
    "kinematic": ("linear_speed", "linear_accel", "angular_speed", "angular_accel"),
    "interactive": ("dist_to_object", "collision_rate"),
    "map": ("dist_to_roadedge", "offroad_rate"),
}
METRIC_NAMES = tuple(n for fam in FAMILIES.values() for n in fam)


def histogram(samples: np.ndarray, bins: BinSpec, alpha: float = 1.0) -> np.ndarray:
    idx = bins.index(samples)
    counts = np.bincount(idx, minlength=bins.n_bins).astype(np.float64)
    return (counts + alpha) / (counts.sum() + alpha * bins.n_bins)


def likelihood_score(generated: np.ndarray, reference: np.ndarray, bins: BinSpec, alpha: float = 1.0) -> float:
    """``exp(-mean NLL)`` of ``reference`` under the smoothed histogram of
    ``generated``."""
    generated = np.asarray(generated).reshape(-1)
    reference = np.asarray(reference).reshape(-1)
    if generated.size == 0 or reference.size == 0:
        raise ValueError("likelihood_score needs non-empty samples and reference")
    p = histogram(generated, bins, alpha)
    return float(np.exp(np.mean(np.log(p[bins.index(reference)]))))


# --------------------------------------------------------------------------
# features


def kinematic_features(poses: np.ndarray, last_pose: np.ndarray, dt: float) -> dict[str, np.ndarray]:
    """Speeds and accelerations of poses (..., T, 4) following ``last_pose`` (..., 4).

    Angular speed uses the heading change over each step, so the step from
    the last observed pose is included.
    """
    speed = poses[..., SPEED]
    head = np.concatenate([last_pose[..., None, HEADING], poses[..., HEADING]], axis=-1)
    omega = wrap_angle(np.diff(head, axis=-1)) / dt
    return {
        "linear_speed": np.abs(speed),
        "linear_accel": np.diff(np.abs(speed), axis=-1) / dt,
        "angular_speed": np.abs(omega),
        "angular_accel": np.diff(omega, axis=-1) / dt,
    }


def interactive_features(poses: np.ndarray, lengths, widths) -> dict[str, np.ndarray]:
    """Per agent-step box separation to the nearest other agent and collision flags.

    ``poses`` is (N, T, 4). Separation is the negated penetration depth.
    """
    N, T = poses.shape[:2]
    coll = collision_matrix(poses, np.asarray(lengths, float), np.asarray(widths, float)).astype(np.float64)
    if N < 2:
        return {"dist_to_object": np.empty(0), "collision_rate": coll.reshape(-1)}
    lengths, widths = np.asarray(lengths, float), np.asarray(widths, float)
    i, j = np.triu_indices(N, 1)
    sep = -penetration_depth_arrays(
        poses[i, :, :2], poses[i, :, HEADING], lengths[i, None], widths[i, None],
        poses[j, :, :2], poses[j, :, HEADING], lengths[j, None], widths[j, None],
    )
    dmat = np.full((N, N, T), np.inf)
    dmat[i, j] = sep
    dmat[j, i] = sep
    return {"dist_to_object": dmat.min(axis=1).reshape(-1), "collision_rate": coll.reshape(-1)}


def map_features(poses: np.ndarray, road) -> dict[str, np.ndarray]:
    """Signed distance to the nearest road edge (negative inside) and offroad flags."""
    centers = poses[..., :2]
    if road:
        edge = np.min([point_polyline_distance(centers, pl.points) - pl.width / 2 for pl in road], axis=0)
    else:
        edge = np.full(poses.shape[:-1], np.inf)
    off = offroad_matrix(poses, road).astype(np.float64)
    return {"dist_to_roadedge": edge.reshape(-1), "offroad_rate": off.reshape(-1)}


def scene_feature_sets(poses: np.ndarray, scene: Scene) -> dict[str, np.ndarray]:
    """All metric features of one joint future (N, T, 4) of ``scene``."""
    lengths, widths = scene.boxes()
    feats = {k: v.reshape(-1) for k, v in kinematic_features(poses, scene.last_poses(), scene.dt).items()}
    feats.update(interactive_features(poses, lengths, widths))
    feats.update(map_features(poses, scene.polylines))
    return feats


def jerk_metric(speeds: np.ndarray, dt: float) -> float:
    """Mean |a[t+1] - a[t]| / dt over all trajectories; ``speeds`` is (..., T)."""
    speeds = np.asarray(speeds, dtype=np.float64)
    if speeds.size == 0:
        raise ValueError("jerk_metric needs at least one trajectory")
    acc = np.diff(speeds, axis=-1) / dt
    return float(np.mean(np.abs(np.diff(acc, axis=-1)) / dt))


def rollout_jerk(rollout_sets, dt: float) -> float:
    return jerk_metric(np.concatenate([r.poses[..., SPEED].reshape(-1, r.poses.shape[2]) for r in rollout_sets]), dt)


# --------------------------------------------------------------------------
# report


@dataclass
class MetricReport:
    linear_speed: float
    linear_accel: float
    angular_speed: float
    angular_accel: float
    dist_to_object: float
    collision_rate: float
    dist_to_roadedge: float
    offroad_rate: float
    kinematic: float = field(init=False)
    interactive: float = field(init=False)
    map: float = field(init=False)
    realism: float = field(init=False)

    def __post_init__(self):
        fam = {name: float(np.mean([getattr(self, m) for m in members])) for name, members in FAMILIES.items()}
        self.kinematic, self.interactive, self.map = fam["kinematic"], fam["interactive"], fam["map"]
        self.realism = float(np.mean(list(fam.values())))

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    CSV_FIELDS = ("kinematic", "interactive", "map", "realism")

    def csv_row(self) -> str:
        buf = io.StringIO()
        csv.writer(buf).writerow([f"{getattr(self, k):.6f}" for k in self.CSV_FIELDS])
        return buf.getvalue().strip()


def evaluate(rollout_sets, scenes: list[Scene], bins: dict[str, BinSpec] | None = None, alpha: float = 1.0) -> MetricReport:
    """Score generated ensembles against ground-truth futures.

    ``rollout_sets`` and ``scenes`` are aligned; scenes must already be in the
    scene-centric frame the rollouts were generated in.
    """
    bins = bins or DEFAULT_BINS
    if len(rollout_sets) != len(scenes):
        raise ValueError(f"{len(rollout_sets)} rollout sets for {len(scenes)} scenes")
    per_metric: dict[str, list[float]] = {m: [] for m in METRIC_NAMES}
    for rs, sc in zip(rollout_sets, scenes):
        if rs.poses.shape[1] != sc.n_agents:
            raise ValueError(f"scene {sc.scene_id}: rollouts have {rs.poses.shape[1]} agents, scene has {sc.n_agents}")
        ref = scene_feature_sets(sc.future_poses(), sc)
        gen_parts = [scene_feature_sets(rs.poses[m], sc) for m in range(rs.M)]
        for name in METRIC_NAMES:
            r = ref[name][np.isfinite(ref[name])]
            g = np.concatenate([p[name] for p in gen_parts])
            g = g[np.isfinite(g)]
            if r.size == 0:
                continue
            if g.size == 0:
                # nothing generated for a metric the reference has: only smoothing mass remains
                g = np.full(1, np.inf)
            per_metric[name].append(likelihood_score(g, r, bins[name], alpha))
    values = {m: float(np.mean(v)) if v else 1.0 for m, v in per_metric.items()}
    return MetricReport(**values)


def report_from_dict(d: dict) -> MetricReport:
    return MetricReport(**{m: d[m] for m in METRIC_NAMES})
