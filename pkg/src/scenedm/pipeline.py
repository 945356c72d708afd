"""Multi-scene sampling, scoring and the ablation grid."""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, replace

import numpy as np

from .metrics import MetricReport, evaluate, rollout_jerk
from .model import DenoiserConfig
from .sampler import RolloutSet, SamplerConfig, sample_scene
from .scene import Scene, to_scene_frame
from .schedule import NoiseSchedule, make_schedule
from .scoring import filter_rollouts, score_rollouts
from .training import TrainConfig, build_training_set, train


def sample_scenes(model, sched: NoiseSchedule, normalizer, scenes: list[Scene], scfg: SamplerConfig) -> list[RolloutSet]:
    """One RolloutSet per scene; scene ``i`` uses seed stream ``(seed, i, m)``."""
    return [sample_scene(sc, model, sched, scfg, normalizer, scene_index=i) for i, sc in enumerate(scenes)]


def score_sets(rsets: list[RolloutSet], scenes: list[Scene], counting: str = "timesteps") -> None:
    for rs, sc in zip(rsets, scenes):
        rs.scores = score_rollouts(rs, to_scene_frame(sc), counting)


def filter_sets(rsets: list[RolloutSet], scenes: list[Scene], keep: int, counting: str = "timesteps") -> list[RolloutSet]:
    out = []
    for rs, sc in zip(rsets, scenes):
        if rs.scores is None:
            rs.scores = score_rollouts(rs, to_scene_frame(sc), counting)
        out.append(filter_rollouts(rs, keep))
    return out


def mean_scene_score(rsets: list[RolloutSet]) -> float:
    return float(np.mean([s["scene_score"] for rs in rsets for s in rs.scores]))


def mean_overlap_gap(rsets: list[RolloutSet]) -> float:
    return float(np.mean(np.concatenate([rs.overlap_gap for rs in rsets])))


def evaluate_sets(rsets: list[RolloutSet], scenes: list[Scene], alpha: float = 1.0) -> MetricReport:
    return evaluate(rsets, [to_scene_frame(s) for s in scenes], alpha=alpha)


# --------------------------------------------------------------------------
# ablation grid


@dataclass(frozen=True)
class Variant:
    name: str
    agent_attention: bool
    augment: bool
    noise_consistent: bool
    smooth_loss: bool
    guidance: bool
    filter: bool

    def train_key(self) -> tuple:
        return (self.agent_attention, self.augment, self.noise_consistent, self.smooth_loss)


VARIANTS = (
    Variant("Baseline", False, False, False, False, False, False),
    Variant("+Agent int", True, False, False, False, False, False),
    Variant("+Seq augm", True, True, False, False, False, False),
    Variant("+Noise const +Smooth", True, True, True, True, False, False),
    Variant("SceneDM", True, True, True, True, True, False),
    Variant("SceneDMF", True, True, True, True, True, True),
)

TABLE_FIELDS = ("Method", "Agent int", "Seq augm", "Noise const", "Smooth loss", "Const guidance", "Comp filter",
                "Kinematic", "Interactive", "Map", "Realism", "jerk", "overlap_gap")


@dataclass
class AblationRow:
    variant: Variant
    report: MetricReport
    jerk: float
    overlap_gap: float

    def as_list(self) -> list:
        v = self.variant
        flags = ["x" if f else "" for f in (v.agent_attention, v.augment, v.noise_consistent, v.smooth_loss, v.guidance, v.filter)]
        r = self.report
        return [v.name, *flags, *(f"{x:.4f}" for x in (r.kinematic, r.interactive, r.map, r.realism, self.jerk, self.overlap_gap))]


def variant_configs(v: Variant, dcfg: DenoiserConfig, tcfg: TrainConfig, scfg: SamplerConfig, lam: float = 1.0):
    dc = replace(dcfg, agent_attention=v.agent_attention, augment=v.augment)
    tc = replace(tcfg, noise="consistent" if v.noise_consistent else "independent", lam=lam if v.smooth_loss else 0.0)
    sc = replace(scfg, guidance="noise" if v.guidance else "off", noise="consistent" if v.noise_consistent else "independent")
    return dc, tc, sc


def run_variants(variants, train_scenes: list[Scene], eval_scenes: list[Scene], dcfg: DenoiserConfig, tcfg: TrainConfig,
                 scfg: SamplerConfig, sched_kind: str = "linear", beta_range=None, oversample: float = 3.0,
                 lam: float = 1.0, alpha: float = 1.0, counting: str = "timesteps", on_row=None) -> list[AblationRow]:
    """Train each distinct model once, then sample, filter and evaluate every variant."""
    sched = make_schedule(sched_kind, dcfg.K, beta_range)
    trained: dict[tuple, tuple] = {}
    rows = []
    for v in variants:
        dc, tc, sc = variant_configs(v, dcfg, tcfg, scfg, lam)
        if v.train_key() not in trained:
            data = build_training_set(train_scenes, dc)
            res = train(data, dc, tc, sched)
            trained[v.train_key()] = (res.model, res.normalizer)
        model, norm = trained[v.train_key()]
        if v.filter:
            pool = replace(sc, M=int(math.ceil(sc.M * oversample)))
            rsets = filter_sets(sample_scenes(model, sched, norm, eval_scenes, pool), eval_scenes, sc.M, counting)
        else:
            rsets = sample_scenes(model, sched, norm, eval_scenes, sc)
        dt = eval_scenes[0].dt
        row = AblationRow(v, evaluate_sets(rsets, eval_scenes, alpha), rollout_jerk(rsets, dt), mean_overlap_gap(rsets))
        rows.append(row)
        if on_row is not None:
            on_row(row)
    return rows


def table_csv(rows: list[AblationRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(TABLE_FIELDS)
    for r in rows:
        w.writerow(r.as_list())
    return buf.getvalue()
