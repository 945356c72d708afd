"""End-to-end acceptance checks; each test prints one PASS/FAIL line.

Run directly (``python3 tests/test_acceptance.py``) or through pytest, which
repeats the lines in its terminal summary.
"""
from __future__ import annotations

import math
import time
import zlib
from fractions import Fraction

import numpy as np
import pytest

from helpers import (check_op_grad, grid_overlap, grid_resolution, minkowski_depth, model_grad_error, op_case,
                     report)
from scenedm import tensor as tn
from scenedm.augment import augment, augment_noise, de_augment, overlap_gap, split_halves
from scenedm.data import GenSpec, gen_data
from scenedm.metrics import DEFAULT_BINS, METRIC_NAMES, evaluate, rollout_jerk, scene_feature_sets
from scenedm.model import DenoiserConfig
from scenedm.pipeline import evaluate_sets, filter_sets, mean_overlap_gap, sample_scenes
from scenedm.sampler import RolloutSet, SamplerConfig, ddim_step, guide, run_reverse
from scenedm.scene import to_scene_frame
from scenedm.schedule import diffuse, make_schedule
from scenedm.scoring import (OrientedBox, collision_matrix, filter_rollouts, offroad_matrix, penetration_depth,
                             penetration_depth_arrays)
from scenedm.training import TrainConfig, build_training_set, train

# desk-scale experiment settings shared by the ablation criteria
SEEDS = (0, 1, 2, 3, 4)
ABLATION_STEPS = 2000
EVAL_SCENES = 10
M_KEEP, M_POOL = 8, 24


# -------------------------------------------------------------------------
# 1. exact inversion


def test_criterion_1_exact_inversion():
    t0 = time.perf_counter()
    rng = np.random.default_rng(101)
    failures = []

    for shape in ((16, 3), (4, 16, 3), (2, 5, 16, 3), (2, 1)):
        s0 = rng.standard_normal(shape) * 10
        if not np.array_equal(de_augment(augment(s0)), s0):
            failures.append(f"de_augment(augment) {shape}")
        E = augment_noise(s0)
        f, r = split_halves(E)
        if not (np.array_equal(r[..., :-1, :], f[..., 1:, :]) and overlap_gap(E) == 0.0):
            failures.append(f"augment_noise overlap {shape}")

    for _ in range(50):
        x = rng.standard_normal((int(rng.integers(1, 4)), int(rng.integers(2, 10)), 6))
        g = guide(x)
        f0, r0 = split_halves(x)
        f1, r1 = split_halves(g)
        if not np.array_equal(guide(g), g) or overlap_gap(g) != 0.0:
            failures.append("guide idempotence")
        if not np.array_equal(r1[:, :-1], f1[:, 1:]):
            failures.append("guide overlap")
        if not (np.array_equal(f1[:, 0], f0[:, 0]) and np.array_equal(r1[:, -1], r0[:, -1])):
            failures.append("guide ends")
    c = augment_noise(rng.standard_normal((3, 16, 3)))
    if not np.array_equal(guide(c), c):
        failures.append("guide preserves consistent input")

    worst_x0 = 0.0
    for kind in ("linear", "cosine"):
        s = make_schedule(kind, 100)
        for k in range(1, 101):
            S, e = rng.standard_normal((3, 15, 6)), rng.standard_normal((3, 15, 6))
            a, ap = s.alpha_bar[k], s.alpha_bar[k - 1]
            ref = math.sqrt(ap) * (S - math.sqrt(1 - a) * e) / math.sqrt(a) + math.sqrt(1 - ap) * e
            worst_x0 = max(worst_x0, float(np.max(np.abs(ddim_step(S, k, e, s) - ref))))

    s = make_schedule("linear", 100)
    worst_rec = 0.0
    for stride in (1, 3, 7):
        S0 = augment(rng.standard_normal((4, 16, 3)))
        E = augment_noise(rng.standard_normal((4, 16, 3)))
        SK = math.sqrt(s.alpha_bar[-1]) * S0 + math.sqrt(1 - s.alpha_bar[-1]) * E
        out = run_reverse(SK, lambda S, k: E, s, "noise", stride)
        worst_rec = max(worst_rec, float(np.max(np.abs(out - S0))))

    elapsed = time.perf_counter() - t0
    ok = not failures and worst_x0 <= 1e-12 and worst_rec <= 1e-9 and elapsed < 10
    report(1, ok, f"bit-exact checks {'ok' if not failures else failures[:3]}, x0-form err {worst_x0:.1e}, "
                  f"oracle recovery err {worst_rec:.1e}, {elapsed:.1f}s")
    assert ok


# -------------------------------------------------------------------------
# 2. gradients


def test_criterion_2_gradients():
    t0 = time.perf_counter()
    worst = {}
    for kind in tn.OP_KINDS:
        rng = np.random.default_rng(zlib.crc32(kind.encode()))
        errs = []
        for _ in range(20):
            build, inputs = op_case(kind, rng)
            errs.append(check_op_grad(build, inputs, rng, h=1e-6))
        worst[kind] = max(errs)
    op_err = max(worst.values())
    full = model_grad_error(30)
    elapsed = time.perf_counter() - t0
    ok = op_err < 1e-5 and full < 1e-4 and elapsed < 60
    report(2, ok, f"{len(worst)} ops worst rel err {op_err:.1e} ({max(worst, key=worst.get)}), "
                  f"full hybrid loss rel err {full:.1e}, {elapsed:.1f}s")
    assert ok


# -------------------------------------------------------------------------
# 3. forward-process statistics


def test_criterion_3_forward_statistics():
    s = make_schedule("linear", 100)
    rng = np.random.default_rng(7)
    n = 100_000
    worst_mean = worst_var = 0.0
    # the clean value is chosen per step so that 2% of the marginal mean is
    # several standard errors wide, otherwise the relative check is just noise
    for k, s0 in ((1, 1.7), (25, 1.7), (60, 50.0), (100, 200.0)):
        x = diffuse(np.full(n, s0), k, rng.standard_normal(n), s)
        mu, var = math.sqrt(s.alpha_bar[k]) * s0, 1 - s.alpha_bar[k]
        assert 0.02 * abs(mu) > 4 * math.sqrt(var / n)
        worst_mean = max(worst_mean, abs(x.mean() / mu - 1))
        worst_var = max(worst_var, abs(x.var() / var - 1))

    E = augment_noise(rng.standard_normal((n, 4, 1)))
    m = E.mean(axis=-1)
    corr = [float(np.corrcoef(m[:, t], m[:, t + 1])[0, 1]) for t in range(2)]
    worst_corr = max(abs(r - 0.5) for r in corr)
    ok = worst_mean < 0.02 and worst_var < 0.02 and worst_corr < 0.01
    report(3, ok, f"mean rel err {worst_mean:.4f}, variance rel err {worst_var:.4f}, "
                  f"overlap correlation {corr[0]:.4f}/{corr[1]:.4f}")
    assert ok


# -------------------------------------------------------------------------
# 4. smoke training


def test_criterion_4_smoke_training():
    t0 = time.perf_counter()
    cfg = DenoiserConfig()
    assert (cfg.n_max, cfg.T, cfg.H, cfg.D, cfg.K) == (8, 16, 3, 64, 100)
    data = build_training_set(gen_data(GenSpec(n_scenes=200, seed=0)), cfg)
    sched = make_schedule("linear", cfg.K)
    tcfg = TrainConfig(steps=500, seed=0)
    a = train(data, cfg, tcfg, sched)
    elapsed = time.perf_counter() - t0
    b = train(data, cfg, tcfg, sched)
    mse = np.array([h["L_mse"] for h in a.history])
    first, last = float(mse[:50].mean()), float(mse[-50:].mean())
    same_hist = a.history == b.history
    same_params = all(np.array_equal(p.data, q.data) for p, q in zip(a.model.parameters(), b.model.parameters()))
    ok = last < 0.5 and same_hist and same_params and elapsed < 600
    report(4, ok, f"mean L_mse first 50 steps {first:.3f}, last 50 steps {last:.3f}, "
                  f"rerun identical {same_hist and same_params}, {elapsed:.0f}s per run")
    assert ok


# -------------------------------------------------------------------------
# 5 and 6. desk-scale ablations


def _exact_mean(rs: RolloutSet) -> Fraction:
    """Mean scene score in exact arithmetic, so ties cannot flip on rounding."""
    return sum(Fraction(s["scene_score"]) for s in rs.scores) / len(rs.scores)


def _run_seed(seed: int) -> dict:
    train_scenes = gen_data(GenSpec(n_scenes=200, seed=seed))
    eval_scenes = gen_data(GenSpec(n_scenes=EVAL_SCENES, seed=1000 + seed))
    cfg = DenoiserConfig()
    sched = make_schedule("linear", cfg.K)
    data = build_training_set(train_scenes, cfg)
    full = train(data, cfg, TrainConfig(steps=ABLATION_STEPS, seed=seed), sched)
    indep = train(data, cfg, TrainConfig(steps=ABLATION_STEPS, seed=seed, noise="independent", lam=0.0), sched)

    pool = sample_scenes(full.model, sched, full.normalizer, eval_scenes, SamplerConfig(M=M_POOL, seed=seed))
    guided = [rs.subset(list(range(M_KEEP))) for rs in pool]
    filtered = filter_sets(pool, eval_scenes, M_KEEP)
    unguided = sample_scenes(full.model, sched, full.normalizer, eval_scenes,
                             SamplerConfig(M=M_KEEP, guidance="off", seed=seed))
    ind_sets = sample_scenes(indep.model, sched, indep.normalizer, eval_scenes,
                             SamplerConfig(M=M_KEEP, guidance="off", noise="independent", seed=seed))
    dt = eval_scenes[0].dt
    rep_unf, rep_fil = evaluate_sets(guided, eval_scenes), evaluate_sets(filtered, eval_scenes)

    # filter monotonicity on every scene: the kept mean never exceeds the pool mean
    monotone = True
    for rs in pool:
        for keep in range(1, M_POOL + 1):
            kept = filter_rollouts(rs, keep)
            monotone &= _exact_mean(kept) <= _exact_mean(rs)
    return {
        "jerk_full": rollout_jerk(guided, dt), "jerk_indep": rollout_jerk(ind_sets, dt),
        "gap_guided": mean_overlap_gap(guided), "gap_unguided": mean_overlap_gap(unguided),
        "coll_fil": rep_fil.collision_rate, "coll_unf": rep_unf.collision_rate,
        "off_fil": rep_fil.offroad_rate, "off_unf": rep_unf.offroad_rate,
        "monotone": bool(monotone),
    }


@pytest.fixture(scope="module")
def ablation():
    out = {}
    for seed in SEEDS:
        r = _run_seed(seed)
        out[seed] = r
        print(f"seed {seed}: " + ", ".join(f"{k} {v:.4g}" if isinstance(v, float) else f"{k} {v}" for k, v in r.items()))
    return out


def test_criterion_5_consistency_ablation(ablation):
    jerk_wins = sum(r["jerk_full"] <= r["jerk_indep"] for r in ablation.values())
    gap_wins = sum(r["gap_guided"] <= r["gap_unguided"] for r in ablation.values())
    ok = jerk_wins >= 4 and gap_wins >= 4
    jerks = " ".join(f"{r['jerk_full']:.2f}/{r['jerk_indep']:.2f}" for r in ablation.values())
    report(5, ok, f"jerk full<=indep in {jerk_wins}/5 seeds (full/indep: {jerks}), "
                  f"guided gap<=unguided in {gap_wins}/5 seeds")
    assert ok


def test_criterion_6_scoring_ablation(ablation):
    wins = sum(r["coll_fil"] >= r["coll_unf"] and r["off_fil"] >= r["off_unf"] for r in ablation.values())

    # exact monotonicity also on adversarial score patterns
    rng = np.random.default_rng(6)
    monotone = all(r["monotone"] for r in ablation.values())
    for _ in range(500):
        M = int(rng.integers(1, 30))
        rs = RolloutSet("s", np.zeros((M, 1, 2, 4)), None, np.zeros(M))
        vals = rng.integers(0, 5, M) * rng.choice([0.25, 1.0, 3.0])
        rs.scores = [{"scene_score": float(v), "per_agent": []} for v in vals]
        kept = filter_rollouts(rs, int(rng.integers(1, M + 1)))
        monotone &= _exact_mean(kept) <= _exact_mean(rs)
    ok = wins >= 4 and monotone
    comps = " ".join(f"{r['coll_fil']:.3f}/{r['coll_unf']:.3f},{r['off_fil']:.3f}/{r['off_unf']:.3f}"
                     for r in ablation.values())
    report(6, ok, f"filtered components >= unfiltered in {wins}/5 seeds "
                  f"(coll fil/unf, off fil/unf: {comps}), filter monotone {monotone}")
    assert ok


# -------------------------------------------------------------------------
# 7. geometry oracle


def test_criterion_7_geometry_oracle():
    rng = np.random.default_rng(0)
    agree = within = hits = 0
    for _ in range(1000):
        a, b = (tuple((rng.uniform(-4, 4, 2), rng.uniform(-np.pi, np.pi), rng.uniform(0.5, 5.0), rng.uniform(0.5, 2.5)))
                for _ in range(2))
        d = float(penetration_depth_arrays(*a, *b))
        agree += (d > 0) == grid_overlap(a, b)
        if d > 0:
            hits += 1
            within += abs(d - minkowski_depth(a, b)) <= grid_resolution(a, b)
    hand = (
        penetration_depth(OrientedBox(0, 0, 0, 2, 2), OrientedBox(1, 0, 0, 2, 2)) == 1.0,
        abs(penetration_depth(OrientedBox(3, -1, 0.7, 4.5, 1.8), OrientedBox(3, -1, 0.7, 4.5, 1.8)) - 1.8) <= 1e-12,
        penetration_depth(OrientedBox(0, 0, 0, 2, 2), OrientedBox(5, 0, 0, 2, 2)) == -3.0,
    )
    ok = agree == 1000 and within == hits and all(hand)
    report(7, ok, f"sign agreement {agree}/1000, depth within grid resolution {within}/{hits}, "
                  f"hand cases {sum(hand)}/3")
    assert ok


# -------------------------------------------------------------------------
# 8. self-evaluation


def _entropy_bound(ref: np.ndarray, bins) -> float:
    q = np.bincount(bins.index(ref), minlength=bins.n_bins) / ref.size
    q = q[q > 0]
    return float(np.exp(np.sum(q * np.log(q))))


def _gt_sets(scenes, M=1):
    return [RolloutSet(s.scene_id, np.repeat(s.future_poses()[None], M, axis=0), None, np.zeros(M)) for s in scenes]


def test_criterion_8_self_evaluation():
    raw = gen_data(GenSpec(n_scenes=200, seed=0))
    collisions = offroad = 0
    for sc in raw:
        lengths, widths = sc.boxes()
        collisions += int(collision_matrix(sc.future_poses(), lengths, widths).sum())
        offroad += int(offroad_matrix(sc.future_poses(), sc.polylines).sum())

    scenes = [to_scene_frame(s) for s in raw[:8]]
    # as the smoothing mass vanishes, self-evaluation attains the entropy bound,
    # the largest value any generated histogram can score
    rep = evaluate(_gt_sets(scenes), scenes, alpha=1e-12)
    worst = 0.0
    for name in METRIC_NAMES:
        bound = []
        for s in scenes:
            r = scene_feature_sets(s.future_poses(), s)[name]
            r = r[np.isfinite(r)]
            if r.size:
                bound.append(_entropy_bound(r, DEFAULT_BINS[name]))
        worst = max(worst, abs(getattr(rep, name) / np.mean(bound) - 1))

    # with the configured smoothing, ground truth still beats perturbed ensembles
    best = evaluate(_gt_sets(scenes, 8), scenes)
    rng = np.random.default_rng(0)
    beats = True
    for scale in (0.05, 0.2, 1.0):
        sets = _gt_sets(scenes, 8)
        for rs in sets:
            rs.poses = rs.poses + rng.normal(0, scale, rs.poses.shape) * np.array([1, 1, 0.1, 1])
        beats &= evaluate(sets, scenes).realism < best.realism
    ok = collisions == 0 and offroad == 0 and worst <= 1e-9 and bool(beats)
    report(8, ok, f"gen_data collisions {collisions}, offroad steps {offroad}; self-eval vs entropy bound rel err "
                  f"{worst:.1e}; ground truth beats perturbed ensembles {bool(beats)}")
    assert ok


if __name__ == "__main__":
    import sys

    sys.exit(pytest.main([__file__, "-q", "-s"]))
