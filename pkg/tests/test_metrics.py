from __future__ import annotations

import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from scenedm.data import GenSpec, gen_data
from scenedm.metrics import (BINARY, DEFAULT_BINS, METRIC_NAMES, BinSpec, MetricReport, evaluate, histogram,
                             jerk_metric, kinematic_features, likelihood_score, report_from_dict, scene_feature_sets)
from scenedm.sampler import RolloutSet
from scenedm.scene import to_scene_frame


def test_kinematic_examples():
    dt = 0.5
    T = 6
    const = np.zeros((1, T, 4))
    const[0, :, 0] = 3.0 * dt * np.arange(1, T + 1)
    const[0, :, 3] = 3.0
    f = kinematic_features(const, np.array([[0, 0, 0, 3.0]]), dt)
    assert np.all(f["linear_accel"] == 0.0) and f["linear_speed"].shape == (1, T) and f["linear_accel"].shape == (1, T - 1)
    two = np.zeros((1, 2, 4))
    two[0, :, 3] = [0.0, 1.0]
    assert kinematic_features(two, np.zeros((1, 4)), dt)["linear_accel"].tolist() == [[2.0]]
    rot = np.zeros((1, T, 4))
    rot[0, :, 2] = 0.2 * dt * np.arange(1, T + 1)
    f = kinematic_features(rot, np.zeros((1, 4)), dt)
    np.testing.assert_allclose(f["angular_speed"], 0.2, rtol=1e-12)
    np.testing.assert_allclose(f["angular_accel"], 0.0, atol=1e-12)


def test_heading_wrap_does_not_spike_angular_speed():
    poses = np.zeros((1, 2, 4))
    poses[0, :, 2] = [np.pi - 0.05, -np.pi + 0.05]
    f = kinematic_features(poses, np.array([[0, 0, np.pi - 0.15, 0]]), 0.5)
    np.testing.assert_allclose(f["angular_speed"], 0.2, rtol=1e-9)


def test_likelihood_examples():
    one = BinSpec(0.0, 1.0, 1, overflow=False)
    x = np.random.default_rng(0).uniform(0, 1, 500)
    assert likelihood_score(x, x, one) == pytest.approx(1.0)
    two = BinSpec(0.0, 2.0, 2, overflow=False)
    gen = np.array([0.5] * 100 + [1.5] * 100)
    assert likelihood_score(gen, np.array([0.5, 1.5]), two) == pytest.approx(0.5, rel=1e-12)


@pytest.mark.parametrize("n,alpha,B", [(10, 1.0, 2), (64, 1.0, 34), (5, 0.5, 34)])
def test_smoothing_floor(n, alpha, B):
    bins = BinSpec(0.0, 1.0, B - 2) if B > 2 else BinSpec(0.0, 2.0, 2, overflow=False)
    gen = np.full(n, 0.01)
    ref = np.full(7, 0.99 if B > 2 else 1.5)
    assert likelihood_score(gen, ref, bins, alpha) == pytest.approx(alpha / (n + alpha * B), rel=1e-12)


def test_likelihood_monotone_toward_reference():
    two = BinSpec(0.0, 2.0, 2, overflow=False)
    ref = np.array([0.5, 0.5, 0.5, 1.5])
    scores = [likelihood_score(np.array([0.5] * c + [1.5] * (20 - c)), ref, two) for c in range(21)]
    peak = int(np.argmax(scores))
    assert all(a <= b for a, b in zip(scores[:peak], scores[1:peak + 1]))
    ref0 = np.full(5, 0.5)
    s0 = [likelihood_score(np.array([0.5] * c + [1.5] * (20 - c)), ref0, two) for c in range(21)]
    assert all(a < b for a, b in zip(s0, s0[1:]))


def test_likelihood_rejects_empty():
    with pytest.raises(ValueError):
        likelihood_score(np.empty(0), np.ones(3), BINARY)
    with pytest.raises(ValueError):
        likelihood_score(np.ones(3), np.empty(0), BINARY)


def test_bins_with_overflow():
    b = BinSpec(0.0, 10.0, 5)
    assert b.index(np.array([-3.0, 0.0, 9.99, 10.0, 1e9, 4.0])).tolist() == [0, 1, 5, 6, 6, 3]
    h = histogram(np.array([1.0, 1.0]), b, alpha=1.0)
    assert h.sum() == pytest.approx(1.0) and h[1] == pytest.approx(3 / 9)


def test_jerk_examples():
    assert jerk_metric(np.array([[1.0, 2.0, 3.0, 4.0]]), 0.5) == 0.0
    alt = np.tile([0.0, 1.0], 8)
    assert jerk_metric(alt[None], 0.5) == pytest.approx(8.0)
    ramp = np.linspace(0, 8, 16)
    assert jerk_metric((ramp + 0.01 * ramp**2)[None], 0.5) < jerk_metric((ramp + 0.3 * (alt - 0.5))[None], 0.5)
    with pytest.raises(ValueError):
        jerk_metric(np.empty((0, 5)), 0.5)


@pytest.fixture(scope="module")
def scenes():
    return [to_scene_frame(s) for s in gen_data(GenSpec(n_scenes=4, seed=21))]


def _gt_sets(scenes, M=1):
    return [RolloutSet(s.scene_id, np.repeat(s.future_poses()[None], M, axis=0), None, np.zeros(M)) for s in scenes]


def _entropy_bound(ref: np.ndarray, bins: BinSpec) -> float:
    q = np.bincount(bins.index(ref), minlength=bins.n_bins) / ref.size
    q = q[q > 0]
    return float(np.exp(np.sum(q * np.log(q))))


def test_self_evaluation_reaches_entropy_bound(scenes):
    rep = evaluate(_gt_sets(scenes), scenes, alpha=1e-12)
    for name in METRIC_NAMES:
        per_scene = []
        for s in scenes:
            r = scene_feature_sets(s.future_poses(), s)[name]
            r = r[np.isfinite(r)]
            if r.size:
                per_scene.append(_entropy_bound(r, DEFAULT_BINS[name]))
        assert getattr(rep, name) == pytest.approx(np.mean(per_scene), rel=1e-9), name
    assert rep.collision_rate == pytest.approx(1.0) and rep.offroad_rate == pytest.approx(1.0)


def test_self_evaluation_beats_perturbed_ensembles(scenes):
    M = 8
    best = evaluate(_gt_sets(scenes, M), scenes)
    rng = np.random.default_rng(0)
    for scale in (0.2, 1.0):
        sets = _gt_sets(scenes, M)
        for rs in sets:
            rs.poses = rs.poses + rng.normal(0, scale, rs.poses.shape) * np.array([1, 1, 0.1, 1])
        worse = evaluate(sets, scenes)
        assert worse.realism < best.realism
        for name in ("linear_accel", "angular_accel", "dist_to_roadedge"):
            assert getattr(worse, name) <= getattr(best, name)


def test_coincident_agents_lower_collision_component(scenes):
    base = evaluate(_gt_sets(scenes, 2), scenes)
    sets = _gt_sets(scenes, 2)
    for rs in sets:
        rs.poses[:, 1] = rs.poses[:, 0]
    assert evaluate(sets, scenes).collision_rate < base.collision_rate


def test_offroad_everywhere_hits_floor(scenes):
    M = 3
    sets = _gt_sets(scenes, M)
    for rs in sets:
        rs.poses[..., 0] += 5000.0
    rep = evaluate(sets, scenes)
    floors = [1.0 / (M * s.n_agents * s.future_poses().shape[1] + 2) for s in scenes]
    assert rep.offroad_rate == pytest.approx(np.mean(floors), rel=1e-12)


def test_rollout_order_does_not_matter_and_components_bounded(scenes):
    rng = np.random.default_rng(1)
    sets = _gt_sets(scenes, 5)
    for rs in sets:
        rs.poses = rs.poses + rng.normal(0, 0.5, rs.poses.shape)
    a = evaluate(sets, scenes)
    for rs in sets:
        perm = rng.permutation(rs.M)
        rs.poses = rs.poses[perm]
    b = evaluate(sets, scenes)
    assert a == b
    for v in a.to_dict().values():
        assert 0.0 <= v <= 1.0


def test_agent_count_mismatch_rejected(scenes):
    bad = _gt_sets(scenes[:1])
    bad[0].poses = bad[0].poses[:, :1]
    with pytest.raises(ValueError):
        evaluate(bad, scenes[:1])
    with pytest.raises(ValueError):
        evaluate(_gt_sets(scenes[:2]), scenes[:1])


def test_report_serialisation():
    rep = MetricReport(*np.linspace(0.1, 0.8, 8))
    assert rep.kinematic == pytest.approx(np.mean(np.linspace(0.1, 0.8, 8)[:4]))
    assert rep.realism == pytest.approx((rep.kinematic + rep.interactive + rep.map) / 3)
    back = report_from_dict(json.loads(rep.to_json()))
    assert back == rep
    assert rep.csv_row().count(",") == len(MetricReport.CSV_FIELDS) - 1


@settings(max_examples=60, deadline=None)
@given(st.lists(st.floats(-20, 40), min_size=1, max_size=60), st.lists(st.floats(-20, 40), min_size=1, max_size=60))
def test_likelihood_in_unit_interval(gen, ref):
    s = likelihood_score(np.array(gen), np.array(ref), DEFAULT_BINS["dist_to_object"])
    assert 0.0 < s <= 1.0
