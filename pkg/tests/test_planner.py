import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from markerplan import (
    FeaturePoint,
    ScoreCache,
    ScoreEvaluator,
    StaleCacheError,
    adaptive_q,
    incremental_rescore,
    init_score_cache,
    marker_gain,
    percentile,
    plan,
    visibility_stats,
)
from markerplan.scene import marker_pose_from_normal, planar_camera_pose

from conftest import synthetic_index, synthetic_space


def _cdf_percentile_oracle(values, q):
    """Smallest value whose empirical CDF reaches q/100 (plain double loop)."""
    values = sorted(values)
    n = len(values)
    if q <= 0:
        return values[0]
    for v in values:
        if sum(1 for x in values if x <= v) / n >= q / 100.0:
            return v
    return values[-1]


# ---------------------------------------------------------------------------
# Percentile aggregation
# ---------------------------------------------------------------------------


def test_percentile_frozen_examples():
    assert percentile([0.0, 0.0, 0.0, 10.0], 75.0) == 0.0
    assert percentile([0.0, 0.0, 0.0, 10.0], 76.0) == 10.0
    assert percentile([1.0, 2.0, 3.0, 4.0], 100.0) == 4.0
    assert percentile([1.0, 2.0, 3.0, 4.0], 0.0) == 1.0
    assert percentile([3.0, 1.0, 2.0], 0.0) == 1.0  # unsorted input
    for q in (0.0, 17.3, 50.0, 100.0):
        assert percentile([5.0], q) == 5.0


def test_percentile_rejects_bad_input():
    with pytest.raises(ValueError):
        percentile([], 50.0)
    with pytest.raises(ValueError):
        percentile([1.0], -0.1)
    with pytest.raises(ValueError):
        percentile([1.0], 100.1)


@given(
    values=st.lists(st.integers(min_value=-5, max_value=5), min_size=1, max_size=30),
    q=st.floats(min_value=0.0, max_value=100.0, allow_nan=False),
)
@settings(max_examples=300, deadline=None)
def test_percentile_matches_cdf_oracle(values, q):
    values = [float(v) for v in values]  # integer grid forces heavy ties
    assert percentile(values, q) == _cdf_percentile_oracle(values, q)


def test_adaptive_q_frozen_examples():
    stats = visibility_stats(
        synthetic_index([[0, 1]], [[0, 1, 2, 3, 4]], 2, 5), range(5)
    )
    # the synthetic index has one camera seeing all five candidates: 100% each
    assert np.all(stats.percentages == 100.0)
    assert adaptive_q(stats, 100.0) == 100.0
    assert adaptive_q(stats, 50.0) == 0.0

    from markerplan.planner import VisibilityStats

    spread = VisibilityStats(
        candidate_ids=np.arange(5),
        percentages=np.array([10.0, 20.0, 30.0, 40.0, 50.0]),
    )
    assert adaptive_q(spread, 100.0) == 100.0  # regardless of the data
    assert adaptive_q(spread, 0.0) == 50.0  # 100 - max coverage
    assert adaptive_q(spread, 80.0) == 90.0  # 100 - 20th pct = 100 - 10


def test_adaptive_q_monotone_in_v():
    from markerplan.planner import VisibilityStats

    rng = np.random.default_rng(4)
    for _ in range(20):
        pct = np.sort(rng.uniform(0.0, 100.0, size=rng.integers(1, 12)))
        stats = VisibilityStats(candidate_ids=np.arange(pct.size), percentages=pct)
        qs = [adaptive_q(stats, v) for v in np.linspace(0.0, 100.0, 21)]
        assert all(b >= a for a, b in zip(qs, qs[1:]))


def test_adaptive_q_rejects_bad_input():
    from markerplan.planner import VisibilityStats

    stats = VisibilityStats(candidate_ids=np.arange(1), percentages=np.array([50.0]))
    with pytest.raises(ValueError):
        adaptive_q(stats, -1.0)
    with pytest.raises(ValueError):
        adaptive_q(stats, 101.0)
    empty = VisibilityStats(candidate_ids=np.arange(0), percentages=np.zeros(0))
    with pytest.raises(ValueError):
        adaptive_q(empty, 50.0)


# ---------------------------------------------------------------------------
# Hand-wired candidate evaluation
# ---------------------------------------------------------------------------


def _identical_camera_rig(n_cameras=4):
    """n identical cameras staring at the same two points and one marker."""
    cam = planar_camera_pose(0.0, 0.0, 0.0, 1.5)
    cameras = [cam.copy() for _ in range(n_cameras)]
    markers = [marker_pose_from_normal(np.array([3.0, 0.0]), np.array([-1.0, 0.0]), 1.5)]
    space = synthetic_space(cameras, markers)
    features = [
        FeaturePoint(position=np.array([2.0, -0.4, 1.4]), descriptor=np.zeros(2)),
        FeaturePoint(position=np.array([2.0, 0.4, 1.6]), descriptor=np.zeros(2)),
    ]
    index = synthetic_index(
        points_seen=[[0, 1]] * n_cameras,
        markers_seen=[[0]] * n_cameras,
        n_points=2,
        n_markers=1,
    )
    return space, features, index


def test_gain_of_unseen_marker_is_zero():
    space, features, index = _identical_camera_rig()
    blind = synthetic_index([[0, 1]] * 4, [[]] * 4, 2, 1)
    ev = ScoreEvaluator(space, features, blind)
    for q in (0.0, 50.0, 100.0):
        assert marker_gain(ev, 0, q) == 0.0


def test_gain_over_identical_cameras_is_flat():
    space, features, index = _identical_camera_rig()
    ev = ScoreEvaluator(space, features, index)
    gamma = ev.score(0, (0,)) - ev.score(0, ())
    assert gamma > 0.0
    for q in (0.0, 50.0, 100.0):
        assert marker_gain(ev, 0, q) == gamma


# ---------------------------------------------------------------------------
# Incremental rescoring
# ---------------------------------------------------------------------------


def test_rescore_skips_unaffected_cameras():
    space, features, index = _identical_camera_rig()
    # marker visible from camera 2 only
    lopsided = synthetic_index([[0, 1]] * 4, [[], [], [0], []], 2, 1)
    ev = ScoreEvaluator(space, features, lopsided)
    cache = init_score_cache(ev)
    updated = incremental_rescore(ev, cache, 0)
    assert updated.placed == (0,)
    changed = np.nonzero(updated.scores != cache.scores)[0]
    assert np.array_equal(changed, [2])


def test_rescore_with_invisible_marker_changes_nothing():
    space, features, index = _identical_camera_rig()
    blind = synthetic_index([[0, 1]] * 4, [[]] * 4, 2, 1)
    ev = ScoreEvaluator(space, features, blind)
    cache = init_score_cache(ev)
    updated = incremental_rescore(ev, cache, 0)
    assert np.array_equal(updated.scores, cache.scores)


def test_rescore_chain_matches_full_recompute(room_prepared):
    p = room_prepared
    ev = p.evaluator()
    by_coverage = np.argsort(p.vis_index.coverage_counts())[::-1]
    picks = [int(m) for m in by_coverage[:3]]
    cache = init_score_cache(ev)
    for m in picks:
        cache = incremental_rescore(ev, cache, m)
    fresh = ev.scores_all(picks)
    # incremental updates must be indistinguishable from scoring from scratch
    assert np.array_equal(cache.scores, fresh)


def test_rescore_detects_stale_cache():
    space, features, index = _identical_camera_rig()
    ev = ScoreEvaluator(space, features, index)
    cache = init_score_cache(ev)
    with pytest.raises(StaleCacheError):
        incremental_rescore(ev, cache, 0, placed_before=(0,))
    tampered = ScoreCache(scores=cache.scores.copy(), placed=())
    tampered.placed = (0,)  # hash no longer matches
    with pytest.raises(StaleCacheError):
        incremental_rescore(ev, tampered, 0, placed_before=(0,))


def test_rescore_rejects_duplicate_placement():
    space, features, index = _identical_camera_rig()
    ev = ScoreEvaluator(space, features, index)
    cache = incremental_rescore(ev, init_score_cache(ev), 0)
    with pytest.raises(ValueError):
        incremental_rescore(ev, cache, 0)


# ---------------------------------------------------------------------------
# Greedy planning
# ---------------------------------------------------------------------------


def test_plan_argument_validation(room_prepared):
    p = room_prepared
    with pytest.raises(ValueError):
        plan(p.space, p.features, p.vis_index, k=-1)
    with pytest.raises(ValueError):
        plan(p.space, p.features, p.vis_index, k=p.space.n_candidates + 1)
    empty = plan(p.space, p.features, p.vis_index, k=0)
    assert empty.steps == [] and empty.marker_indices == []


def test_plan_breaks_ties_toward_lower_index():
    cam = planar_camera_pose(0.0, 0.0, 0.0, 1.5)
    pose = marker_pose_from_normal(np.array([3.0, 0.0]), np.array([-1.0, 0.0]), 1.5)
    space = synthetic_space([cam.copy(), cam.copy()], [pose.copy(), pose.copy()])
    features = [
        FeaturePoint(position=np.array([2.0, -0.4, 1.4]), descriptor=np.zeros(2)),
        FeaturePoint(position=np.array([2.0, 0.4, 1.6]), descriptor=np.zeros(2)),
    ]
    # both markers identical and equally visible: a perfect tie
    index = synthetic_index([[0, 1], [0, 1]], [[0, 1], [0, 1]], 2, 2)
    result = plan(space, features, index, k=2)
    assert result.marker_indices == [0, 1]


def test_plan_warns_when_nothing_helps():
    cam = planar_camera_pose(0.0, 0.0, 0.0, 1.5)
    pose = marker_pose_from_normal(np.array([3.0, 0.0]), np.array([-1.0, 0.0]), 1.5)
    space = synthetic_space([cam], [pose.copy(), pose.copy()])
    features = [
        FeaturePoint(position=np.array([2.0, -0.4, 1.4]), descriptor=np.zeros(2)),
        FeaturePoint(position=np.array([2.0, 0.4, 1.6]), descriptor=np.zeros(2)),
    ]
    blind = synthetic_index([[0, 1]], [[]], 2, 2)  # no marker ever visible
    with pytest.warns(RuntimeWarning, match="all candidate gains are zero"):
        result = plan(space, features, blind, k=1)
    assert result.marker_indices == [0]
    assert result.steps[0].gain == 0.0


def test_plan_rounds_are_greedy_optimal(room_prepared):
    """Re-derive each round with the public one-candidate API and compare."""
    p = room_prepared
    result = plan(p.space, p.features, p.vis_index, k=2, v=90.0,
                  noise=p.noise, similarity=p.similarity)
    ev = p.evaluator()
    cache = init_score_cache(ev)
    remaining = list(range(p.space.n_candidates))
    for step in result.steps:
        stats = visibility_stats(p.vis_index, remaining)
        q = adaptive_q(stats, 90.0)
        best_m, best_gain = -1, float("-inf")
        for m in remaining:
            g = marker_gain(ev, m, q, cache)
            if g > best_gain:
                best_m, best_gain = m, g
        assert step.q == q
        assert step.marker_index == best_m
        assert step.gain == best_gain
        cache = incremental_rescore(ev, cache, best_m)
        remaining.remove(best_m)


def test_plans_are_prefix_consistent(room_prepared):
    p = room_prepared
    short = plan(p.space, p.features, p.vis_index, k=2, noise=p.noise, similarity=p.similarity)
    long = plan(p.space, p.features, p.vis_index, k=4, noise=p.noise, similarity=p.similarity)
    assert long.marker_indices[:2] == short.marker_indices
    for a, b in zip(short.steps, long.steps):
        assert a.gain == b.gain and a.q == b.q


def test_plan_is_thread_count_invariant(room_prepared):
    p = room_prepared
    serial = plan(p.space, p.features, p.vis_index, k=3, noise=p.noise, similarity=p.similarity)
    threaded = plan(
        p.space, p.features, p.vis_index, k=3, jobs=3, noise=p.noise, similarity=p.similarity
    )
    assert serial.marker_indices == threaded.marker_indices
    for a, b in zip(serial.steps, threaded.steps):
        assert a.gain == b.gain and a.q == b.q


def test_scores_never_drop_as_markers_accumulate(room_prepared):
    p = room_prepared
    result = plan(p.space, p.features, p.vis_index, k=3, noise=p.noise, similarity=p.similarity)
    ev = p.evaluator()
    prev = ev.scores_all(())
    for i in range(1, len(result.marker_indices) + 1):
        cur = ev.scores_all(result.marker_indices[:i])
        assert np.all(cur >= prev - 1e-9)
        prev = cur


def test_plan_respects_evaluation_budget(room_prepared):
    p = room_prepared
    ev = ScoreEvaluator(p.space, p.features, p.vis_index, p.noise, p.similarity)
    k = 3
    plan(p.space, p.features, p.vis_index, k=k, evaluator=ev)
    n_cam = p.space.n_cameras
    n_cand = p.space.n_candidates
    heaviest = int(p.vis_index.coverage_counts().max())
    assert ev.eval_count <= n_cam + k * n_cand * heaviest


def test_plan_honors_preplaced_markers(room_prepared):
    p = room_prepared
    base = plan(p.space, p.features, p.vis_index, k=2, noise=p.noise, similarity=p.similarity)
    first = base.marker_indices[0]
    import dataclasses

    space2 = dataclasses.replace(p.space, placed_markers=[first])
    cont = plan(space2, p.features, p.vis_index, k=1, noise=p.noise, similarity=p.similarity)
    assert cont.marker_indices == [base.marker_indices[1]]
    with pytest.raises(ValueError):
        plan(space2, p.features, p.vis_index, k=p.space.n_candidates)
