import dataclasses
import math
from types import SimpleNamespace

import numpy as np
import pytest

from markerplan import SceneDescription, build_index, discretize
from markerplan.scene import marker_pose_from_normal, planar_camera_pose, scene_content_hash
from markerplan.visibility import (
    IndexCacheError,
    build_index_cached,
    load_index,
    marker_visible,
    point_visible,
    save_index,
    visible_marker_mask,
)

from conftest import make_room, random_mini_scene


def _box(width=6.0, height=6.0, **kw):
    walls = [np.array([(0.0, 0.0), (width, 0.0), (width, height), (0.0, height)])]
    kw.setdefault("camera_fov", math.pi / 2.0)
    kw.setdefault("camera_range", 5.0)
    return SceneDescription(walls=walls, **kw)


def _marker(x, y, nx, ny, eye=1.5):
    pose = marker_pose_from_normal(np.array([x, y]), np.array([nx, ny]), eye)
    return SimpleNamespace(pose=pose, normal=pose.rotation[:, 2])


def test_point_straight_ahead():
    scene = _box()
    cam = planar_camera_pose(3.0, 3.0, 0.0, 1.5)
    assert point_visible(cam, np.array([4.0, 3.0, 1.5]), scene)


def test_point_beyond_range():
    scene = _box(width=20.0, camera_range=2.0)
    cam = planar_camera_pose(3.0, 3.0, 0.0, 1.5)
    assert not point_visible(cam, np.array([5.5, 3.0, 1.5]), scene)
    # range is measured in 3D: a point straight ahead but high up can fall out
    tall = _box(width=20.0, camera_range=2.0)
    assert not point_visible(cam, np.array([4.8, 3.0, 1.5 + 1.5]), tall)
    assert point_visible(cam, np.array([4.8, 3.0, 1.5]), scene)


def test_point_behind_camera_outside_fov():
    scene = _box()
    cam = planar_camera_pose(3.0, 3.0, 0.0, 1.5)
    assert not point_visible(cam, np.array([2.0, 3.0, 1.5]), scene)
    # 46 degrees off-axis with a 90 degree fov
    ang = math.radians(46.0)
    off = np.array([3.0 + math.cos(ang), 3.0 + math.sin(ang), 1.5])
    assert not point_visible(cam, off, scene)


def test_point_occluded_by_interior_wall():
    outer = np.array([(0.0, 0.0), (10.0, 0.0), (10.0, 6.0), (0.0, 6.0)])
    pillar = np.array([(4.0, 2.0), (6.0, 2.0), (6.0, 4.0), (4.0, 4.0)])
    scene = SceneDescription(walls=[outer, pillar], camera_range=20.0)
    cam = planar_camera_pose(1.0, 3.0, 0.0, 1.5)
    assert not point_visible(cam, np.array([8.0, 3.0, 1.5]), scene)
    # sliding the point out of the pillar's shadow restores sight
    assert point_visible(cam, np.array([8.0, 0.3, 1.5]), scene)


def test_marker_head_on_and_from_behind():
    scene = _box()
    cam = planar_camera_pose(3.0, 3.0, 0.0, 1.5)
    facing = _marker(6.0, 3.0, -1.0, 0.0)
    assert marker_visible(cam, facing, scene)
    turned = _marker(6.0, 3.0, 1.0, 0.0)  # normal pointing out of the room
    assert not marker_visible(cam, turned, scene)


def test_marker_incidence_cutoff():
    scene = _box(camera_fov=2.0 * math.pi)  # isolate the incidence test from the fov
    marker = _marker(3.0, 0.0, 0.0, 1.0)

    def cam_at(incidence_deg, r=2.0):
        t = math.radians(incidence_deg)
        pos = np.array([3.0 + r * math.sin(t), r * math.cos(t)])
        yaw = math.atan2(-r * math.cos(t), -r * math.sin(t))
        return planar_camera_pose(pos[0], pos[1], yaw, 1.5)

    assert marker_visible(cam_at(0.0), marker, scene)
    assert marker_visible(cam_at(60.0), marker, scene)
    assert not marker_visible(cam_at(75.0), marker, scene)
    assert not marker_visible(cam_at(89.9), marker, scene)


def test_marker_frustum_is_tighter_than_point_frustum():
    # a target 44 degrees off-axis: inside the 45 degree point half-fov,
    # outside the 0.9 * 45 degree marker half-fov
    scene = _box(width=12.0)
    cam = planar_camera_pose(3.0, 3.0, 0.0, 1.5)
    ang = math.radians(44.0)
    pos = np.array([3.0 + 2.0 * math.cos(ang), 3.0 + 2.0 * math.sin(ang), 1.5])
    nrm = np.array([-math.cos(ang), -math.sin(ang), 0.0])
    assert point_visible(cam, pos, scene)
    assert not visible_marker_mask(cam, pos[None, :], nrm[None, :], scene)[0]


# ---------------------------------------------------------------------------
# Index construction
# ---------------------------------------------------------------------------


@pytest.mark.parametrize("seed", [0, 1, 4])
def test_index_matches_per_pose_oracle(seed):
    scene = random_mini_scene(seed)
    space = discretize(scene)
    index = build_index(space, scene)
    assert index.n_cameras == space.n_cameras
    assert index.n_points == len(scene.feature_points)
    assert index.n_markers == space.n_candidates
    segments = scene.segment_endpoints()
    for c, cam in enumerate(space.camera_poses):
        pts = [
            j
            for j, f in enumerate(scene.feature_points)
            if point_visible(cam, f.position, scene, segments)
        ]
        assert np.array_equal(index.points_seen[c], pts), f"camera {c} points"
        mks = [
            j
            for j, m in enumerate(space.marker_candidates)
            if marker_visible(cam, m, scene, segments)
        ]
        assert np.array_equal(index.markers_seen[c], mks), f"camera {c} markers"


def test_index_transpose_consistency():
    scene = make_room(width=5.0, height=4.0, density=2.0, seed=8)
    space = discretize(scene)
    index = build_index(space, scene)
    forward = {(c, int(m)) for c in range(index.n_cameras) for m in index.markers_seen[c]}
    backward = {(int(c), m) for m in range(index.n_markers) for c in index.affected_cameras[m]}
    assert forward == backward
    assert np.array_equal(index.coverage_counts(), [len(a) for a in index.affected_cameras])


def test_shrinking_range_shrinks_visibility():
    scene = make_room(width=6.0, height=4.0, density=2.0, camera_range=5.0, seed=13)
    near = dataclasses.replace(scene, camera_range=2.5)
    wide = build_index(discretize(scene), scene)
    tight = build_index(discretize(near), near)
    assert wide.n_cameras == tight.n_cameras
    for c in range(wide.n_cameras):
        assert set(tight.points_seen[c]) <= set(wide.points_seen[c])
        assert set(tight.markers_seen[c]) <= set(wide.markers_seen[c])


# ---------------------------------------------------------------------------
# Cache round trip
# ---------------------------------------------------------------------------


def test_index_cache_round_trip(tmp_path):
    scene = make_room(density=1.5, seed=21)
    space = discretize(scene)
    index = build_index(space, scene)
    path = tmp_path / "vis.json"
    digest = scene_content_hash(scene)
    save_index(index, digest, str(path))
    loaded = load_index(str(path), expected_scene_hash=digest)
    assert loaded.n_points == index.n_points
    assert loaded.n_markers == index.n_markers
    for a, b in zip(index.points_seen, loaded.points_seen):
        assert np.array_equal(a, b)
    for a, b in zip(index.markers_seen, loaded.markers_seen):
        assert np.array_equal(a, b)
    for a, b in zip(index.affected_cameras, loaded.affected_cameras):
        assert np.array_equal(a, b)


def test_index_cache_rejects_wrong_scene(tmp_path):
    scene = make_room(density=1.0, seed=21)
    index = build_index(discretize(scene), scene)
    path = tmp_path / "vis.json"
    save_index(index, scene_content_hash(scene), str(path))
    with pytest.raises(IndexCacheError):
        load_index(str(path), expected_scene_hash="0" * 64)


def test_cached_build_reuses_file(tmp_path, monkeypatch):
    scene = make_room(density=1.0, seed=6)
    space = discretize(scene)
    path = tmp_path / "vis.json"
    first = build_index_cached(space, scene, str(path))
    assert path.exists()

    import markerplan.visibility as vis

    def boom(*args, **kwargs):  # pragma: no cover - must not run
        raise AssertionError("cache should have been reused")

    monkeypatch.setattr(vis, "build_index", boom)
    second = build_index_cached(space, scene, str(path))
    for a, b in zip(first.markers_seen, second.markers_seen):
        assert np.array_equal(a, b)


def test_cached_build_survives_corruption(tmp_path):
    scene = make_room(density=1.0, seed=6)
    space = discretize(scene)
    path = tmp_path / "vis.json"
    path.write_text("{341(*&garbage")
    index = build_index_cached(space, scene, str(path))
    oracle = build_index(space, scene)
    for a, b in zip(index.markers_seen, oracle.markers_seen):
        assert np.array_equal(a, b)
    # the rebuilt index replaced the corrupt file
    reloaded = load_index(str(path), expected_scene_hash=scene_content_hash(scene))
    assert reloaded.n_markers == oracle.n_markers
