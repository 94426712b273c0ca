"""Shared fixtures: small synthetic rooms, the two-room benchmark, helpers.

The expensive fixtures (two-room preparation, planning, score maps) are
session-scoped; everything downstream shares them.
"""

from __future__ import annotations

import math
from typing import Dict, List, Optional, Tuple

import numpy as np
import pytest

from markerplan import (
    NoiseConfig,
    PreparedScene,
    SceneDescription,
    generate_features,
    prepare,
    two_room_scene,
)
from markerplan.scene import GroundPlaneSpace, MarkerCandidate, OccupancyGrid, Pose6D
from markerplan.visibility import VisibilityIndex

JOBS = 4

# Lines appended by the acceptance tests; printed as a terminal section so the
# one-line-per-criterion report survives pytest's output capturing.
ACCEPTANCE_LINES: List[str] = []


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if ACCEPTANCE_LINES:
        terminalreporter.write_sep("-", "acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


# ---------------------------------------------------------------------------
# Scene factories
# ---------------------------------------------------------------------------


def make_room(
    width: float = 4.0,
    height: float = 4.0,
    density: float = 2.0,
    resolution: float = 1.0,
    spacing: float = 1.0,
    orientations: int = 4,
    camera_range: float = 5.0,
    seed: int = 3,
    name: str = "room",
) -> SceneDescription:
    """One rectangular room with random wall features."""
    walls = [np.array([(0.0, 0.0), (width, 0.0), (width, height), (0.0, height)])]
    scene = SceneDescription(
        walls=walls,
        camera_fov=math.pi / 2.0,
        camera_range=camera_range,
        grid_resolution=resolution,
        marker_spacing=spacing,
        orientations_per_cell=orientations,
        eye_height=1.5,
        feature_seed=seed,
        name=name,
    )
    if density > 0.0:
        scene.feature_points = generate_features(scene, density=density, seed=seed)
    return scene


def random_mini_scene(seed: int) -> SceneDescription:
    """A small random scene: a rectangle or an L, coarse discretization.

    Sized so that |C| stays under 300 and |M| under 40.
    """
    rng = np.random.default_rng(seed)
    w = float(rng.uniform(3.0, 6.0))
    h = float(rng.uniform(3.0, 5.0))
    if rng.random() < 0.4:
        # L-shape: cut a corner rectangle out of the top-right.
        cw = float(rng.uniform(1.0, 0.5 * w))
        ch = float(rng.uniform(1.0, 0.5 * h))
        poly = [
            (0.0, 0.0),
            (w, 0.0),
            (w, h - ch),
            (w - cw, h - ch),
            (w - cw, h),
            (0.0, h),
        ]
    else:
        poly = [(0.0, 0.0), (w, 0.0), (w, h), (0.0, h)]
    scene = SceneDescription(
        walls=[np.array(poly)],
        camera_fov=float(rng.uniform(math.pi / 2.0, 2.0 * math.pi / 3.0)),
        camera_range=float(rng.uniform(3.0, 6.0)),
        grid_resolution=1.0,
        marker_spacing=1.0,
        orientations_per_cell=4,
        eye_height=1.5,
        feature_seed=seed,
        name=f"mini_{seed}",
    )
    scene.feature_points = generate_features(
        scene, density=float(rng.uniform(1.0, 2.5)), seed=seed
    )
    return scene


# ---------------------------------------------------------------------------
# Hand-built spaces (no geometry involved) for planner unit tests
# ---------------------------------------------------------------------------


def synthetic_space(
    camera_poses: List[Pose6D], marker_poses: List[Pose6D]
) -> GroundPlaneSpace:
    candidates = []
    for i, pose in enumerate(marker_poses):
        normal = pose.rotation[:, 2]
        candidates.append(
            MarkerCandidate(
                pose=pose,
                normal=normal.copy(),
                position2d=pose.translation[0:2].copy(),
                tangent2d=np.array([1.0, 0.0]),
                segment_index=0,
                segment_t=float(i),
                arc_offset=float(i),
            )
        )
    n = len(camera_poses)
    return GroundPlaneSpace(
        grid=OccupancyGrid(origin=np.zeros(2), resolution=1.0, occupied=np.zeros((1, 1), bool)),
        camera_locations=np.stack([p.translation[0:2] for p in camera_poses])
        if camera_poses
        else np.zeros((0, 2)),
        camera_yaws=np.array([0.0]),
        camera_poses=list(camera_poses),
        pose_location=np.arange(n),
        marker_candidates=candidates,
        eye_height=1.5,
        perimeter_length=float(len(marker_poses)),
        placed_markers=[],
    )


def synthetic_index(
    points_seen: List[List[int]],
    markers_seen: List[List[int]],
    n_points: int,
    n_markers: int,
) -> VisibilityIndex:
    affected: List[List[int]] = [[] for _ in range(n_markers)]
    for c, seen in enumerate(markers_seen):
        for m in seen:
            affected[m].append(c)
    return VisibilityIndex(
        points_seen=[np.asarray(s, dtype=int) for s in points_seen],
        markers_seen=[np.asarray(s, dtype=int) for s in markers_seen],
        affected_cameras=[np.asarray(a, dtype=int) for a in affected],
        n_points=n_points,
        n_markers=n_markers,
    )


# ---------------------------------------------------------------------------
# Session fixtures
# ---------------------------------------------------------------------------


@pytest.fixture(scope="session")
def room_prepared() -> PreparedScene:
    """A 5x4 room at coarse resolution; the workhorse for planner tests."""
    return prepare(make_room(width=5.0, height=4.0, density=2.0, seed=11))


@pytest.fixture(scope="session")
def two_room_prepared() -> PreparedScene:
    return prepare(two_room_scene())


@pytest.fixture(scope="session")
def two_room_scores(two_room_prepared) -> np.ndarray:
    """Marker-free score map of the two-room scene."""
    return two_room_prepared.score_map((), jobs=JOBS)


@pytest.fixture(scope="session")
def two_room_plan8(two_room_prepared):
    """k=8 greedy plan; greedy plans are prefix-consistent, so smaller k
    experiments reuse prefixes of this one."""
    return two_room_prepared.plan_markers(k=8, v=90.0, jobs=JOBS)
