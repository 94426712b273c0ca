"""Visibility predicates and the camera/point/marker visibility index.

Visibility is planar: a target is visible from a camera pose when it lies
within the horizontal field of view, within sensing range (inclusive), and no
wall segment crosses the 2D sight line strictly before the target. Markers
additionally require a grazing-angle bound on the marker surface normal and a
tightened frustum (a fraction of the half field of view), reflecting that
fiducial detection fails near the image border and at steep viewing angles.

The scalar predicates and the batch index builder share the same vectorized
kernels, so their accept/reject decisions are identical by construction.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass
from typing import List, Optional, Sequence

import numpy as np

from .scene import GroundPlaneSpace, MarkerCandidate, Pose6D, SceneDescription, atomic_write_text, scene_content_hash

MAX_INCIDENCE_ANGLE = math.radians(70.0)
FRUSTUM_MARGIN = 0.9

_RAY_EPS = 1e-9
_PARALLEL_EPS = 1e-12


class IndexCacheError(RuntimeError):
    """Raised when a visibility index cache does not match its scene."""


# ---------------------------------------------------------------------------
# Vectorized kernels
# ---------------------------------------------------------------------------


def blocked_mask(origin2d: np.ndarray, targets2d: np.ndarray, segments: np.ndarray) -> np.ndarray:
    """Whether each 2D sight line origin->target is crossed by a wall.

    A wall blocks when the intersection lies strictly inside the ray
    (parameter in (0, 1 - eps)), so walls passing through the target itself
    (e.g. the wall a feature sits on) do not occlude it.

    Args:
        origin2d: (2,) ray origin.
        targets2d: (N, 2) ray endpoints.
        segments: (S, 4) wall segments as (ax, ay, bx, by).

    Returns:
        (N,) boolean array.
    """
    targets2d = np.atleast_2d(np.asarray(targets2d, dtype=float))
    n = targets2d.shape[0]
    if segments.size == 0 or n == 0:
        return np.zeros(n, dtype=bool)
    c = np.asarray(origin2d, dtype=float)
    a = segments[:, 0:2]
    s = segments[:, 2:4] - a
    r = targets2d - c  # (N, 2)
    d = a - c  # (S, 2)

    denom = r[:, None, 0] * s[None, :, 1] - r[:, None, 1] * s[None, :, 0]  # (N, S)
    cross_ds = d[:, 0] * s[:, 1] - d[:, 1] * s[:, 0]  # (S,)
    cross_dr = d[None, :, 0] * r[:, None, 1] - d[None, :, 1] * r[:, None, 0]  # (N, S)

    with np.errstate(divide="ignore", invalid="ignore"):
        t = cross_ds[None, :] / denom
        u = cross_dr / denom
    proper = (
        (np.abs(denom) > _PARALLEL_EPS)
        & (t > _RAY_EPS)
        & (t < 1.0 - _RAY_EPS)
        & (u >= -_PARALLEL_EPS)
        & (u <= 1.0 + _PARALLEL_EPS)
    )
    blocked = proper.any(axis=1)

    # Collinear overlap: the wall lies on the ray line. Rare, handled exactly.
    collinear = (np.abs(denom) <= _PARALLEL_EPS) & (np.abs(cross_dr) <= _PARALLEL_EPS)
    if collinear.any():
        rows, cols = np.nonzero(collinear)
        for i, j in zip(rows, cols):
            ri = r[i]
            rr = float(ri @ ri)
            if rr < _PARALLEL_EPS:
                continue
            ta = float((a[j] - c) @ ri) / rr
            tb = float((a[j] + s[j] - c) @ ri) / rr
            lo, hi = min(ta, tb), max(ta, tb)
            if hi > _RAY_EPS and lo < 1.0 - _RAY_EPS:
                blocked[i] = True
    return blocked


def _range_mask(camera_pos: np.ndarray, targets: np.ndarray, max_range: float) -> np.ndarray:
    """Inclusive 3D range check, computed on squared distances."""
    dx = targets[:, 0] - camera_pos[0]
    dy = targets[:, 1] - camera_pos[1]
    dz = targets[:, 2] - camera_pos[2]
    return dx * dx + dy * dy + dz * dz <= max_range * max_range


def _fov_mask(camera_pos2d: np.ndarray, axis2d: np.ndarray, targets2d: np.ndarray, cos_half: float) -> np.ndarray:
    """Horizontal field-of-view check (inclusive at the boundary)."""
    dx = targets2d[:, 0] - camera_pos2d[0]
    dy = targets2d[:, 1] - camera_pos2d[1]
    dist = np.sqrt(dx * dx + dy * dy)
    dot = dx * axis2d[0] + dy * axis2d[1]
    return (dist > _RAY_EPS) & (dot >= cos_half * dist)


def _facing_mask(camera_pos2d: np.ndarray, positions2d: np.ndarray, normals2d: np.ndarray) -> np.ndarray:
    """Marker surface-normal check: viewing incidence at most MAX_INCIDENCE_ANGLE."""
    dx = camera_pos2d[0] - positions2d[:, 0]
    dy = camera_pos2d[1] - positions2d[:, 1]
    dist = np.sqrt(dx * dx + dy * dy)
    dot = dx * normals2d[:, 0] + dy * normals2d[:, 1]
    return (dist > _RAY_EPS) & (dot >= math.cos(MAX_INCIDENCE_ANGLE) * dist)


def optical_axis2d(camera: Pose6D) -> np.ndarray:
    """Horizontal projection of the camera +x (optical) axis."""
    return camera.rotation[0:2, 0]


def visible_point_mask(
    camera: Pose6D,
    positions: np.ndarray,
    scene: SceneDescription,
    segments: Optional[np.ndarray] = None,
) -> np.ndarray:
    """Vectorized point visibility for one camera over (P, 3) positions."""
    if segments is None:
        segments = scene.segment_endpoints()
    positions = np.atleast_2d(np.asarray(positions, dtype=float))
    cam = camera.translation
    mask = _range_mask(cam, positions, scene.camera_range)
    mask &= _fov_mask(cam[0:2], optical_axis2d(camera), positions[:, 0:2], math.cos(0.5 * scene.camera_fov))
    if mask.any():
        idx = np.nonzero(mask)[0]
        mask[idx] = ~blocked_mask(cam[0:2], positions[idx, 0:2], segments)
    return mask


def point_visible(
    camera: Pose6D,
    point: np.ndarray,
    scene: SceneDescription,
    segments: Optional[np.ndarray] = None,
) -> bool:
    """Whether a feature point is visible from a camera pose."""
    return bool(visible_point_mask(camera, np.asarray(point, dtype=float)[None, :], scene, segments)[0])


def visible_marker_mask(
    camera: Pose6D,
    positions: np.ndarray,
    normals: np.ndarray,
    scene: SceneDescription,
    segments: Optional[np.ndarray] = None,
) -> np.ndarray:
    """Vectorized marker visibility for one camera.

    Args:
        camera: camera pose.
        positions: (M, 3) marker centers.
        normals: (M, 3) outward marker normals.
        scene: provides fov, range and walls.
        segments: optional precomputed ``scene.segment_endpoints()``.
    """
    if segments is None:
        segments = scene.segment_endpoints()
    positions = np.atleast_2d(np.asarray(positions, dtype=float))
    normals = np.atleast_2d(np.asarray(normals, dtype=float))
    cam = camera.translation
    cos_half = math.cos(0.5 * FRUSTUM_MARGIN * scene.camera_fov)
    mask = _range_mask(cam, positions, scene.camera_range)
    mask &= _fov_mask(cam[0:2], optical_axis2d(camera), positions[:, 0:2], cos_half)
    mask &= _facing_mask(cam[0:2], positions[:, 0:2], normals[:, 0:2])
    if mask.any():
        idx = np.nonzero(mask)[0]
        mask[idx] = ~blocked_mask(cam[0:2], positions[idx, 0:2], segments)
    return mask


def marker_visible(
    camera: Pose6D,
    marker,
    scene: SceneDescription,
    segments: Optional[np.ndarray] = None,
) -> bool:
    """Whether a wall-mounted marker is visible (and detectable) from a pose.

    ``marker`` is anything with ``pose`` and ``normal`` attributes (a
    :class:`MarkerCandidate` or a placed marker).
    """
    pos = marker.pose.translation[None, :]
    nrm = np.asarray(marker.normal, dtype=float)[None, :]
    return bool(visible_marker_mask(camera, pos, nrm, scene, segments)[0])


# ---------------------------------------------------------------------------
# Index
# ---------------------------------------------------------------------------


@dataclass
class VisibilityIndex:
    """Per-camera visible sets plus the marker -> cameras transpose."""

    points_seen: List[np.ndarray]  # per camera pose, sorted point indices
    markers_seen: List[np.ndarray]  # per camera pose, sorted candidate indices
    affected_cameras: List[np.ndarray]  # per marker candidate, sorted pose indices
    n_points: int
    n_markers: int

    @property
    def n_cameras(self) -> int:
        return len(self.points_seen)

    def coverage_counts(self) -> np.ndarray:
        """|C_m| for every marker candidate."""
        return np.array([len(c) for c in self.affected_cameras], dtype=int)


def build_index(space: GroundPlaneSpace, scene: SceneDescription) -> VisibilityIndex:
    """Compute all camera->point and camera->marker visibility sets.

    Range, occlusion and marker facing are independent of camera yaw, so they
    are evaluated once per grid location; the per-pose field-of-view test then
    filters each location's candidate set.
    """
    segments = scene.segment_endpoints()
    n_yaw = len(space.camera_yaws)
    positions = (
        np.stack([f.position for f in scene.feature_points])
        if scene.feature_points
        else np.zeros((0, 3))
    )
    mk_pos = (
        np.stack([m.pose.translation for m in space.marker_candidates])
        if space.marker_candidates
        else np.zeros((0, 3))
    )
    mk_nrm = (
        np.stack([m.normal for m in space.marker_candidates])
        if space.marker_candidates
        else np.zeros((0, 3))
    )

    cos_half_pt = math.cos(0.5 * scene.camera_fov)
    cos_half_mk = math.cos(0.5 * FRUSTUM_MARGIN * scene.camera_fov)

    points_seen: List[np.ndarray] = [np.zeros(0, dtype=int)] * space.n_cameras
    markers_seen: List[np.ndarray] = [np.zeros(0, dtype=int)] * space.n_cameras

    for li, loc in enumerate(space.camera_locations):
        cam3 = np.array([loc[0], loc[1], space.eye_height])
        # Yaw-independent part for points.
        pt_ok = _range_mask(cam3, positions, scene.camera_range) if len(positions) else np.zeros(0, bool)
        if pt_ok.any():
            idx = np.nonzero(pt_ok)[0]
            pt_ok[idx] = ~blocked_mask(loc, positions[idx, 0:2], segments)
        pt_cand = np.nonzero(pt_ok)[0]
        # Yaw-independent part for markers.
        mk_ok = _range_mask(cam3, mk_pos, scene.camera_range) if len(mk_pos) else np.zeros(0, bool)
        if mk_ok.any():
            mk_ok &= _facing_mask(loc, mk_pos[:, 0:2], mk_nrm[:, 0:2])
        if mk_ok.any():
            idx = np.nonzero(mk_ok)[0]
            mk_ok[idx] = ~blocked_mask(loc, mk_pos[idx, 0:2], segments)
        mk_cand = np.nonzero(mk_ok)[0]

        for yi in range(n_yaw):
            pose_idx = li * n_yaw + yi
            camera = space.camera_poses[pose_idx]
            axis = optical_axis2d(camera)
            if len(pt_cand):
                fov = _fov_mask(loc, axis, positions[pt_cand, 0:2], cos_half_pt)
                points_seen[pose_idx] = pt_cand[fov]
            if len(mk_cand):
                fov = _fov_mask(loc, axis, mk_pos[mk_cand, 0:2], cos_half_mk)
                markers_seen[pose_idx] = mk_cand[fov]

    affected: List[List[int]] = [[] for _ in range(len(space.marker_candidates))]
    for ci, seen in enumerate(markers_seen):
        for m in seen:
            affected[int(m)].append(ci)
    affected_arr = [np.asarray(lst, dtype=int) for lst in affected]

    return VisibilityIndex(
        points_seen=points_seen,
        markers_seen=markers_seen,
        affected_cameras=affected_arr,
        n_points=len(positions),
        n_markers=len(space.marker_candidates),
    )


# ---------------------------------------------------------------------------
# Index cache
# ---------------------------------------------------------------------------


def save_index(index: VisibilityIndex, scene_hash: str, path: str) -> None:
    """Persist a visibility index keyed by the scene content hash."""
    data = {
        "scene_hash": scene_hash,
        "n_points": index.n_points,
        "n_markers": index.n_markers,
        "points_seen": [a.tolist() for a in index.points_seen],
        "markers_seen": [a.tolist() for a in index.markers_seen],
    }
    atomic_write_text(path, json.dumps(data, sort_keys=True))


def load_index(path: str, expected_scene_hash: Optional[str] = None) -> VisibilityIndex:
    with open(path) as fh:
        data = json.load(fh)
    if expected_scene_hash is not None and data.get("scene_hash") != expected_scene_hash:
        raise IndexCacheError("visibility cache does not match the scene (content hash mismatch)")
    points_seen = [np.asarray(a, dtype=int) for a in data["points_seen"]]
    markers_seen = [np.asarray(a, dtype=int) for a in data["markers_seen"]]
    n_markers = int(data["n_markers"])
    affected: List[List[int]] = [[] for _ in range(n_markers)]
    for ci, seen in enumerate(markers_seen):
        for m in seen:
            affected[int(m)].append(ci)
    return VisibilityIndex(
        points_seen=points_seen,
        markers_seen=markers_seen,
        affected_cameras=[np.asarray(lst, dtype=int) for lst in affected],
        n_points=int(data["n_points"]),
        n_markers=n_markers,
    )


def build_index_cached(
    space: GroundPlaneSpace, scene: SceneDescription, cache_path: Optional[str] = None
) -> VisibilityIndex:
    """Build the index, reusing ``cache_path`` when its scene hash matches."""
    if cache_path is None:
        return build_index(space, scene)
    digest = scene_content_hash(scene)
    try:
        return load_index(cache_path, expected_scene_hash=digest)
    except (FileNotFoundError, IndexCacheError, KeyError, json.JSONDecodeError):
        index = build_index(space, scene)
        save_index(index, digest, cache_path)
        return index
