"""Scene description and ground-plane discretization.

A scene is a set of closed wall polylines with feature points anchored on the
walls, plus camera intrinsics (horizontal field of view, range) and the
discretization parameters. Discretizing a scene yields a
:class:`GroundPlaneSpace`: an occupancy grid whose free cell centers become
candidate camera locations (each expanded into several evenly spaced yaw
orientations) and a perimeter walk of the walls that yields wall-mounted
marker candidate poses facing into free space.
"""

from __future__ import annotations

import hashlib
import json
import math
import os
import tempfile
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import geometry
from .features import FeaturePoint

DEFAULT_GRID_RESOLUTION = 0.5
DEFAULT_MARKER_SPACING = 0.5
DEFAULT_ORIENTATIONS = 8
DEFAULT_EYE_HEIGHT = 1.5

# Offset used when probing which side of a wall is free space.
_NORMAL_PROBE = 1e-3


class SceneError(ValueError):
    """Raised for malformed or degenerate scene descriptions."""


class SceneFormatError(SceneError):
    """Raised when a scene file does not follow the expected schema."""


@dataclass
class Pose6D:
    """A rigid transform world_T_body as a rotation matrix and translation."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self) -> None:
        self.rotation = np.asarray(self.rotation, dtype=float)
        self.translation = np.asarray(self.translation, dtype=float)
        if self.rotation.shape != (3, 3) or self.translation.shape != (3,):
            raise ValueError("Pose6D needs a 3x3 rotation and length-3 translation")

    def validate(self, tol: float = 1e-9) -> None:
        """Check orthonormality and det(R) = +1 within ``tol``."""
        R = self.rotation
        if not np.all(np.isfinite(R)) or not np.all(np.isfinite(self.translation)):
            raise ValueError("pose contains non-finite entries")
        err = float(np.abs(R.T @ R - np.eye(3)).max())
        if err > tol:
            raise ValueError(f"rotation is not orthonormal (max deviation {err:.3e})")
        if abs(float(np.linalg.det(R)) - 1.0) > tol:
            raise ValueError("rotation determinant is not +1")

    def inverse(self) -> "Pose6D":
        Rt = self.rotation.T
        return Pose6D(Rt, -(Rt @ self.translation))

    def compose(self, other: "Pose6D") -> "Pose6D":
        return Pose6D(
            self.rotation @ other.rotation,
            self.rotation @ other.translation + self.translation,
        )

    def transform(self, point: np.ndarray) -> np.ndarray:
        return self.rotation @ np.asarray(point, dtype=float) + self.translation

    def copy(self) -> "Pose6D":
        return Pose6D(self.rotation.copy(), self.translation.copy())


def planar_camera_pose(x: float, y: float, yaw: float, eye_height: float) -> Pose6D:
    """Camera pose on the ground plane; the optical axis is the body +x axis."""
    return Pose6D(geometry.rot_z(yaw), np.array([x, y, eye_height]))


def marker_pose_from_normal(position: np.ndarray, normal2d: np.ndarray, eye_height: float) -> Pose6D:
    """Wall-mounted marker pose whose body +z axis is the outward wall normal.

    The marker +y axis points up; +x completes the right-handed frame (it is
    the wall tangent rotated to match).
    """
    n = geometry.unit(np.array([normal2d[0], normal2d[1], 0.0]))
    up = np.array([0.0, 0.0, 1.0])
    x_axis = np.cross(up, n)
    R = np.column_stack([x_axis, up, n])
    return Pose6D(R, np.array([position[0], position[1], eye_height]))


@dataclass
class SceneDescription:
    """Walls, features, camera intrinsics and discretization parameters."""

    walls: List[np.ndarray]
    feature_points: List[FeaturePoint] = field(default_factory=list)
    camera_fov: float = math.pi / 2.0
    camera_range: float = 10.0
    grid_resolution: float = DEFAULT_GRID_RESOLUTION
    marker_spacing: float = DEFAULT_MARKER_SPACING
    orientations_per_cell: int = DEFAULT_ORIENTATIONS
    eye_height: float = DEFAULT_EYE_HEIGHT
    feature_seed: Optional[int] = None
    feature_generator: Optional[dict] = None
    name: str = "scene"

    def __post_init__(self) -> None:
        self.walls = [np.asarray(w, dtype=float) for w in self.walls]

    def validate(self) -> None:
        if not self.walls:
            raise SceneError("scene has no walls")
        for w in self.walls:
            if w.ndim != 2 or w.shape[1] != 2 or w.shape[0] < 3:
                raise SceneError("each wall must be an (n, 2) polyline with n >= 3")
            if not np.all(np.isfinite(w)):
                raise SceneError("wall vertices must be finite")
        if not 0.0 < self.camera_fov <= 2.0 * math.pi:
            raise SceneError("camera_fov must lie in (0, 2*pi]")
        if self.camera_range <= 0.0:
            raise SceneError("camera_range must be positive")
        if self.grid_resolution <= 0.0:
            raise SceneError("grid_resolution must be positive")
        if self.marker_spacing <= 0.0:
            raise SceneError("marker_spacing must be positive")
        if self.orientations_per_cell < 1:
            raise SceneError("orientations_per_cell must be at least 1")

    def wall_segments(self) -> List[Tuple[int, np.ndarray, np.ndarray]]:
        """Flattened (polyline_index, a, b) wall segments in a stable order."""
        segs: List[Tuple[int, np.ndarray, np.ndarray]] = []
        for pi, poly in enumerate(self.walls):
            for a, b in geometry.polyline_segments(poly):
                segs.append((pi, a, b))
        return segs

    def segment_endpoints(self) -> np.ndarray:
        """All wall segments as an (S, 4) array of (ax, ay, bx, by)."""
        segs = self.wall_segments()
        out = np.zeros((len(segs), 4))
        for i, (_, a, b) in enumerate(segs):
            out[i, :2] = a
            out[i, 2:] = b
        return out


@dataclass
class MarkerCandidate:
    """A wall-mounted marker candidate produced by the perimeter walk."""

    pose: Pose6D
    normal: np.ndarray  # 3D outward (into free space) unit normal
    position2d: np.ndarray
    tangent2d: np.ndarray  # unit direction of the wall segment
    segment_index: int  # index into SceneDescription.wall_segments()
    segment_t: float  # distance from the segment start, meters
    arc_offset: float  # cumulative arc length along the perimeter ordering


@dataclass
class OccupancyGrid:
    """Axis-aligned occupancy grid covering the walls with one cell of padding."""

    origin: np.ndarray  # (2,) lower-left corner of cell (0, 0)
    resolution: float
    occupied: np.ndarray  # bool array of shape (nx, ny)

    def cell_center(self, ix: int, iy: int) -> np.ndarray:
        return self.origin + (np.array([ix, iy]) + 0.5) * self.resolution


@dataclass
class GroundPlaneSpace:
    """Discretized camera poses and marker candidates for one scene."""

    grid: OccupancyGrid
    camera_locations: np.ndarray  # (L, 2) free cell centers
    camera_yaws: np.ndarray  # (n,) evenly spaced yaw angles
    camera_poses: List[Pose6D]  # length L * n, location-major
    pose_location: np.ndarray  # (|C|,) int, camera pose -> location row
    marker_candidates: List[MarkerCandidate]
    eye_height: float
    perimeter_length: float = 0.0
    placed_markers: List[int] = field(default_factory=list)

    @property
    def n_cameras(self) -> int:
        return len(self.camera_poses)

    @property
    def n_candidates(self) -> int:
        return len(self.marker_candidates)


# ---------------------------------------------------------------------------
# Discretization
# ---------------------------------------------------------------------------


def _build_occupancy(scene: SceneDescription) -> OccupancyGrid:
    res = scene.grid_resolution
    all_pts = np.vstack([geometry.close_polyline(w) for w in scene.walls])
    lo = all_pts.min(axis=0) - res  # one padding cell on every side
    hi = all_pts.max(axis=0) + res
    nx = int(math.ceil((hi[0] - lo[0] - 1e-9) / res))
    ny = int(math.ceil((hi[1] - lo[1] - 1e-9) / res))
    occupied = np.zeros((nx, ny), dtype=bool)

    segs = [(a, b) for _, a, b in scene.wall_segments()]
    for ix in range(nx):
        for iy in range(ny):
            cell_lo = lo + np.array([ix, iy]) * res
            cell_hi = cell_lo + res
            center = cell_lo + 0.5 * res
            if not geometry.point_in_free_space(center, scene.walls):
                occupied[ix, iy] = True
                continue
            for a, b in segs:
                if geometry.segment_hits_open_rect(a, b, cell_lo, cell_hi):
                    occupied[ix, iy] = True
                    break
    return OccupancyGrid(origin=lo, resolution=res, occupied=occupied)


def _perimeter_candidates(scene: SceneDescription) -> List[MarkerCandidate]:
    """Walk every wall polyline at fixed arc-length steps of marker_spacing."""
    spacing = scene.marker_spacing
    candidates: List[MarkerCandidate] = []
    arc_base = 0.0
    seg_index = 0
    for poly in scene.walls:
        segs = geometry.polyline_segments(poly)
        lengths = [float(np.linalg.norm(b - a)) for a, b in segs]
        total = sum(lengths)
        if total <= 0.0:
            seg_index += len(segs)
            continue
        n_samples = int(math.floor(total / spacing - 1e-9)) + 1
        starts = np.concatenate([[0.0], np.cumsum(lengths)])
        for i in range(n_samples):
            s = i * spacing
            # Locate the segment containing arc position s.
            j = int(np.searchsorted(starts[1:], s, side="right"))
            j = min(j, len(segs) - 1)
            a, b = segs[j]
            seg_len = lengths[j]
            if seg_len <= 0.0:
                continue
            t = s - starts[j]
            tangent = (b - a) / seg_len
            pos = a + t * tangent
            # Probe from a point nudged off the segment endpoints: a corner
            # sample would otherwise probe along the adjacent wall's line,
            # where the free-space test is ill-defined.
            margin = min(_NORMAL_PROBE, 0.5 * seg_len)
            probe_base = a + min(max(t, margin), seg_len - margin) * tangent
            normal = _inward_normal(probe_base, tangent, scene)
            pose = marker_pose_from_normal(pos, normal, scene.eye_height)
            candidates.append(
                MarkerCandidate(
                    pose=pose,
                    normal=np.array([normal[0], normal[1], 0.0]),
                    position2d=pos.copy(),
                    tangent2d=tangent.copy(),
                    segment_index=seg_index + j,
                    segment_t=float(t),
                    arc_offset=float(arc_base + s),
                )
            )
        arc_base += total
        seg_index += len(segs)
    return candidates


def _inward_normal(pos: np.ndarray, tangent: np.ndarray, scene: SceneDescription) -> np.ndarray:
    """Wall normal at ``pos`` oriented towards free space."""
    n = geometry.rot90_ccw(tangent)
    for probe in (_NORMAL_PROBE, 10.0 * _NORMAL_PROBE):
        if geometry.point_in_free_space(pos + probe * n, scene.walls):
            return n
        if geometry.point_in_free_space(pos - probe * n, scene.walls):
            return -n
    raise SceneError("degenerate scene")


def discretize(scene: SceneDescription) -> GroundPlaneSpace:
    """Discretize a scene into camera poses and marker candidates.

    Camera poses are the free-cell centers of the occupancy grid, each
    duplicated at ``orientations_per_cell`` yaw angles evenly spaced over
    [0, 2*pi). Marker candidates come from the perimeter walk of the walls.

    Raises:
        SceneError: if the scene is invalid or yields no free cell or no
            marker candidate ("degenerate scene").
    """
    scene.validate()
    grid = _build_occupancy(scene)
    free_ix, free_iy = np.nonzero(~grid.occupied)
    if free_ix.size == 0:
        raise SceneError("degenerate scene")
    # Row-major order over (ix, iy) keeps location indices deterministic.
    order = np.lexsort((free_iy, free_ix))
    locations = np.stack(
        [grid.cell_center(int(free_ix[o]), int(free_iy[o])) for o in order]
    )

    n = scene.orientations_per_cell
    yaws = np.arange(n) * (2.0 * math.pi / n)
    poses: List[Pose6D] = []
    pose_loc = np.repeat(np.arange(len(locations)), n)
    for loc in locations:
        for yaw in yaws:
            poses.append(planar_camera_pose(loc[0], loc[1], float(yaw), scene.eye_height))

    candidates = _perimeter_candidates(scene)
    if not candidates:
        raise SceneError("degenerate scene")
    perimeter = 0.0
    for poly in scene.walls:
        for a, b in geometry.polyline_segments(poly):
            perimeter += float(np.linalg.norm(b - a))
    return GroundPlaneSpace(
        grid=grid,
        camera_locations=locations,
        camera_yaws=yaws,
        camera_poses=poses,
        pose_location=pose_loc,
        marker_candidates=candidates,
        eye_height=scene.eye_height,
        perimeter_length=perimeter,
        placed_markers=[],
    )


# ---------------------------------------------------------------------------
# Serialization
# ---------------------------------------------------------------------------


def _require(obj: dict, key: str) -> object:
    if key not in obj:
        raise SceneFormatError(f"missing field: {key}")
    return obj[key]


def scene_to_dict(scene: SceneDescription) -> dict:
    return {
        "name": scene.name,
        "walls": [np.asarray(w, dtype=float).tolist() for w in scene.walls],
        "camera": {
            "fov_rad": scene.camera_fov,
            "range": scene.camera_range,
            "eye_height": scene.eye_height,
        },
        "discretization": {
            "grid_resolution": scene.grid_resolution,
            "marker_spacing": scene.marker_spacing,
            "orientations_per_cell": scene.orientations_per_cell,
        },
        "feature_points": {
            "seed": scene.feature_seed,
            "generator": scene.feature_generator,
            "points": [
                {
                    "position": p.position.tolist(),
                    "descriptor": p.descriptor.tolist(),
                }
                for p in scene.feature_points
            ],
        },
    }


def scene_from_dict(data: dict) -> SceneDescription:
    if not isinstance(data, dict):
        raise SceneFormatError("scene file must contain a JSON object")
    walls_raw = _require(data, "walls")
    camera = _require(data, "camera")
    disc = _require(data, "discretization")
    feats = _require(data, "feature_points")
    try:
        walls = [np.asarray(w, dtype=float) for w in walls_raw]
    except (TypeError, ValueError) as exc:
        raise SceneFormatError(f"malformed walls: {exc}") from None
    points = [
        FeaturePoint(
            position=np.asarray(p["position"], dtype=float),
            descriptor=np.asarray(p["descriptor"], dtype=float),
        )
        for p in feats.get("points", [])
    ]
    scene = SceneDescription(
        walls=walls,
        feature_points=points,
        camera_fov=float(_require(camera, "fov_rad")),
        camera_range=float(_require(camera, "range")),
        grid_resolution=float(_require(disc, "grid_resolution")),
        marker_spacing=float(_require(disc, "marker_spacing")),
        orientations_per_cell=int(_require(disc, "orientations_per_cell")),
        eye_height=float(camera.get("eye_height", DEFAULT_EYE_HEIGHT)),
        feature_seed=feats.get("seed"),
        feature_generator=feats.get("generator"),
        name=str(data.get("name", "scene")),
    )
    scene.validate()
    return scene


def atomic_write_text(path: str, text: str) -> None:
    """Write a file atomically (write to a temp file, then rename)."""
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, suffix=".tmp")
    try:
        with os.fdopen(fd, "w") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def dumps_canonical(data: dict) -> str:
    """Deterministic JSON encoding (sorted keys, exact float round-trip)."""
    return json.dumps(data, sort_keys=True, indent=1)


def save_scene(scene: SceneDescription, path: str) -> None:
    atomic_write_text(path, dumps_canonical(scene_to_dict(scene)) + "\n")


def load_scene(path: str) -> SceneDescription:
    try:
        with open(path) as fh:
            data = json.load(fh)
    except json.JSONDecodeError as exc:
        raise SceneFormatError(f"invalid JSON: {exc}") from None
    return scene_from_dict(data)


def scene_content_hash(scene: SceneDescription) -> str:
    """Stable content hash of a scene, used to key visibility caches."""
    return hashlib.sha256(dumps_canonical(scene_to_dict(scene)).encode()).hexdigest()


def _pose_to_dict(pose: Pose6D) -> dict:
    return {
        "rotation": pose.rotation.reshape(-1).tolist(),  # row-major
        "translation": pose.translation.tolist(),
    }


def _pose_from_dict(d: dict) -> Pose6D:
    return Pose6D(
        np.asarray(d["rotation"], dtype=float).reshape(3, 3),
        np.asarray(d["translation"], dtype=float),
    )


def space_to_dict(space: GroundPlaneSpace) -> dict:
    return {
        "grid": {
            "origin": space.grid.origin.tolist(),
            "resolution": space.grid.resolution,
            "shape": list(space.grid.occupied.shape),
            "occupied": space.grid.occupied.astype(int).tolist(),
        },
        "eye_height": space.eye_height,
        "perimeter_length": space.perimeter_length,
        "camera_locations": space.camera_locations.tolist(),
        "camera_yaws": space.camera_yaws.tolist(),
        "camera_poses": [
            dict(_pose_to_dict(p), location=int(space.pose_location[i]))
            for i, p in enumerate(space.camera_poses)
        ],
        "marker_candidates": [
            dict(
                _pose_to_dict(m.pose),
                normal=m.normal.tolist(),
                position2d=m.position2d.tolist(),
                tangent2d=m.tangent2d.tolist(),
                segment_index=m.segment_index,
                segment_t=m.segment_t,
                arc_offset=m.arc_offset,
            )
            for m in space.marker_candidates
        ],
        "placed_markers": list(space.placed_markers),
    }


def space_from_dict(data: dict) -> GroundPlaneSpace:
    grid = OccupancyGrid(
        origin=np.asarray(data["grid"]["origin"], dtype=float),
        resolution=float(data["grid"]["resolution"]),
        occupied=np.asarray(data["grid"]["occupied"], dtype=bool),
    )
    poses = [_pose_from_dict(p) for p in data["camera_poses"]]
    pose_loc = np.array([p["location"] for p in data["camera_poses"]], dtype=int)
    candidates = [
        MarkerCandidate(
            pose=_pose_from_dict(m),
            normal=np.asarray(m["normal"], dtype=float),
            position2d=np.asarray(m["position2d"], dtype=float),
            tangent2d=np.asarray(m["tangent2d"], dtype=float),
            segment_index=int(m["segment_index"]),
            segment_t=float(m["segment_t"]),
            arc_offset=float(m["arc_offset"]),
        )
        for m in data["marker_candidates"]
    ]
    return GroundPlaneSpace(
        grid=grid,
        camera_locations=np.asarray(data["camera_locations"], dtype=float),
        camera_yaws=np.asarray(data["camera_yaws"], dtype=float),
        camera_poses=poses,
        pose_location=pose_loc,
        marker_candidates=candidates,
        eye_height=float(data["eye_height"]),
        perimeter_length=float(data.get("perimeter_length", 0.0)),
        placed_markers=[int(i) for i in data.get("placed_markers", [])],
    )


def save_space(space: GroundPlaneSpace, path: str) -> None:
    atomic_write_text(path, dumps_canonical(space_to_dict(space)) + "\n")


def load_space(path: str) -> GroundPlaneSpace:
    with open(path) as fh:
        return space_from_dict(json.load(fh))
