"""Desk-scale geometric localization simulator.

Evaluates a marker placement by localizing perturbed test poses from noisy
bearing observations. The pipeline per test pose:

1. Collect visible feature points and placed markers from the ground-truth
   pose; perturb each unit bearing with tangential Gaussian noise and each
   feature descriptor with isotropic noise.
2. Associate each observation with the nearest map descriptor. Repetitive
   structure (cloned descriptors) makes this flip between look-alike
   locations, which is the failure mode markers are meant to fix. Markers
   carry unique ids and always associate correctly, and each additionally
   yields a noisy full relative-pose measurement.
3. Solve the pose robustly: candidate poses come from each marker's relative
   pose and from a closed-form planar three-point resection over random
   bearing triples; the candidate with the most angular inliers wins and is
   polished with damped Gauss-Newton on the inlier bearings plus all marker
   constraints.
4. Report rotation and translation errors against ground truth.

All randomness derives from a root seed through named substreams keyed by
(test-pose index, stream id[, marker id]), so observation noise is identical
across placements being compared and results are independent of evaluation
order and parallelism.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from . import geometry
from .features import FeaturePoint
from .localizability import SENTINEL_SCORE, marker_relative_residual
from .scene import (
    GroundPlaneSpace,
    MarkerCandidate,
    Pose6D,
    SceneDescription,
    marker_pose_from_normal,
    planar_camera_pose,
)
from .visibility import VisibilityIndex, marker_visible, visible_point_mask

DEFAULT_TRANS_THRESHOLD = 0.05  # m
DEFAULT_ROT_THRESHOLD = math.radians(5.0)
COARSE_TRANS_THRESHOLD = 0.30  # m
COARSE_ROT_THRESHOLD = math.radians(10.0)

# Substream ids for seed derivation.
_STREAM_OBS = 0
_STREAM_MARKER_OBS = 1
_STREAM_RANSAC = 2
_STREAM_SAMPLING = 10
_STREAM_PLACEMENT = 11


def derive_rng(root_seed: int, *key: int) -> np.random.Generator:
    """Deterministic substream of the root seed, keyed by integers."""
    ss = np.random.SeedSequence(entropy=int(root_seed), spawn_key=tuple(int(k) for k in key))
    return np.random.default_rng(ss)


@dataclass
class TestPose:
    """A perturbed copy of a discretized camera pose."""

    pose: Pose6D
    parent_index: int
    offset: np.ndarray  # (dx, dy, dyaw)


@dataclass
class PlacedMarker:
    """A marker instance mounted in the scene (possibly off-candidate)."""

    marker_id: int
    pose: Pose6D
    normal: np.ndarray


@dataclass
class LocalizeConfig:
    """Noise model and solver settings of the localization simulator."""

    sigma_bearing: float = math.radians(1.0)
    sigma_descriptor: float = 0.05
    marker_rel_sigma_rot: float = math.radians(1.0)
    marker_rel_sigma_trans: float = 0.01
    ransac_iterations: int = 200
    ransac_threshold: float = math.radians(2.0)
    refine_iterations: int = 25
    min_correspondences: int = 3
    trans_threshold: float = DEFAULT_TRANS_THRESHOLD
    rot_threshold: float = DEFAULT_ROT_THRESHOLD


@dataclass
class LocalizationResult:
    """Outcome of localizing one test pose."""

    estimate: Optional[Pose6D]
    rotation_error: float
    translation_error: float
    n_correspondences: int
    n_inliers: int
    used_marker: bool
    failed: bool


# ---------------------------------------------------------------------------
# Error metrics and recall
# ---------------------------------------------------------------------------


def rotation_error(r_est: np.ndarray, r_true: np.ndarray) -> float:
    """Geodesic rotation distance |acos((tr(Ra^T Rb) - 1) / 2)|, radians."""
    c = 0.5 * (float(np.trace(np.asarray(r_est).T @ np.asarray(r_true))) - 1.0)
    return abs(math.acos(max(-1.0, min(1.0, c))))


def translation_error(t_est: np.ndarray, t_true: np.ndarray) -> float:
    """Euclidean translation distance, meters."""
    return float(np.linalg.norm(np.asarray(t_est, dtype=float) - np.asarray(t_true, dtype=float)))


def recall(
    results: Sequence[LocalizationResult],
    trans_threshold: float = DEFAULT_TRANS_THRESHOLD,
    rot_threshold: float = DEFAULT_ROT_THRESHOLD,
) -> float:
    """Percent of test poses localized within both error thresholds.

    Failed localizations count against recall (they stay in the denominator).
    """
    if not results:
        raise ValueError("recall of an empty result list")
    ok = sum(
        1
        for r in results
        if not r.failed
        and r.translation_error <= trans_threshold
        and r.rotation_error <= rot_threshold
    )
    return 100.0 * ok / len(results)


# ---------------------------------------------------------------------------
# Test pose sampling
# ---------------------------------------------------------------------------


def sampling_weights(scores: np.ndarray) -> np.ndarray:
    """Weights 2*max - mean - score: the worst-localizable poses weigh most.

    All outputs are non-negative; an all-equal input yields all zeros (the
    sampler falls back to uniform in that case).
    """
    scores = np.asarray(scores, dtype=float)
    if scores.size == 0:
        raise ValueError("sampling_weights of an empty score list")
    if not np.all(np.isfinite(scores)):
        raise ValueError("scores must be finite")
    w = 2.0 * scores.max() - scores.mean() - scores
    return np.maximum(w, 0.0)


def sample_test_poses(
    space: GroundPlaneSpace,
    scores: np.ndarray,
    n: int,
    root_seed: int,
    weighted: bool = True,
    trans_bound: float = 0.5,
    yaw_bound: float = 0.5,
) -> List[TestPose]:
    """Draw perturbed test poses around the discretized camera poses.

    Parents are drawn (with replacement) either uniformly or proportionally
    to :func:`sampling_weights`; sentinel-scored poses are never parents.
    Each copy perturbs x and y by +-trans_bound meters and yaw by +-yaw_bound
    radians, all uniform; height, pitch and roll stay exact. Perturbed poses
    may leave free space; localization only interacts with walls through
    visibility, so this is harmless and mirrors how a carried device strays
    from grid cells.
    """
    scores = np.asarray(scores, dtype=float)
    if len(scores) != space.n_cameras:
        raise ValueError("scores must align with space.camera_poses")
    eligible = np.nonzero(scores != SENTINEL_SCORE)[0]
    if eligible.size == 0:
        raise ValueError("no camera pose with a finite score to sample from")
    rng = derive_rng(root_seed, _STREAM_SAMPLING)
    if weighted:
        w = sampling_weights(scores[eligible])
        total = float(w.sum())
        p = w / total if total > 0.0 else None
    else:
        p = None
    parents = rng.choice(eligible, size=n, replace=True, p=p)
    dxy = rng.uniform(-trans_bound, trans_bound, size=(n, 2))
    dyaw = rng.uniform(-yaw_bound, yaw_bound, size=n)

    out: List[TestPose] = []
    for i in range(n):
        parent = int(parents[i])
        base = space.camera_poses[parent]
        yaw = math.atan2(base.rotation[1, 0], base.rotation[0, 0])
        pose = planar_camera_pose(
            float(base.translation[0] + dxy[i, 0]),
            float(base.translation[1] + dxy[i, 1]),
            geometry.wrap_angle(yaw + float(dyaw[i])),
            space.eye_height,
        )
        out.append(
            TestPose(
                pose=pose,
                parent_index=parent,
                offset=np.array([dxy[i, 0], dxy[i, 1], dyaw[i]]),
            )
        )
    return out


# ---------------------------------------------------------------------------
# Placements
# ---------------------------------------------------------------------------


def placement_from_candidates(space: GroundPlaneSpace, indices: Sequence[int]) -> List[PlacedMarker]:
    """Instantiate placed markers at candidate poses, ids = candidate indices."""
    out = []
    for i in indices:
        cand = space.marker_candidates[int(i)]
        out.append(PlacedMarker(marker_id=int(i), pose=cand.pose, normal=cand.normal))
    return out


def random_placement(space: GroundPlaneSpace, k: int, seed: int) -> List[int]:
    """k distinct candidates drawn uniformly at random."""
    n = len(space.marker_candidates)
    if k > n:
        raise ValueError(f"k={k} exceeds the {n} available candidates")
    rng = derive_rng(seed, _STREAM_PLACEMENT)
    return sorted(int(i) for i in rng.choice(n, size=k, replace=False))


def uniform_placement(space: GroundPlaneSpace, k: int) -> List[int]:
    """k candidates at equal arc-length spacing along the perimeter ordering.

    Target arc positions are j * L / k from the perimeter start; each target
    takes the nearest still-unused candidate (ties toward the lower index),
    so the first target always selects candidate 0.
    """
    n = len(space.marker_candidates)
    if k > n:
        raise ValueError(f"k={k} exceeds the {n} available candidates")
    if k == 0:
        return []
    arcs = np.array([m.arc_offset for m in space.marker_candidates])
    total = space.perimeter_length if space.perimeter_length > 0.0 else float(arcs.max()) + 1.0
    chosen: List[int] = []
    used = np.zeros(n, dtype=bool)
    for j in range(k):
        target = j * total / k
        dist = np.abs(arcs - target)
        dist[used] = np.inf
        pick = int(np.argmin(dist))  # argmin takes the first (lowest index) tie
        used[pick] = True
        chosen.append(pick)
    return chosen


def shift_placement(
    space: GroundPlaneSpace,
    scene: SceneDescription,
    indices: Sequence[int],
    delta: float,
) -> List[PlacedMarker]:
    """Slide placed markers along their wall by ``delta`` meters.

    Positions are clamped to the candidate's wall segment, so shifted markers
    stay mounted on a wall; orientation and normal are unchanged. Marker ids
    are preserved, keeping observation noise paired with the unshifted run.
    """
    segments = scene.wall_segments()
    out: List[PlacedMarker] = []
    for i in indices:
        cand = space.marker_candidates[int(i)]
        _, a, b = segments[cand.segment_index]
        seg_len = float(np.linalg.norm(b - a))
        t_new = min(max(cand.segment_t + delta, 0.0), seg_len)
        pos = a + (t_new / seg_len) * (b - a)
        pose = marker_pose_from_normal(pos, cand.normal[0:2], space.eye_height)
        out.append(PlacedMarker(marker_id=int(i), pose=pose, normal=cand.normal.copy()))
    return out


@dataclass
class PlacementStrategy:
    """A named placement rule: none, omp (a plan prefix), random or uniform."""

    name: str
    plan_indices: Optional[List[int]] = None

    def resolve(self, space: GroundPlaneSpace, k: int, seed: int) -> List[int]:
        if self.name == "none":
            return []
        if self.name == "omp":
            if self.plan_indices is None:
                raise ValueError("strategy 'omp' needs plan_indices")
            if k > len(self.plan_indices):
                raise ValueError(f"plan has only {len(self.plan_indices)} markers, k={k}")
            return list(self.plan_indices[:k])
        if self.name == "random":
            return random_placement(space, k, seed)
        if self.name == "uniform":
            return uniform_placement(space, k)
        raise ValueError(f"unknown placement strategy: {self.name}")


# ---------------------------------------------------------------------------
# Localization
# ---------------------------------------------------------------------------


class EvalContext:
    """Precomputed arrays shared by all localize() calls on one scene."""

    def __init__(
        self,
        scene: SceneDescription,
        space: GroundPlaneSpace,
        features: Sequence[FeaturePoint],
    ):
        self.scene = scene
        self.space = space
        self.features = list(features)
        self.segments = scene.segment_endpoints()
        self.positions = (
            np.stack([f.position for f in features]) if features else np.zeros((0, 3))
        )
        self.descriptors = (
            np.stack([f.descriptor for f in features]) if features else np.zeros((0, 1))
        )
        self._desc_sq = np.sum(self.descriptors**2, axis=1)
        verts = np.vstack([np.asarray(w) for w in scene.walls])
        self.bounds_lo = verts.min(axis=0)
        self.bounds_hi = verts.max(axis=0)

    def associate(self, observed_desc: np.ndarray) -> np.ndarray:
        """Nearest-descriptor map index for each observed descriptor row."""
        if observed_desc.shape[0] == 0:
            return np.zeros(0, dtype=int)
        d2 = (
            np.sum(observed_desc**2, axis=1)[:, None]
            - 2.0 * observed_desc @ self.descriptors.T
            + self._desc_sq[None, :]
        )
        return np.argmin(d2, axis=1)


def _tangential_bearing_noise(
    bearings: np.ndarray, sigma: float, rng: np.random.Generator
) -> np.ndarray:
    """Perturb unit bearings with 2-dof tangential Gaussian noise."""
    if sigma <= 0.0:
        return bearings
    g = rng.normal(0.0, sigma, size=bearings.shape)
    g -= np.sum(g * bearings, axis=1, keepdims=True) * bearings
    noisy = bearings + g
    return noisy / np.linalg.norm(noisy, axis=1, keepdims=True)


def _resection_2d(
    p1: np.ndarray, p2: np.ndarray, p3: np.ndarray, phi: np.ndarray
) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Vectorized planar three-point resection from camera-frame azimuths.

    Given three known 2D map points per row and the azimuths (bearings in the
    unknown camera frame), each inter-point subtended angle constrains the
    camera to a circular arc through the two points (inscribed angle
    theorem); intersecting two such circles recovers the camera position and
    then any azimuth fixes the yaw.

    Args:
        p1, p2, p3: (T, 2) map point triples.
        phi: (T, 3) camera-frame azimuth of each bearing.

    Returns:
        (xy, yaw, valid): (T, 2) positions, (T,) yaws, (T,) validity mask.
    """

    def wrap(a: np.ndarray) -> np.ndarray:
        return np.remainder(a + math.pi, 2.0 * math.pi) - math.pi

    a12 = wrap(phi[:, 1] - phi[:, 0])
    a23 = wrap(phi[:, 2] - phi[:, 1])
    sin12, sin23 = np.sin(a12), np.sin(a23)
    # Nearly collinear bearings put the camera on an enormous circle whose
    # intersection is numerically meaningless; drop such triples outright.
    valid = (np.abs(sin12) > 1e-3) & (np.abs(sin23) > 1e-3)

    with np.errstate(divide="ignore", invalid="ignore"):
        chord12 = p2 - p1
        chord23 = p3 - p2
        c12 = 0.5 * (p1 + p2) + (0.5 * np.cos(a12) / sin12)[:, None] * np.stack(
            [-chord12[:, 1], chord12[:, 0]], axis=1
        )
        c23 = 0.5 * (p2 + p3) + (0.5 * np.cos(a23) / sin23)[:, None] * np.stack(
            [-chord23[:, 1], chord23[:, 0]], axis=1
        )
        r12_sq = np.sum(chord12**2, axis=1) / (4.0 * sin12**2)
        r23_sq = np.sum(chord23**2, axis=1) / (4.0 * sin23**2)

        dc = c23 - c12
        d = np.sqrt(np.sum(dc**2, axis=1))
        valid &= d > 1e-9
        d_safe = np.where(d > 1e-9, d, 1.0)
        along = (r12_sq - r23_sq + d_safe**2) / (2.0 * d_safe)
        h = np.sqrt(np.maximum(r12_sq - along**2, 0.0))
        u = dc / d_safe[:, None]
        perp = np.stack([-u[:, 1], u[:, 0]], axis=1)
        base = c12 + along[:, None] * u
        cand_a = base + h[:, None] * perp
        cand_b = base - h[:, None] * perp

    # Both circles pass through p2; the camera is the other intersection.
    far_a = np.sum((cand_a - p2) ** 2, axis=1) >= np.sum((cand_b - p2) ** 2, axis=1)
    xy = np.where(far_a[:, None], cand_a, cand_b)
    valid &= np.all(np.isfinite(xy), axis=1)

    to_p1 = p1 - xy
    yaw = np.arctan2(to_p1[:, 1], to_p1[:, 0]) - phi[:, 0]
    return xy, wrap(yaw), valid


def _bearing_rows(
    R: np.ndarray, t: np.ndarray, points: np.ndarray, measured: np.ndarray, sigma: float
) -> Tuple[np.ndarray, np.ndarray]:
    """Stacked whitened bearing residuals and Jacobians for one pose.

    Returns:
        (jac, res): (3N, 6) and (3N,), tangent columns (rotation, translation).
    """
    n = points.shape[0]
    diff = points - t
    u = diff @ R  # camera-frame offsets, row i = R^T diff_i
    d = np.linalg.norm(u, axis=1)
    b = u / d[:, None]
    proj = (np.eye(3)[None, :, :] - b[:, :, None] * b[:, None, :]) / d[:, None, None]
    hat_u = np.zeros((n, 3, 3))
    hat_u[:, 0, 1] = -u[:, 2]
    hat_u[:, 0, 2] = u[:, 1]
    hat_u[:, 1, 0] = u[:, 2]
    hat_u[:, 1, 2] = -u[:, 0]
    hat_u[:, 2, 0] = -u[:, 1]
    hat_u[:, 2, 1] = u[:, 0]
    j_rot = np.einsum("nij,njk->nik", proj, hat_u)
    j_tr = -np.einsum("nij,jk->nik", proj, R.T)
    w = 1.0 / max(sigma, 1e-12)
    jac = np.concatenate([j_rot, j_tr], axis=2).reshape(3 * n, 6) * w
    res = (b - measured).reshape(3 * n) * w
    return jac, res


def _marker_rows(
    R: np.ndarray,
    t: np.ndarray,
    marker_pose: Pose6D,
    measured_rel: Pose6D,
    cfg: LocalizeConfig,
) -> Tuple[np.ndarray, np.ndarray]:
    """Whitened relative-pose residual rows for one marker (6 rows)."""
    cam = Pose6D(R, t)
    res = marker_relative_residual(cam, marker_pose, measured_rel)
    Rm, tm = marker_pose.rotation, marker_pose.translation
    u = R.T @ (tm - t)
    jac = np.zeros((6, 6))
    # Rotation rows by central differences (the log-map Jacobian away from
    # zero residual has no tidy closed form); translation rows analytically.
    h = 1e-7
    for c in range(3):
        dw = np.zeros(3)
        dw[c] = h
        rp = marker_relative_residual(Pose6D(R @ geometry.exp_so3(dw), t), marker_pose, measured_rel)
        rm = marker_relative_residual(Pose6D(R @ geometry.exp_so3(-dw), t), marker_pose, measured_rel)
        jac[0:3, c] = (rp[0:3] - rm[0:3]) / (2.0 * h)
    jac[3:6, 0:3] = geometry.hat(u)
    jac[3:6, 3:6] = -R.T
    w = np.concatenate(
        [
            np.full(3, 1.0 / max(cfg.marker_rel_sigma_rot, 1e-12)),
            np.full(3, 1.0 / max(cfg.marker_rel_sigma_trans, 1e-12)),
        ]
    )
    return w[:, None] * jac, w * res


def _angular_inliers(
    R: np.ndarray, t: np.ndarray, positions: np.ndarray, bearings: np.ndarray, threshold: float
) -> np.ndarray:
    """Correspondences whose predicted bearing is within ``threshold`` radians."""
    if positions.shape[0] == 0:
        return np.zeros(0, dtype=bool)
    u = (positions - t) @ R
    n = np.linalg.norm(u, axis=1, keepdims=True)
    b = u / np.maximum(n, 1e-12)
    return np.sum(b * bearings, axis=1) >= math.cos(threshold)


def _refine_pose(
    init_R: np.ndarray,
    init_t: np.ndarray,
    points: np.ndarray,
    bearings: np.ndarray,
    markers: List[Tuple[Pose6D, np.ndarray, Pose6D]],
    cfg: LocalizeConfig,
) -> Tuple[np.ndarray, np.ndarray]:
    """Damped Gauss-Newton polish of a planar pose hypothesis.

    The residuals are full 3D, but the step is restricted to the planar
    degrees of freedom (yaw, x, y): test poses move on the ground plane at a
    known eye height, and bearings to wall features constrain the out-of-plane
    directions too weakly to estimate them stably.
    """
    planar_cols = np.array([2, 3, 4])  # yaw, x, y of the (rotation, translation) tangent

    def system(R: np.ndarray, t: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        blocks_j: List[np.ndarray] = []
        blocks_r: List[np.ndarray] = []
        if points.shape[0]:
            j, r = _bearing_rows(R, t, points, bearings, cfg.sigma_bearing)
            blocks_j.append(j)
            blocks_r.append(r)
        for marker_pose, b_meas, rel_meas in markers:
            j, r = _bearing_rows(
                R, t, marker_pose.translation[None, :], b_meas[None, :], cfg.sigma_bearing
            )
            blocks_j.append(j)
            blocks_r.append(r)
            j, r = _marker_rows(R, t, marker_pose, rel_meas, cfg)
            blocks_j.append(j)
            blocks_r.append(r)
        if not blocks_j:
            return np.zeros((0, 6)), np.zeros(0)
        return np.vstack(blocks_j), np.concatenate(blocks_r)

    R, t = init_R.copy(), init_t.copy()
    jac, res = system(R, t)
    cost = float(res @ res)
    lam = 1e-6
    for _ in range(cfg.refine_iterations):
        jp = jac[:, planar_cols]
        H = jp.T @ jp
        g = jp.T @ res
        accepted = False
        for _ in range(8):
            try:
                step = np.linalg.solve(H + lam * np.eye(3), -g)
            except np.linalg.LinAlgError:
                lam *= 10.0
                continue
            R_new = R @ geometry.exp_so3(np.array([0.0, 0.0, step[0]]))
            t_new = t + np.array([step[1], step[2], 0.0])
            jac_new, res_new = system(R_new, t_new)
            cost_new = float(res_new @ res_new)
            if cost_new <= cost:
                R, t, jac, res, cost = R_new, t_new, jac_new, res_new, cost_new
                lam = max(lam / 3.0, 1e-12)
                accepted = True
                break
            lam *= 10.0
        if not accepted or float(np.linalg.norm(step)) < 1e-12:
            break
    return R, t


def localize(
    test: TestPose,
    ctx: EvalContext,
    placed: Sequence[PlacedMarker],
    cfg: LocalizeConfig,
    root_seed: int,
    pose_index: int,
) -> LocalizationResult:
    """Localize one test pose against the map under a marker placement.

    Marker observations are generated at each placed marker's physical pose,
    but the estimator only knows the decoded id and anchors at the mapped
    candidate pose for that id (identical unless the placement was shifted).

    Fails (without a pose estimate) when fewer than
    ``cfg.min_correspondences`` observations are available, or when every
    pose hypothesis is degenerate.
    """
    cam = test.pose
    R_true, t_true = cam.rotation, cam.translation

    vis = visible_point_mask(cam, ctx.positions, ctx.scene, ctx.segments)
    pt_idx = np.nonzero(vis)[0]
    visible_markers = [
        pm for pm in placed if marker_visible(cam, pm, ctx.scene, ctx.segments)
    ]
    n_corr = len(pt_idx) + len(visible_markers)
    if n_corr < cfg.min_correspondences:
        return LocalizationResult(
            estimate=None,
            rotation_error=float("inf"),
            translation_error=float("inf"),
            n_correspondences=n_corr,
            n_inliers=0,
            used_marker=bool(visible_markers),
            failed=True,
        )

    # --- observations -----------------------------------------------------
    rng_obs = derive_rng(root_seed, pose_index, _STREAM_OBS)
    pts_world = ctx.positions[pt_idx]
    u = (pts_world - t_true) @ R_true
    b_true = u / np.linalg.norm(u, axis=1, keepdims=True)
    b_obs = _tangential_bearing_noise(b_true, cfg.sigma_bearing, rng_obs)
    desc_obs = ctx.descriptors[pt_idx] + (
        rng_obs.normal(0.0, cfg.sigma_descriptor, size=(len(pt_idx), ctx.descriptors.shape[1]))
        if cfg.sigma_descriptor > 0.0
        else 0.0
    )
    assoc = ctx.associate(np.atleast_2d(desc_obs)) if len(pt_idx) else np.zeros(0, dtype=int)
    assoc_pos = ctx.positions[assoc] if len(pt_idx) else np.zeros((0, 3))

    marker_obs: List[Tuple[Pose6D, np.ndarray, Pose6D]] = []
    for pm in visible_markers:
        rng_m = derive_rng(root_seed, pose_index, _STREAM_MARKER_OBS, pm.marker_id)
        um = R_true.T @ (pm.pose.translation - t_true)
        bm = um / np.linalg.norm(um)
        bm = _tangential_bearing_noise(bm[None, :], cfg.sigma_bearing, rng_m)[0]
        rel = Pose6D(R_true.T @ pm.pose.rotation, um)
        noise_rot = (
            geometry.exp_so3(rng_m.normal(0.0, cfg.marker_rel_sigma_rot, 3))
            if cfg.marker_rel_sigma_rot > 0.0
            else np.eye(3)
        )
        noise_tr = (
            rng_m.normal(0.0, cfg.marker_rel_sigma_trans, 3)
            if cfg.marker_rel_sigma_trans > 0.0
            else np.zeros(3)
        )
        rel_meas = Pose6D(rel.rotation @ noise_rot, rel.translation + noise_tr)
        # The detector reads the marker id; the estimator anchors at the
        # MAPPED candidate pose for that id. When the physical marker was
        # mounted off its planned spot, the mismatch lands in the estimate.
        map_pose = ctx.space.marker_candidates[pm.marker_id].pose
        marker_obs.append((map_pose, bm, rel_meas))

    # --- pose hypotheses ---------------------------------------------------
    hyp_R: List[np.ndarray] = []
    hyp_t: List[np.ndarray] = []
    for marker_pose, _, rel_meas in marker_obs:
        R_hyp = marker_pose.rotation @ rel_meas.rotation.T
        t_hyp = marker_pose.translation - R_hyp @ rel_meas.translation
        hyp_R.append(R_hyp)
        hyp_t.append(t_hyp)

    n_pts = len(pt_idx)
    if n_pts >= 3:
        rng_ransac = derive_rng(root_seed, pose_index, _STREAM_RANSAC)
        triples = rng_ransac.integers(0, n_pts, size=(cfg.ransac_iterations, 3))
        distinct = (
            (triples[:, 0] != triples[:, 1])
            & (triples[:, 0] != triples[:, 2])
            & (triples[:, 1] != triples[:, 2])
        )
        phi = np.arctan2(b_obs[:, 1], b_obs[:, 0])
        xy, yaw, valid = _resection_2d(
            assoc_pos[triples[:, 0], 0:2],
            assoc_pos[triples[:, 1], 0:2],
            assoc_pos[triples[:, 2], 0:2],
            phi[triples],
        )
        valid &= distinct
        # A camera cannot be outside the mapped walls (plus detection range).
        margin = ctx.scene.camera_range
        valid &= np.all(xy >= ctx.bounds_lo[None, :] - margin, axis=1)
        valid &= np.all(xy <= ctx.bounds_hi[None, :] + margin, axis=1)
        for i in np.nonzero(valid)[0]:
            hyp_R.append(geometry.rot_z(float(yaw[i])))
            hyp_t.append(np.array([xy[i, 0], xy[i, 1], ctx.space.eye_height]))

    if not hyp_R:
        return LocalizationResult(
            estimate=None,
            rotation_error=float("inf"),
            translation_error=float("inf"),
            n_correspondences=n_corr,
            n_inliers=0,
            used_marker=bool(visible_markers),
            failed=True,
        )

    # --- hypothesis scoring -------------------------------------------------
    all_pos = np.vstack([assoc_pos] + [m[0].translation[None, :] for m in marker_obs]) \
        if marker_obs else assoc_pos
    all_bear = np.vstack([b_obs] + [m[1][None, :] for m in marker_obs]) if marker_obs else b_obs
    R_stack = np.stack(hyp_R)
    t_stack = np.stack(hyp_t)
    diff = all_pos[None, :, :] - t_stack[:, None, :]
    u_h = np.einsum("hji,hnj->hni", R_stack, diff)
    norms = np.linalg.norm(u_h, axis=2, keepdims=True)
    u_h = u_h / np.maximum(norms, 1e-12)
    cos_ang = np.sum(u_h * all_bear[None, :, :], axis=2)
    inlier_mat = cos_ang >= math.cos(cfg.ransac_threshold)
    counts = inlier_mat.sum(axis=1)
    best = int(np.argmax(counts))  # first maximum: markers first, then trial order

    point_inliers = inlier_mat[best, :n_pts]
    # Project the winning hypothesis onto the motion plane (marker-derived
    # hypotheses carry small out-of-plane noise components).
    yaw0 = math.atan2(hyp_R[best][1, 0], hyp_R[best][0, 0])
    best_R = geometry.rot_z(yaw0)
    best_t = np.array([hyp_t[best][0], hyp_t[best][1], ctx.space.eye_height])

    # --- refinement ----------------------------------------------------------
    R_est, t_est = _refine_pose(
        best_R,
        best_t,
        assoc_pos[point_inliers],
        b_obs[point_inliers],
        marker_obs,
        cfg,
    )
    # The winning hypothesis's inlier set is conditioned on its own noise;
    # re-select against the refined pose and polish again until stable.
    for _ in range(2):
        refreshed = _angular_inliers(R_est, t_est, assoc_pos, b_obs, cfg.ransac_threshold)
        if np.array_equal(refreshed, point_inliers):
            break
        point_inliers = refreshed
        R_est, t_est = _refine_pose(
            R_est, t_est, assoc_pos[point_inliers], b_obs[point_inliers], marker_obs, cfg
        )
    inside = np.all(t_est[0:2] >= ctx.bounds_lo - 1.0) and np.all(
        t_est[0:2] <= ctx.bounds_hi + 1.0
    )
    if not (np.all(np.isfinite(R_est)) and np.all(np.isfinite(t_est)) and inside):
        # An estimate outside the mapped area (any consumer would reject it)
        # or a numerically broken one counts as a failed localization.
        return LocalizationResult(
            estimate=None,
            rotation_error=float("inf"),
            translation_error=float("inf"),
            n_correspondences=n_corr,
            n_inliers=int(counts[best]),
            used_marker=bool(visible_markers),
            failed=True,
        )
    return LocalizationResult(
        estimate=Pose6D(R_est, t_est),
        rotation_error=rotation_error(R_est, R_true),
        translation_error=translation_error(t_est, t_true),
        n_correspondences=n_corr,
        n_inliers=int(point_inliers.sum()) + len(marker_obs),
        used_marker=bool(visible_markers),
        failed=False,
    )


# ---------------------------------------------------------------------------
# Experiments
# ---------------------------------------------------------------------------


def run_localizations(
    ctx: EvalContext,
    test_poses: Sequence[TestPose],
    placed: Sequence[PlacedMarker],
    cfg: LocalizeConfig,
    root_seed: int,
    jobs: int = 1,
) -> List[LocalizationResult]:
    """Localize every test pose; deterministic for any ``jobs`` value."""
    n = len(test_poses)
    results: List[Optional[LocalizationResult]] = [None] * n
    if jobs <= 1:
        for i, tp in enumerate(test_poses):
            results[i] = localize(tp, ctx, placed, cfg, root_seed, i)
    else:
        def work(i: int) -> LocalizationResult:
            return localize(test_poses[i], ctx, placed, cfg, root_seed, i)

        with ThreadPoolExecutor(max_workers=jobs) as pool:
            for i, res in enumerate(pool.map(work, range(n))):
                results[i] = res
    return results  # type: ignore[return-value]


def summarize_results(results: Sequence[LocalizationResult], cfg: LocalizeConfig) -> Dict[str, float]:
    succ = [r for r in results if not r.failed]
    return {
        "recall": recall(results, cfg.trans_threshold, cfg.rot_threshold),
        "mean_trans_error": float(np.mean([r.translation_error for r in succ])) if succ else float("nan"),
        "mean_rot_error": float(np.mean([r.rotation_error for r in succ])) if succ else float("nan"),
        "n_failed": float(len(results) - len(succ)),
    }


def run_experiment(
    scene: SceneDescription,
    space: GroundPlaneSpace,
    features: Sequence[FeaturePoint],
    strategies: Sequence[PlacementStrategy],
    ks: Sequence[int],
    test_poses: Sequence[TestPose],
    seeds: Sequence[int],
    cfg: LocalizeConfig,
    root_seed: int,
    jobs: int = 1,
) -> List[Dict[str, object]]:
    """Evaluate every (strategy, k, seed) cell on a shared test-pose set.

    All cells reuse the same test poses and the same per-pose observation
    noise (streams keyed by pose index and seed), so comparisons are paired.
    The seed varies the placement for the random strategy and the
    observation-noise realization for all strategies. Cells that resolve to
    the same placement (e.g. 'none' at every k) are localized once and their
    summaries reused.
    """
    ctx = EvalContext(scene, space, features)
    rows: List[Dict[str, object]] = []
    memo: Dict[Tuple[Tuple[int, ...], int], Dict[str, float]] = {}
    for strategy in strategies:
        for k in ks:
            for seed in seeds:
                indices = tuple(strategy.resolve(space, int(k), int(seed)))
                key = (indices, int(seed))
                if key not in memo:
                    placed = placement_from_candidates(space, indices)
                    results = run_localizations(
                        ctx, test_poses, placed, cfg, derive_rng_key(root_seed, seed), jobs=jobs
                    )
                    memo[key] = summarize_results(results, cfg)
                row: Dict[str, object] = {
                    "scene": scene.name,
                    "strategy": strategy.name,
                    "seed": int(seed),
                    "k": int(k),
                    "n_test": len(test_poses),
                }
                row.update(memo[key])
                row["n_failed"] = int(row["n_failed"])
                rows.append(row)
    return rows


def derive_rng_key(root_seed: int, seed: int) -> int:
    """Stable scalar combining the experiment root seed and a run seed."""
    return (int(root_seed) << 20) ^ (int(seed) & 0xFFFFF)


def score_error_correlation(
    scores: np.ndarray,
    test_poses: Sequence[TestPose],
    results: Sequence[LocalizationResult],
    trans_cap: Optional[float] = None,
    rot_cap: Optional[float] = None,
) -> Tuple[float, float]:
    """Pearson correlation between parent-pose scores and log combined error.

    The combined error is sqrt(rotation_error^2 + translation_error^2);
    failures are skipped, and optional caps admit only moderate errors.

    Returns:
        (r, p_value) from a two-sided Pearson test.
    """
    from scipy import stats

    xs: List[float] = []
    ys: List[float] = []
    for tp, res in zip(test_poses, results):
        if res.failed:
            continue
        if trans_cap is not None and res.translation_error > trans_cap:
            continue
        if rot_cap is not None and res.rotation_error > rot_cap:
            continue
        err = math.sqrt(res.rotation_error**2 + res.translation_error**2)
        xs.append(float(scores[tp.parent_index]))
        ys.append(math.log(max(err, 1e-12)))
    if len(xs) < 3:
        raise ValueError("not enough successful localizations for a correlation")
    r, p = stats.pearsonr(xs, ys)
    return float(r), float(p)
