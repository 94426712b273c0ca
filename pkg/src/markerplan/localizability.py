"""Gaussian localizability scoring of camera poses.

Each camera pose is scored by the differential entropy of its 6-dof pose
belief under a Laplace approximation linearized at ground truth. The belief
comes from a small factor graph: a weak camera prior, one position prior and
one unit-bearing factor per visible feature point, and a pose prior plus a
relative-pose factor per visible placed marker. The camera marginal is
obtained by eliminating every landmark block with a Schur complement (the
landmark blocks are mutually independent, so elimination is per-landmark).

The localizability score is the negated entropy, so larger is better. Poses
that see fewer than MIN_POINTS feature points and no marker are reported with
a large negative sentinel score instead of a Gaussian one.

Tangent-space convention: 6-vectors are ordered (rotation-vector,
translation); rotations perturb on the right, translations additively in the
world frame.
"""

from __future__ import annotations

import math
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from . import geometry
from .features import FeaturePoint, SimilarityConfig, point_covariance
from .scene import GroundPlaneSpace, Pose6D
from .visibility import VisibilityIndex

# Differential entropy of a 6D unit-covariance Gaussian minus the log-det term.
ENTROPY_CONST_6D = 3.0 * (1.0 + math.log(2.0 * math.pi))

# Score reported for poses whose graph would be unconstrained (no landmarks).
SENTINEL_SCORE = -1.0e6

# Minimum visible points for a marker-free pose to count as constrained.
MIN_POINTS = 2


class UnconstrainedPoseError(ValueError):
    """Raised when a pose sees too few landmarks to build a useful graph."""


class RankDeficientError(np.linalg.LinAlgError):
    """Raised when an information matrix is singular.

    Attributes:
        n_null: number of (numerically) zero eigenvalue directions.
    """

    def __init__(self, message: str, n_null: int):
        super().__init__(message)
        self.n_null = n_null


@dataclass
class NoiseConfig:
    """Noise model of the scoring factor graph (standard deviations)."""

    sigma_bearing: float = math.radians(1.0)
    camera_prior_sigma_rot: float = 2.0 * math.pi
    camera_prior_sigma_trans: float = 10.0
    marker_prior_sigma_rot: float = 1.0e-2
    marker_prior_sigma_trans: float = 1.0e-2
    marker_rel_sigma_rot: float = math.radians(1.0)
    marker_rel_sigma_trans: float = 1.0e-2

    def camera_prior_information(self) -> np.ndarray:
        d = np.concatenate(
            [
                np.full(3, 1.0 / self.camera_prior_sigma_rot**2),
                np.full(3, 1.0 / self.camera_prior_sigma_trans**2),
            ]
        )
        return np.diag(d)

    def marker_prior_information(self) -> np.ndarray:
        d = np.concatenate(
            [
                np.full(3, 1.0 / self.marker_prior_sigma_rot**2),
                np.full(3, 1.0 / self.marker_prior_sigma_trans**2),
            ]
        )
        return np.diag(d)


@dataclass
class PointObservation:
    """A feature point in the graph: anchor position and prior covariance."""

    position: np.ndarray
    covariance: np.ndarray


@dataclass
class MarkerObservation:
    """A placed marker in the graph, anchored at its mounted pose."""

    pose: Pose6D


@dataclass
class GaussianFactorGraph:
    """Factor graph of one camera pose with independent landmark blocks."""

    camera: Pose6D
    points: List[PointObservation] = field(default_factory=list)
    markers: List[MarkerObservation] = field(default_factory=list)
    noise: NoiseConfig = field(default_factory=NoiseConfig)

    @property
    def dim(self) -> int:
        return 6 + 3 * len(self.points) + 6 * len(self.markers)

    def full_information(self) -> np.ndarray:
        """Dense joint information matrix over [camera, points..., markers...]."""
        n = self.dim
        info = np.zeros((n, n))
        info[0:6, 0:6] += self.noise.camera_prior_information()
        off = 6
        for obs in self.points:
            a_cam, a_pt = bearing_factor_blocks(self.camera, obs.position, self.noise.sigma_bearing)
            sl = slice(off, off + 3)
            info[0:6, 0:6] += a_cam.T @ a_cam
            info[0:6, sl] += a_cam.T @ a_pt
            info[sl, 0:6] += a_pt.T @ a_cam
            info[sl, sl] += a_pt.T @ a_pt + np.linalg.inv(obs.covariance)
            off += 3
        for obs in self.markers:
            a_cam, a_mk = marker_factor_blocks(self.camera, obs.pose, self.noise)
            sl = slice(off, off + 6)
            info[0:6, 0:6] += a_cam.T @ a_cam
            info[0:6, sl] += a_cam.T @ a_mk
            info[sl, 0:6] += a_mk.T @ a_cam
            info[sl, sl] += a_mk.T @ a_mk + self.noise.marker_prior_information()
            off += 6
        return info


# ---------------------------------------------------------------------------
# Factor linearizations
# ---------------------------------------------------------------------------


def bearing_residual(camera: Pose6D, point: np.ndarray, measured: np.ndarray) -> np.ndarray:
    """Unit-bearing residual (predicted - measured) in the camera frame.

    The residual is the chordal difference of unit vectors; its gradient lives
    in the 2D tangent plane of the sphere, so the factor carries 2 effective
    degrees of freedom even though it is embedded in 3 coordinates.
    """
    u = camera.rotation.T @ (np.asarray(point, dtype=float) - camera.translation)
    return u / np.linalg.norm(u) - np.asarray(measured, dtype=float)


def bearing_factor_blocks(
    camera: Pose6D, point: np.ndarray, sigma_bearing: float
) -> Tuple[np.ndarray, np.ndarray]:
    """Whitened bearing-factor Jacobians w.r.t. camera tangent and point.

    Returns:
        (A_cam, A_pt): (3, 6) and (3, 3) whitened Jacobian blocks of the
        unit-bearing residual, linearized at ground truth.
    """
    R = camera.rotation
    u = R.T @ (np.asarray(point, dtype=float) - camera.translation)
    d = float(np.linalg.norm(u))
    if d < 1e-9:
        raise ValueError("feature point coincides with the camera center")
    b = u / d
    proj = (np.eye(3) - np.outer(b, b)) / d
    j_cam = np.hstack([proj @ geometry.hat(u), -(proj @ R.T)])
    j_pt = proj @ R.T
    w = 1.0 / sigma_bearing
    return w * j_cam, w * j_pt


def marker_factor_blocks(
    camera: Pose6D, marker: Pose6D, noise: NoiseConfig
) -> Tuple[np.ndarray, np.ndarray]:
    """Whitened relative-pose factor Jacobians w.r.t. camera and marker.

    The residual stacks a rotation log residual over the measured relative
    rotation and the marker position expressed in the camera frame, each 3
    rows, linearized at ground truth.

    Returns:
        (A_cam, A_mk): both (6, 6), row order (rotation, translation), column
        order (rotation-vector, translation).
    """
    Rc, tc = camera.rotation, camera.translation
    Rm, tm = marker.rotation, marker.translation
    u = Rc.T @ (tm - tc)
    a_cam = np.zeros((6, 6))
    a_mk = np.zeros((6, 6))
    a_cam[0:3, 0:3] = -(Rm.T @ Rc)
    a_cam[3:6, 0:3] = geometry.hat(u)
    a_cam[3:6, 3:6] = -Rc.T
    a_mk[0:3, 0:3] = np.eye(3)
    a_mk[3:6, 3:6] = Rc.T
    w = np.concatenate(
        [np.full(3, 1.0 / noise.marker_rel_sigma_rot), np.full(3, 1.0 / noise.marker_rel_sigma_trans)]
    )
    return w[:, None] * a_cam, w[:, None] * a_mk


def marker_relative_residual(camera: Pose6D, marker: Pose6D, measured: Pose6D) -> np.ndarray:
    """Unwhitened 6-vector residual of the camera-marker relative pose factor."""
    rel_rot = camera.rotation.T @ marker.rotation
    r_rot = geometry.log_so3(measured.rotation.T @ rel_rot)
    r_trans = camera.rotation.T @ (marker.translation - camera.translation) - measured.translation
    return np.concatenate([r_rot, r_trans])


# ---------------------------------------------------------------------------
# Graph construction and marginals
# ---------------------------------------------------------------------------


def build_graph(
    camera_idx: int,
    space: GroundPlaneSpace,
    features: Sequence[FeaturePoint],
    vis_index: VisibilityIndex,
    include_markers: Iterable[int] = (),
    noise: Optional[NoiseConfig] = None,
    similarity: Optional[SimilarityConfig] = None,
) -> GaussianFactorGraph:
    """Build the scoring graph of one discretized camera pose.

    Only markers in ``include_markers`` that are actually visible from the
    pose contribute. Point prior covariances scale with each feature's
    similar-point count.

    Raises:
        UnconstrainedPoseError: fewer than MIN_POINTS visible points and no
            visible marker.
    """
    noise = noise or NoiseConfig()
    similarity = similarity or SimilarityConfig()
    pts = vis_index.points_seen[camera_idx]
    seen = set(int(m) for m in vis_index.markers_seen[camera_idx])
    mks = sorted(set(int(m) for m in include_markers) & seen)
    if len(pts) < MIN_POINTS and not mks:
        raise UnconstrainedPoseError(
            f"camera {camera_idx} sees {len(pts)} points and no marker; "
            f"need at least {MIN_POINTS} points or one marker"
        )
    points = [
        PointObservation(
            position=features[int(i)].position,
            covariance=point_covariance(features[int(i)].similar_count, similarity),
        )
        for i in pts
    ]
    markers = [MarkerObservation(pose=space.marker_candidates[m].pose) for m in mks]
    return GaussianFactorGraph(
        camera=space.camera_poses[camera_idx], points=points, markers=markers, noise=noise
    )


def _spd_inverse(matrix: np.ndarray, what: str) -> np.ndarray:
    """Invert an SPD matrix via Cholesky, raising RankDeficientError if singular."""
    try:
        L = np.linalg.cholesky(matrix)
    except np.linalg.LinAlgError:
        eigs = np.linalg.eigvalsh(matrix)
        tol = max(1e-12, 1e-12 * float(np.abs(eigs).max()))
        n_null = int(np.count_nonzero(eigs < tol))
        raise RankDeficientError(
            f"{what} is rank deficient ({n_null} null direction(s))", n_null=n_null
        ) from None
    identity = np.eye(matrix.shape[0])
    z = np.linalg.solve(L, identity)
    return z.T @ z


def camera_information(graph: GaussianFactorGraph) -> np.ndarray:
    """6x6 camera information after eliminating all landmark blocks."""
    noise = graph.noise
    lam = noise.camera_prior_information().copy()
    for obs in graph.points:
        a_cam, a_pt = bearing_factor_blocks(graph.camera, obs.position, noise.sigma_bearing)
        lam += a_cam.T @ a_cam
        w = a_cam.T @ a_pt
        s = np.linalg.inv(obs.covariance) + a_pt.T @ a_pt
        lam -= w @ np.linalg.solve(s, w.T)
    mk_prior = noise.marker_prior_information()
    for obs in graph.markers:
        a_cam, a_mk = marker_factor_blocks(graph.camera, obs.pose, noise)
        lam += a_cam.T @ a_cam
        w = a_cam.T @ a_mk
        s = mk_prior + a_mk.T @ a_mk
        lam -= w @ np.linalg.solve(s, w.T)
    return lam


def camera_marginal(graph: GaussianFactorGraph) -> np.ndarray:
    """Marginal covariance of the camera pose (Schur-complement elimination).

    Raises:
        RankDeficientError: if the reduced information matrix is singular;
            the error carries the number of null directions.
    """
    lam = camera_information(graph)
    return _spd_inverse(lam, "camera information matrix")


def entropy(cov: np.ndarray) -> float:
    """Differential entropy (nats) of a Gaussian with covariance ``cov``.

    Raises:
        ValueError: when the matrix is not symmetric positive definite.
    """
    cov = np.asarray(cov, dtype=float)
    if cov.ndim != 2 or cov.shape[0] != cov.shape[1]:
        raise ValueError("covariance must be square")
    if float(np.abs(cov - cov.T).max()) > 1e-9:
        raise ValueError("covariance must be symmetric")
    try:
        L = np.linalg.cholesky(cov)
    except np.linalg.LinAlgError:
        raise ValueError("covariance must be positive definite") from None
    d = cov.shape[0]
    log_det = 2.0 * float(np.sum(np.log(np.diag(L))))
    return 0.5 * log_det + 0.5 * d * (1.0 + math.log(2.0 * math.pi))


def localizability_score(
    camera_idx: int,
    space: GroundPlaneSpace,
    features: Sequence[FeaturePoint],
    vis_index: VisibilityIndex,
    include_markers: Iterable[int] = (),
    noise: Optional[NoiseConfig] = None,
    similarity: Optional[SimilarityConfig] = None,
) -> float:
    """Negated pose-belief entropy; SENTINEL_SCORE for unconstrained poses."""
    try:
        graph = build_graph(
            camera_idx, space, features, vis_index, include_markers, noise, similarity
        )
    except UnconstrainedPoseError:
        return SENTINEL_SCORE
    return -entropy(camera_marginal(graph))


def info_gain(
    camera_idx: int,
    marker_idx: int,
    space: GroundPlaneSpace,
    features: Sequence[FeaturePoint],
    vis_index: VisibilityIndex,
    placed: Iterable[int] = (),
    noise: Optional[NoiseConfig] = None,
    similarity: Optional[SimilarityConfig] = None,
) -> float:
    """Entropy reduction at one camera from adding one marker.

    Exactly 0.0 when the marker is not visible from the camera (the graph is
    unchanged). With a sentinel-scored camera the gain is the full jump from
    the sentinel to the Gaussian score.
    """
    placed = sorted(set(int(m) for m in placed))
    if marker_idx in placed:
        raise ValueError("marker is already placed")
    if int(marker_idx) not in set(int(m) for m in vis_index.markers_seen[camera_idx]):
        return 0.0
    before = localizability_score(
        camera_idx, space, features, vis_index, placed, noise, similarity
    )
    after = localizability_score(
        camera_idx, space, features, vis_index, placed + [int(marker_idx)], noise, similarity
    )
    return after - before


# ---------------------------------------------------------------------------
# Batch evaluator
# ---------------------------------------------------------------------------


class ScoreEvaluator:
    """Caching batch scorer used by the planner and the evaluation pipeline.

    The camera block of the information matrix splits into a marker-free base
    (prior + eliminated point blocks) plus one additive 6x6 contribution per
    visible marker; both depend only on static geometry, so they are computed
    once and reused. Scores are assembled in ascending marker-index order,
    which keeps repeated evaluations of the same (camera, placed-set) pair
    bit-identical regardless of call history.
    """

    def __init__(
        self,
        space: GroundPlaneSpace,
        features: Sequence[FeaturePoint],
        vis_index: VisibilityIndex,
        noise: Optional[NoiseConfig] = None,
        similarity: Optional[SimilarityConfig] = None,
    ):
        self.space = space
        self.features = list(features)
        self.vis_index = vis_index
        self.noise = noise or NoiseConfig()
        self.similarity = similarity or SimilarityConfig()
        self._base: Dict[int, np.ndarray] = {}
        self._marker_info: Dict[Tuple[int, int], np.ndarray] = {}
        self._marker_sets: List[frozenset] = [
            frozenset(int(m) for m in ms) for ms in vis_index.markers_seen
        ]
        self._count = 0
        self._lock = threading.Lock()

    @property
    def eval_count(self) -> int:
        """Number of camera-score evaluations performed so far."""
        return self._count

    def base_information(self, camera_idx: int) -> np.ndarray:
        cached = self._base.get(camera_idx)
        if cached is None:
            noise = self.noise
            lam = noise.camera_prior_information().copy()
            camera = self.space.camera_poses[camera_idx]
            for i in self.vis_index.points_seen[camera_idx]:
                f = self.features[int(i)]
                a_cam, a_pt = bearing_factor_blocks(camera, f.position, noise.sigma_bearing)
                w = a_cam.T @ a_pt
                s = np.linalg.inv(point_covariance(f.similar_count, self.similarity)) + a_pt.T @ a_pt
                lam += a_cam.T @ a_cam - w @ np.linalg.solve(s, w.T)
            cached = lam
            self._base[camera_idx] = cached
        return cached

    def marker_information(self, camera_idx: int, marker_idx: int) -> np.ndarray:
        key = (camera_idx, marker_idx)
        cached = self._marker_info.get(key)
        if cached is None:
            camera = self.space.camera_poses[camera_idx]
            marker = self.space.marker_candidates[marker_idx].pose
            a_cam, a_mk = marker_factor_blocks(camera, marker, self.noise)
            w = a_cam.T @ a_mk
            s = self.noise.marker_prior_information() + a_mk.T @ a_mk
            cached = a_cam.T @ a_cam - w @ np.linalg.solve(s, w.T)
            self._marker_info[key] = cached
        return cached

    def score(self, camera_idx: int, placed: Iterable[int] = ()) -> float:
        """Localizability score of one camera given a placed marker set."""
        with self._lock:
            self._count += 1
        visible = sorted(self._marker_sets[camera_idx].intersection(int(m) for m in placed))
        if len(self.vis_index.points_seen[camera_idx]) < MIN_POINTS and not visible:
            return SENTINEL_SCORE
        lam = self.base_information(camera_idx)
        if visible:
            lam = lam.copy()
            for m in visible:
                lam += self.marker_information(camera_idx, m)
        sign, log_det = np.linalg.slogdet(lam)
        if sign <= 0:
            eigs = np.linalg.eigvalsh(lam)
            n_null = int(np.count_nonzero(eigs < 1e-12))
            raise RankDeficientError("camera information matrix is singular", n_null=n_null)
        return 0.5 * log_det - ENTROPY_CONST_6D

    def scores_all(self, placed: Iterable[int] = (), jobs: int = 1) -> np.ndarray:
        """Scores of every camera pose under one placed marker set."""
        placed = list(placed)
        n = self.vis_index.n_cameras
        out = np.zeros(n)
        if jobs <= 1:
            for c in range(n):
                out[c] = self.score(c, placed)
            return out
        chunks = np.array_split(np.arange(n), jobs * 4)

        def work(chunk: np.ndarray) -> List[float]:
            return [self.score(int(c), placed) for c in chunk]

        with ThreadPoolExecutor(max_workers=jobs) as pool:
            for chunk, values in zip(chunks, pool.map(work, chunks)):
                out[chunk] = values
        return out
