"""Greedy marker placement driven by percentile-aggregated information gain.

Each round scores every remaining wall candidate by the entropy reduction it
brings to the camera poses that can see it, aggregates the per-camera gains
(zeros at unaffected poses included) with an empirical-CDF percentile, and
places the strict-best candidate. The percentile level adapts to the scene:
it is chosen from the distribution of candidate visibility percentages so
that, for a target coverage level v, a candidate covering a typical fraction
of poses is judged on the gains it actually delivers rather than on the sea
of zeros.

Two caching layers keep planning fast without changing its output:

* a score cache holding the current score of every camera pose, updated only
  at poses that see a newly placed marker;
* per-candidate gain records, re-evaluated only when a previously placed
  marker overlaps the candidate's affected camera set (otherwise neither term
  of its gains has changed, so the record is still exact).
"""

from __future__ import annotations

import hashlib
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from .features import FeaturePoint, SimilarityConfig
from .localizability import NoiseConfig, ScoreEvaluator
from .scene import GroundPlaneSpace, Pose6D
from .visibility import VisibilityIndex

DEFAULT_COVERAGE_LEVEL = 90.0


class StaleCacheError(RuntimeError):
    """Raised when a score cache does not correspond to the stated placements."""


def percentile(values: Sequence[float], q: float) -> float:
    """Empirical-CDF percentile: smallest value whose CDF reaches q/100.

    ``q = 0`` returns the minimum and ``q = 100`` the maximum. The input does
    not need to be pre-sorted.

    Raises:
        ValueError: on an empty input or q outside [0, 100].
    """
    arr = np.sort(np.asarray(values, dtype=float))
    n = arr.size
    if n == 0:
        raise ValueError("percentile of an empty value set")
    if not 0.0 <= q <= 100.0:
        raise ValueError("percentile level must lie in [0, 100]")
    if q <= 0.0:
        return float(arr[0])
    alpha = q / 100.0
    ranks = np.arange(1, n + 1) / n
    k = int(np.searchsorted(ranks, alpha, side="left"))
    if k >= n:
        k = n - 1
    return float(arr[k])


@dataclass
class VisibilityStats:
    """Visibility coverage of a candidate set, in percent of camera poses."""

    candidate_ids: np.ndarray
    percentages: np.ndarray


def visibility_stats(
    vis_index: VisibilityIndex, candidate_ids: Sequence[int]
) -> VisibilityStats:
    ids = np.asarray(sorted(int(m) for m in candidate_ids), dtype=int)
    n_cam = vis_index.n_cameras
    pct = np.array(
        [100.0 * len(vis_index.affected_cameras[m]) / n_cam for m in ids], dtype=float
    )
    return VisibilityStats(candidate_ids=ids, percentages=pct)


def adaptive_q(stats: VisibilityStats, v: float) -> float:
    """Percentile level derived from candidate visibility coverage.

    For coverage level ``v`` (percent of poses a placement should serve), the
    rule takes the (100 - v)-th empirical percentile of the candidate
    visibility percentages and mirrors it: q = 100 - that percentile, clamped
    to [0, 100]. ``v = 100`` maps to q = 100 regardless of the data, because
    the empirical CDF is already at or above 0 everywhere.
    """
    if not 0.0 <= v <= 100.0:
        raise ValueError("coverage level v must lie in [0, 100]")
    if stats.percentages.size == 0:
        raise ValueError("adaptive_q needs at least one candidate")
    threshold = 100.0 - v
    if threshold <= 0.0:
        p_star = 0.0
    else:
        p_star = percentile(stats.percentages, threshold)
    return min(100.0, max(0.0, 100.0 - p_star))


@dataclass
class GainDistribution:
    """Per-camera information gains of one candidate (zeros where unaffected)."""

    gains: np.ndarray
    _sorted: Optional[np.ndarray] = field(default=None, repr=False, compare=False)

    def sorted_gains(self) -> np.ndarray:
        if self._sorted is None:
            self._sorted = np.sort(self.gains)
        return self._sorted

    def percentile(self, q: float) -> float:
        return percentile(self.sorted_gains(), q)


@dataclass
class ScoreCache:
    """Current per-camera scores together with the placements they reflect."""

    scores: np.ndarray
    placed: Tuple[int, ...]
    placed_hash: str = ""

    def __post_init__(self) -> None:
        if not self.placed_hash:
            self.placed_hash = placed_set_hash(self.placed)

    def verify(self, placed: Sequence[int]) -> None:
        expected = tuple(int(m) for m in placed)
        if self.placed != expected or self.placed_hash != placed_set_hash(self.placed):
            raise StaleCacheError(
                f"score cache built for placements {self.placed} does not match {expected}"
            )


def placed_set_hash(placed: Sequence[int]) -> str:
    return hashlib.sha256(",".join(str(int(m)) for m in placed).encode()).hexdigest()


def init_score_cache(
    evaluator: ScoreEvaluator, placed: Sequence[int] = (), jobs: int = 1
) -> ScoreCache:
    """Score every camera pose under ``placed`` and wrap it in a cache."""
    placed = tuple(int(m) for m in placed)
    return ScoreCache(scores=evaluator.scores_all(placed, jobs=jobs), placed=placed)


def incremental_rescore(
    evaluator: ScoreEvaluator,
    cache: ScoreCache,
    newly_placed: int,
    placed_before: Optional[Sequence[int]] = None,
) -> ScoreCache:
    """Update a score cache after one more marker is placed.

    Only cameras that see ``newly_placed`` are re-evaluated; all other scores
    are carried over unchanged. The cache must match ``placed_before`` (its
    recorded placement tuple and hash are checked), otherwise a
    :class:`StaleCacheError` is raised.
    """
    if placed_before is None:
        placed_before = cache.placed
    cache.verify(placed_before)
    newly_placed = int(newly_placed)
    if newly_placed in cache.placed:
        raise ValueError(f"marker {newly_placed} is already placed")
    new_placed = cache.placed + (newly_placed,)
    scores = cache.scores.copy()
    for c in evaluator.vis_index.affected_cameras[newly_placed]:
        scores[int(c)] = evaluator.score(int(c), new_placed)
    return ScoreCache(scores=scores, placed=new_placed)


def marker_gain(
    evaluator: ScoreEvaluator,
    marker_idx: int,
    q: float,
    cache: Optional[ScoreCache] = None,
    placed: Sequence[int] = (),
) -> float:
    """Percentile-aggregated gain of one candidate against current scores."""
    record = _evaluate_candidate(evaluator, int(marker_idx), cache, placed)
    return record.distribution.percentile(q)


@dataclass
class _CandidateRecord:
    """Evaluation record of one candidate against a specific placed set."""

    distribution: GainDistribution
    affected: np.ndarray
    scores_with: np.ndarray


def _evaluate_candidate(
    evaluator: ScoreEvaluator,
    marker_idx: int,
    cache: Optional[ScoreCache],
    placed: Sequence[int] = (),
) -> _CandidateRecord:
    if cache is None:
        cache = init_score_cache(evaluator, placed)
    placed_with = cache.placed + (marker_idx,)
    affected = evaluator.vis_index.affected_cameras[marker_idx]
    scores_with = np.array(
        [evaluator.score(int(c), placed_with) for c in affected], dtype=float
    )
    gains = np.zeros(evaluator.vis_index.n_cameras)
    if len(affected):
        gains[affected] = scores_with - cache.scores[affected]
    return _CandidateRecord(
        distribution=GainDistribution(gains=gains), affected=affected, scores_with=scores_with
    )


@dataclass
class PlanStep:
    """One greedy placement round."""

    marker_index: int
    pose: Pose6D
    gain: float
    q: float
    scores_before: Dict[str, float]
    gains: Optional[np.ndarray] = field(default=None, repr=False, compare=False)


@dataclass
class PlacementPlan:
    """Ordered marker placements with per-round diagnostics."""

    steps: List[PlanStep]
    k: int
    v: float
    n_cameras: int
    n_candidates: int

    @property
    def marker_indices(self) -> List[int]:
        return [s.marker_index for s in self.steps]


def _score_summary(scores: np.ndarray) -> Dict[str, float]:
    return {
        "min": float(scores.min()),
        "mean": float(scores.mean()),
        "max": float(scores.max()),
    }


def plan(
    space: GroundPlaneSpace,
    features: Sequence[FeaturePoint],
    vis_index: VisibilityIndex,
    k: int,
    v: float = DEFAULT_COVERAGE_LEVEL,
    noise: Optional[NoiseConfig] = None,
    similarity: Optional[SimilarityConfig] = None,
    evaluator: Optional[ScoreEvaluator] = None,
    jobs: int = 1,
    keep_gain_fields: bool = False,
) -> PlacementPlan:
    """Greedily place ``k`` markers maximizing percentile-aggregated gain.

    Candidates already in ``space.placed_markers`` are treated as placed and
    excluded from selection. Ties are broken toward the lower candidate index
    (strict improvement is required to displace the incumbent). When every
    candidate's aggregated gain is zero in a round, the first remaining
    candidate is placed and a warning is emitted.

    Args:
        space: discretized scene.
        features: feature list with similar counts filled in.
        vis_index: visibility index of ``space``.
        k: number of markers to place.
        v: coverage level steering the adaptive percentile.
        noise, similarity: scoring model configuration.
        evaluator: optional pre-built evaluator (reused across calls).
        jobs: worker threads for candidate evaluation.
        keep_gain_fields: attach each round's winning gain vector to its step
            (used for gain heatmap export).

    Returns:
        A :class:`PlacementPlan`; ``space.placed_markers`` is not modified.
    """
    if evaluator is None:
        evaluator = ScoreEvaluator(space, features, vis_index, noise, similarity)
    n_candidates = len(space.marker_candidates)
    placed: List[int] = [int(m) for m in space.placed_markers]
    remaining = [m for m in range(n_candidates) if m not in set(placed)]
    if k < 0:
        raise ValueError("k must be non-negative")
    if k > len(remaining):
        raise ValueError(f"k={k} exceeds the {len(remaining)} available candidates")

    cache = init_score_cache(evaluator, placed, jobs=jobs)
    affected_sets = [set(int(c) for c in a) for a in vis_index.affected_cameras]
    records: Dict[int, _CandidateRecord] = {}
    steps: List[PlanStep] = []

    for _ in range(k):
        stats = visibility_stats(vis_index, remaining)
        q = adaptive_q(stats, v)

        dirty = [m for m in remaining if m not in records]
        if jobs > 1 and len(dirty) > 1:
            with ThreadPoolExecutor(max_workers=jobs) as pool:
                fresh = list(
                    pool.map(lambda m: _evaluate_candidate(evaluator, m, cache), dirty)
                )
            for m, rec in zip(dirty, fresh):
                records[m] = rec
        else:
            for m in dirty:
                records[m] = _evaluate_candidate(evaluator, m, cache)

        best_m = -1
        best_gain = float("-inf")
        for m in remaining:  # ascending index: first strict maximum wins
            g = records[m].distribution.percentile(q)
            if g > best_gain:
                best_gain = g
                best_m = m
        if all(float(records[m].distribution.gains.max(initial=0.0)) <= 0.0 for m in remaining):
            warnings.warn(
                f"placement round {len(steps)}: all candidate gains are zero",
                RuntimeWarning,
                stacklevel=2,
            )

        winner = records[best_m]
        steps.append(
            PlanStep(
                marker_index=best_m,
                pose=space.marker_candidates[best_m].pose,
                gain=float(best_gain),
                q=float(q),
                scores_before=_score_summary(cache.scores),
                gains=winner.distribution.gains.copy() if keep_gain_fields else None,
            )
        )

        # Adopt the winner's evaluated scores; no recomputation needed.
        new_scores = cache.scores.copy()
        if len(winner.affected):
            new_scores[winner.affected] = winner.scores_with
        placed.append(best_m)
        cache = ScoreCache(scores=new_scores, placed=tuple(placed))

        remaining.remove(best_m)
        changed = affected_sets[best_m]
        for m in list(records.keys()):
            if m == best_m or (m in records and affected_sets[m] & changed):
                records.pop(m, None)

    return PlacementPlan(
        steps=steps,
        k=k,
        v=float(v),
        n_cameras=vis_index.n_cameras,
        n_candidates=n_candidates,
    )
