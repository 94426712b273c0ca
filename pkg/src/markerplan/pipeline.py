"""End-to-end wiring: scene -> discretization -> visibility -> scoring.

The CLI and the tests both go through :func:`prepare`, which performs the
steps every workflow needs exactly once and in the right order: discretize
the scene, build (or load) the visibility index, and annotate feature
similar-counts over the observable point pool.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Optional, Sequence

import numpy as np

from .features import FeaturePoint, SimilarityConfig, annotate_similar_counts
from .localizability import NoiseConfig, ScoreEvaluator
from .planner import PlacementPlan, plan
from .scene import GroundPlaneSpace, SceneDescription, discretize
from .visibility import VisibilityIndex, build_index_cached


@dataclass
class PreparedScene:
    """A scene plus everything derived from it that scoring needs."""

    scene: SceneDescription
    space: GroundPlaneSpace
    vis_index: VisibilityIndex
    noise: NoiseConfig = field(default_factory=NoiseConfig)
    similarity: SimilarityConfig = field(default_factory=SimilarityConfig)
    _evaluator: Optional[ScoreEvaluator] = field(default=None, repr=False, compare=False)

    @property
    def features(self) -> List[FeaturePoint]:
        return self.scene.feature_points

    def evaluator(self) -> ScoreEvaluator:
        """Shared caching evaluator (created on first use)."""
        if self._evaluator is None:
            self._evaluator = ScoreEvaluator(
                self.space, self.features, self.vis_index, self.noise, self.similarity
            )
        return self._evaluator

    def score_map(self, placed: Sequence[int] = (), jobs: int = 1) -> np.ndarray:
        """Per-camera-pose localizability scores under a placement."""
        return self.evaluator().scores_all(placed, jobs=jobs)

    def plan_markers(
        self, k: int, v: float = 90.0, jobs: int = 1, keep_gain_fields: bool = False
    ) -> PlacementPlan:
        """Greedy placement plan of k markers at coverage level v."""
        return plan(
            self.space,
            self.features,
            self.vis_index,
            k=k,
            v=v,
            noise=self.noise,
            similarity=self.similarity,
            evaluator=self.evaluator(),
            jobs=jobs,
            keep_gain_fields=keep_gain_fields,
        )


def observed_point_mask(vis_index: VisibilityIndex) -> np.ndarray:
    """Points visible from at least one discretized camera pose."""
    mask = np.zeros(vis_index.n_points, dtype=bool)
    for seen in vis_index.points_seen:
        mask[seen] = True
    return mask


def prepare(
    scene: SceneDescription,
    noise: Optional[NoiseConfig] = None,
    similarity: Optional[SimilarityConfig] = None,
    index_cache: Optional[str] = None,
) -> PreparedScene:
    """Discretize, index visibility and annotate feature similar-counts.

    Similar-counts are computed over the pool of points observable from at
    least one camera pose, so unobservable features neither inflate others'
    counts nor receive one themselves.
    """
    similarity = similarity or SimilarityConfig()
    space = discretize(scene)
    vis_index = build_index_cached(space, scene, index_cache)
    annotate_similar_counts(
        scene.feature_points,
        similarity,
        candidate_mask=observed_point_mask(vis_index).tolist(),
    )
    return PreparedScene(
        scene=scene,
        space=space,
        vis_index=vis_index,
        noise=noise or NoiseConfig(),
        similarity=similarity,
    )
