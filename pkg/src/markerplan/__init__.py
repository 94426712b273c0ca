"""Information-driven fiducial marker placement for indoor localization.

The package discretizes a 2D floor plan into candidate camera poses and
wall-mounted marker candidates, scores how well each pose could localize
against the scene's visual features, greedily places markers where they
raise a coverage percentile of the per-pose information gain the most, and
ships a bearing-based localization simulator to measure the effect.
"""

from .evalsim import (
    LocalizationResult,
    LocalizeConfig,
    PlacedMarker,
    PlacementStrategy,
    TestPose,
    localize,
    placement_from_candidates,
    random_placement,
    recall,
    rotation_error,
    run_experiment,
    sample_test_poses,
    sampling_weights,
    score_error_correlation,
    shift_placement,
    translation_error,
    uniform_placement,
)
from .features import (
    FeaturePoint,
    SimilarityConfig,
    annotate_similar_counts,
    count_similar,
    generate_features,
    point_covariance,
)
from .localizability import (
    ENTROPY_CONST_6D,
    SENTINEL_SCORE,
    NoiseConfig,
    RankDeficientError,
    ScoreEvaluator,
    UnconstrainedPoseError,
    entropy,
    info_gain,
    localizability_score,
)
from .pipeline import PreparedScene, prepare
from .planner import (
    PlacementPlan,
    PlanStep,
    ScoreCache,
    StaleCacheError,
    adaptive_q,
    incremental_rescore,
    init_score_cache,
    marker_gain,
    percentile,
    plan,
    visibility_stats,
)
from .presets import PRESETS, build_preset, single_room_scene, two_room_scene
from .scene import (
    GroundPlaneSpace,
    MarkerCandidate,
    Pose6D,
    SceneDescription,
    SceneError,
    SceneFormatError,
    discretize,
    load_scene,
    save_scene,
    scene_content_hash,
)
from .visibility import (
    VisibilityIndex,
    build_index,
    build_index_cached,
    marker_visible,
    point_visible,
)

__version__ = "0.1.0"

__all__ = [
    "ENTROPY_CONST_6D",
    "FeaturePoint",
    "GroundPlaneSpace",
    "LocalizationResult",
    "LocalizeConfig",
    "MarkerCandidate",
    "NoiseConfig",
    "PRESETS",
    "PlacedMarker",
    "PlacementPlan",
    "PlacementStrategy",
    "PlanStep",
    "Pose6D",
    "PreparedScene",
    "RankDeficientError",
    "SENTINEL_SCORE",
    "SceneDescription",
    "SceneError",
    "SceneFormatError",
    "ScoreCache",
    "ScoreEvaluator",
    "SimilarityConfig",
    "StaleCacheError",
    "TestPose",
    "UnconstrainedPoseError",
    "VisibilityIndex",
    "adaptive_q",
    "annotate_similar_counts",
    "build_index",
    "build_index_cached",
    "build_preset",
    "count_similar",
    "discretize",
    "entropy",
    "generate_features",
    "incremental_rescore",
    "info_gain",
    "init_score_cache",
    "load_scene",
    "localizability_score",
    "localize",
    "marker_gain",
    "marker_visible",
    "percentile",
    "placement_from_candidates",
    "plan",
    "point_covariance",
    "point_visible",
    "prepare",
    "random_placement",
    "recall",
    "rotation_error",
    "run_experiment",
    "sample_test_poses",
    "sampling_weights",
    "save_scene",
    "scene_content_hash",
    "score_error_correlation",
    "shift_placement",
    "single_room_scene",
    "translation_error",
    "two_room_scene",
    "uniform_placement",
    "visibility_stats",
]
