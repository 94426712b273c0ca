"""Synthetic visual feature field anchored on scene walls.

Feature points carry a position, a unit descriptor and a count of "similar"
points elsewhere in the scene. Two points are similar when their descriptors
are close but their positions are far apart -- the signature of repetitive
structure that confuses feature matching. The similar count inflates the
point-position prior covariance used by the localizability model, so heavily
aliased points contribute less information.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Dict, Iterable, List, Optional, Sequence

import numpy as np

if TYPE_CHECKING:  # pragma: no cover - import cycle guard, typing only
    from .scene import SceneDescription

DEFAULT_TAU_DESC = 0.2
DEFAULT_TAU_GEO = 2.0
DEFAULT_BASE_VARIANCE = 2.5e-3  # m^2, isotropic
DEFAULT_DESCRIPTOR_DIM = 32
DEFAULT_Z_SPREAD = 1.0  # total vertical extent of generated features, m

# Stream ids for per-segment seed derivation.
_STREAM_SEGMENT = 101


@dataclass
class FeaturePoint:
    """A mapped visual feature: 3D anchor position plus unit descriptor."""

    position: np.ndarray
    descriptor: np.ndarray
    similar_count: int = 0

    def __post_init__(self) -> None:
        self.position = np.asarray(self.position, dtype=float)
        self.descriptor = np.asarray(self.descriptor, dtype=float)


@dataclass
class SimilarityConfig:
    """Thresholds of the similar-point count and the base position prior.

    A candidate counts as similar to a query when its descriptor distance is
    at most ``tau_desc`` and its 3D separation is at least ``tau_geo``.
    """

    tau_desc: float = DEFAULT_TAU_DESC
    tau_geo: float = DEFAULT_TAU_GEO
    base_variance: float = DEFAULT_BASE_VARIANCE

    def base_covariance(self) -> np.ndarray:
        return np.eye(3) * self.base_variance


def count_similar(
    query: FeaturePoint,
    points: Sequence[FeaturePoint],
    cfg: Optional[SimilarityConfig] = None,
) -> int:
    """Number of points similar to ``query`` (the query itself never counts)."""
    cfg = cfg or SimilarityConfig()
    n = 0
    for other in points:
        if other is query:
            continue
        sep = float(np.linalg.norm(other.position - query.position))
        if sep < cfg.tau_geo:
            continue
        if float(np.linalg.norm(other.descriptor - query.descriptor)) <= cfg.tau_desc:
            n += 1
    return n


def annotate_similar_counts(
    points: Sequence[FeaturePoint],
    cfg: Optional[SimilarityConfig] = None,
    candidate_mask: Optional[Sequence[bool]] = None,
) -> None:
    """Fill in ``similar_count`` for every point, in place.

    When ``candidate_mask`` is given, only masked-in points participate as
    similarity candidates (callers typically restrict to points observed from
    at least one feasible camera pose); masked-out points keep count 0.
    """
    cfg = cfg or SimilarityConfig()
    if candidate_mask is None:
        pool = list(points)
    else:
        pool = [p for p, keep in zip(points, candidate_mask) if keep]
    pos = np.stack([p.position for p in pool]) if pool else np.zeros((0, 3))
    desc = np.stack([p.descriptor for p in pool]) if pool else np.zeros((0, 0))
    for i, p in enumerate(points):
        if candidate_mask is not None and not candidate_mask[i]:
            p.similar_count = 0
            continue
        if len(pool) == 0:
            p.similar_count = 0
            continue
        sep = np.linalg.norm(pos - p.position, axis=1)
        dd = np.linalg.norm(desc - p.descriptor, axis=1)
        mask = (sep >= cfg.tau_geo) & (dd <= cfg.tau_desc)
        # Subtract nothing for the query itself: its separation is 0 < tau_geo.
        p.similar_count = int(np.count_nonzero(mask))


def point_covariance(similar_count: int, cfg: Optional[SimilarityConfig] = None) -> np.ndarray:
    """Position prior covariance scaled by (1 + similar_count)."""
    cfg = cfg or SimilarityConfig()
    if similar_count < 0:
        raise ValueError("similar_count must be non-negative")
    return (1.0 + float(similar_count)) * cfg.base_covariance()


# ---------------------------------------------------------------------------
# Feature generation
# ---------------------------------------------------------------------------


def _segment_rng(seed: int, segment_index: int) -> np.random.Generator:
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=(_STREAM_SEGMENT, int(segment_index)))
    return np.random.default_rng(ss)


def generate_features(
    scene: "SceneDescription",
    density: float,
    aliasing_groups: Optional[Sequence[Sequence[Sequence[int]]]] = None,
    seed: int = 0,
    descriptor_dim: int = DEFAULT_DESCRIPTOR_DIM,
    z_spread: float = DEFAULT_Z_SPREAD,
    segment_density: Optional[Dict[int, float]] = None,
) -> List[FeaturePoint]:
    """Scatter feature points along the scene walls.

    Each wall segment receives ``round(length * density)`` points at uniform
    random arc offsets with random unit descriptors and a random height offset
    within ``z_spread`` of eye level. An aliasing group is a list of segment
    chains (each a list of global segment indices, all chains the same
    length); every chain replicates the first chain's relative arc offsets,
    height offsets and descriptors, producing exact repeated structure such as
    cloned rooms.

    Args:
        scene: provides wall geometry and eye height.
        density: points per meter of wall.
        aliasing_groups: groups of segment chains to clone, by global segment
            index (see :meth:`SceneDescription.wall_segments`).
        seed: root seed; every segment derives an independent stream.
        descriptor_dim: dimensionality of the unit descriptors.
        z_spread: total vertical extent of feature anchors, meters.
        segment_density: optional per-segment density overrides.

    Returns:
        The generated feature list, ordered by global segment index.
    """
    if density < 0.0:
        raise ValueError("density must be non-negative")
    segments = scene.wall_segments()
    n_seg = len(segments)

    # clone_of[target_segment] = source_segment
    clone_of: Dict[int, int] = {}
    for group in aliasing_groups or []:
        chains = [list(chain) for chain in group]
        if len(chains) < 2:
            raise ValueError("an aliasing group needs at least two chains")
        width = len(chains[0])
        for chain in chains:
            if len(chain) != width:
                raise ValueError("aliasing chains in a group must have equal length")
            for s in chain:
                if not 0 <= s < n_seg:
                    raise ValueError(f"aliasing chain references unknown segment {s}")
        src = chains[0]
        for chain in chains[1:]:
            for s_src, s_tgt in zip(src, chain):
                if s_tgt in clone_of:
                    raise ValueError(f"segment {s_tgt} cloned more than once")
                clone_of[s_tgt] = s_src

    # Generate source segments first so clones can copy them.
    per_segment: Dict[int, tuple] = {}
    for si, (_, a, b) in enumerate(segments):
        if si in clone_of:
            continue
        dens = (segment_density or {}).get(si, density)
        length = float(np.linalg.norm(b - a))
        count = int(round(length * dens))
        rng = _segment_rng(seed, si)
        ts = np.sort(rng.uniform(0.0, 1.0, count))
        zs = rng.uniform(-0.5 * z_spread, 0.5 * z_spread, count)
        descs = rng.normal(size=(count, descriptor_dim))
        norms = np.linalg.norm(descs, axis=1, keepdims=True)
        descs = descs / np.maximum(norms, 1e-12)
        per_segment[si] = (ts, zs, descs)

    points: List[FeaturePoint] = []
    for si, (_, a, b) in enumerate(segments):
        ts, zs, descs = per_segment[clone_of.get(si, si)]
        for t, z, d in zip(ts, zs, descs):
            xy = a + t * (b - a)
            points.append(
                FeaturePoint(
                    position=np.array([xy[0], xy[1], scene.eye_height + z]),
                    descriptor=d.copy(),
                )
            )
    return points
