"""Built-in benchmark scenes.

The flagship preset is ``two_room``: two 4 m x 4 m rooms joined by a 4 m
corridor, where room B is an exact translate of room A with cloned wall
features. Cameras deep inside either room see only repeated structure and
cannot tell the rooms apart from features alone; the corridor and the two
doorway-adjacent wall strips carry denser unique features. This makes the
rooms the low-localizability regions a planner should spend markers on, and
makes wrong-room mislocalizations (gross ~8 m errors) reproducible in the
simulator.
"""

from __future__ import annotations

import math
from typing import Callable, Dict, List, Optional

import numpy as np

from .features import generate_features
from .scene import SceneDescription

# Perimeter of the two-room floor plan, one counter-clockwise loop. Room A is
# [0,4]^2, room B is [8,12]x[0,4], the corridor is [4,8]x[1.5,2.5]. The side
# walls are split at y=1.5 and y=2.5 so each room's wall pieces align
# one-to-one with the other room's.
_TWO_ROOM_VERTICES = [
    (0.0, 0.0),  # seg 0: A bottom
    (4.0, 0.0),  # seg 1: A right, below doorway
    (4.0, 1.5),  # seg 2: corridor south
    (8.0, 1.5),  # seg 3: B left, below doorway
    (8.0, 0.0),  # seg 4: B bottom
    (12.0, 0.0),  # seg 5: B right, lower
    (12.0, 1.5),  # seg 6: B right, middle (unique: A has its doorway here)
    (12.0, 2.5),  # seg 7: B right, upper
    (12.0, 4.0),  # seg 8: B top
    (8.0, 4.0),  # seg 9: B left, above doorway
    (8.0, 2.5),  # seg 10: corridor north
    (4.0, 2.5),  # seg 11: A right, above doorway
    (4.0, 4.0),  # seg 12: A top
    (0.0, 4.0),  # seg 13: A left, upper
    (0.0, 2.5),  # seg 14: A left, middle (unique: B has its doorway here)
    (0.0, 1.5),  # seg 15: A left, lower
]

# Room B's walls clone room A's, matched piecewise (segment i of the first
# chain is the source of segment i of the second). Segments 2, 6, 10 and 14
# stay unique.
TWO_ROOM_ALIASING = [[[0, 1, 11, 12, 13, 15], [4, 5, 7, 8, 9, 3]]]


def two_room_scene(
    seed: int = 7,
    density: float = 2.0,
    unique_density: float = 7.0,
    camera_range: float = 3.5,
    orientations_per_cell: int = 8,
) -> SceneDescription:
    """Two cloned rooms joined by a feature-rich corridor."""
    walls = [np.array(_TWO_ROOM_VERTICES)]
    segment_density = {2: unique_density, 6: unique_density, 10: unique_density, 14: unique_density}
    scene = SceneDescription(
        walls=walls,
        camera_fov=math.pi / 2.0,
        camera_range=camera_range,
        grid_resolution=0.5,
        marker_spacing=0.5,
        orientations_per_cell=orientations_per_cell,
        eye_height=1.5,
        feature_seed=seed,
        feature_generator={
            "density": density,
            "segment_density": {str(k): v for k, v in segment_density.items()},
            "aliasing_groups": TWO_ROOM_ALIASING,
        },
        name="two_room",
    )
    scene.feature_points = generate_features(
        scene,
        density=density,
        aliasing_groups=TWO_ROOM_ALIASING,
        seed=seed,
        segment_density=segment_density,
    )
    return scene


def single_room_scene(
    seed: int = 7,
    density: float = 3.0,
    side: float = 6.0,
    camera_range: float = 3.5,
    orientations_per_cell: int = 8,
) -> SceneDescription:
    """One square room with independent features on every wall."""
    walls = [np.array([(0.0, 0.0), (side, 0.0), (side, side), (0.0, side)])]
    scene = SceneDescription(
        walls=walls,
        camera_fov=math.pi / 2.0,
        camera_range=camera_range,
        grid_resolution=0.5,
        marker_spacing=0.5,
        orientations_per_cell=orientations_per_cell,
        eye_height=1.5,
        feature_seed=seed,
        feature_generator={"density": density},
        name="single_room",
    )
    scene.feature_points = generate_features(scene, density=density, seed=seed)
    return scene


PRESETS: Dict[str, Callable[..., SceneDescription]] = {
    "two_room": two_room_scene,
    "single_room": single_room_scene,
}


def build_preset(name: str, seed: Optional[int] = None) -> SceneDescription:
    """Instantiate a preset scene by name, optionally overriding the seed."""
    if name not in PRESETS:
        known = ", ".join(sorted(PRESETS))
        raise KeyError(f"unknown preset '{name}' (known: {known})")
    return PRESETS[name](seed=seed) if seed is not None else PRESETS[name]()
