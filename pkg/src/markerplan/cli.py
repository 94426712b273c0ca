"""Command line interface.

Subcommands:

* ``make-scene``: write a built-in preset scene (walls + features) to JSON.
* ``discretize``: discretize a scene and save the camera/candidate space.
* ``score``: per-pose localizability scores as CSV heatmap + PGM image.
* ``plan``: greedy marker placement, written as plan.json.
* ``eval``: simulate localization under placement strategies, recall CSV.
* ``sensitivity``: re-evaluate a plan with markers slid along their walls.

Every output directory receives a ``manifest.json`` recording the command,
its parameters and the scene content hash (never timestamps), so re-running
a command with the same inputs reproduces every artifact byte for byte.
Exit codes: 0 success, 1 usage error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import math
import os
import sys
from typing import Dict, List, Optional, Sequence

import numpy as np

from . import __version__
from .evalsim import (
    COARSE_ROT_THRESHOLD,
    COARSE_TRANS_THRESHOLD,
    DEFAULT_ROT_THRESHOLD,
    DEFAULT_TRANS_THRESHOLD,
    EvalContext,
    LocalizeConfig,
    PlacementStrategy,
    derive_rng_key,
    placement_from_candidates,
    run_experiment,
    run_localizations,
    sample_test_poses,
    shift_placement,
    summarize_results,
)
from .localizability import SENTINEL_SCORE
from .pipeline import PreparedScene, prepare
from .planner import PlacementPlan
from .presets import PRESETS, build_preset
from .scene import (
    SceneError,
    SceneFormatError,
    atomic_write_text,
    dumps_canonical,
    load_scene,
    save_scene,
    save_space,
    scene_content_hash,
)
from .visibility import IndexCacheError

RECALL_COLUMNS = [
    "scene",
    "strategy",
    "seed",
    "k",
    "n_test",
    "recall",
    "mean_trans_error",
    "mean_rot_error",
]
SENSITIVITY_COLUMNS = ["scene", "strategy", "deviation"] + RECALL_COLUMNS[2:]


class UsageError(Exception):
    """Bad command line arguments (exit code 1)."""


class _Parser(argparse.ArgumentParser):
    """argparse that raises instead of exiting so main() owns exit codes."""

    def error(self, message: str) -> None:  # type: ignore[override]
        raise UsageError(message)


# ---------------------------------------------------------------------------
# Small artifact writers
# ---------------------------------------------------------------------------


def _write_csv(path: str, columns: Sequence[str], rows: Sequence[Dict[str, object]]) -> None:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(columns)
    for row in rows:
        writer.writerow([row[c] for c in columns])
    atomic_write_text(path, buf.getvalue())


def _write_manifest(out_dir: str, command: str, parameters: Dict[str, object], outputs: Dict[str, str]) -> None:
    manifest = {
        "command": command,
        "package": "markerplan",
        "version": __version__,
        "parameters": parameters,
        "outputs": outputs,
    }
    atomic_write_text(os.path.join(out_dir, "manifest.json"), dumps_canonical(manifest) + "\n")


def location_scores(prepared: PreparedScene, scores: np.ndarray) -> np.ndarray:
    """Aggregate per-pose scores to one value per camera location.

    The aggregate is the mean over the location's orientations, ignoring
    sentinel (unconstrained) poses; a location with only sentinel poses keeps
    the sentinel value.
    """
    space = prepared.space
    n_loc = len(space.camera_locations)
    out = np.full(n_loc, SENTINEL_SCORE)
    per_loc = scores.reshape(n_loc, len(space.camera_yaws))
    for i in range(n_loc):
        finite = per_loc[i][per_loc[i] != SENTINEL_SCORE]
        if finite.size:
            out[i] = float(finite.mean())
    return out


def write_heatmap_csv(path: str, prepared: PreparedScene, loc_scores: np.ndarray) -> None:
    rows = []
    for (x, y), s in zip(prepared.space.camera_locations, loc_scores):
        rows.append({"x": float(x), "y": float(y), "score": float(s)})
    _write_csv(path, ["x", "y", "score"], rows)


def write_heatmap_pgm(path: str, prepared: PreparedScene, loc_scores: np.ndarray) -> None:
    """Plain (P2) PGM render of the location scores over the occupancy grid.

    Occupied / exterior cells are 0; free cells map linearly to 1..255 from
    the worst to the best non-sentinel score (sentinel-only cells get 1).
    """
    grid = prepared.space.grid
    nx, ny = grid.occupied.shape
    img = np.zeros((nx, ny), dtype=int)
    finite = loc_scores[loc_scores != SENTINEL_SCORE]
    lo = float(finite.min()) if finite.size else 0.0
    hi = float(finite.max()) if finite.size else 0.0
    span = hi - lo
    for (x, y), s in zip(prepared.space.camera_locations, loc_scores):
        ix = int(math.floor((x - grid.origin[0]) / grid.resolution))
        iy = int(math.floor((y - grid.origin[1]) / grid.resolution))
        if s == SENTINEL_SCORE or span <= 0.0:
            img[ix, iy] = 1 if s == SENTINEL_SCORE else 128
        else:
            img[ix, iy] = 1 + int(round(254.0 * (s - lo) / span))
    lines = [f"P2", f"{nx} {ny}", "255"]
    for iy in range(ny - 1, -1, -1):  # PGM rows run top-down
        lines.append(" ".join(str(img[ix, iy]) for ix in range(nx)))
    atomic_write_text(path, "\n".join(lines) + "\n")


def plan_to_dict(plan: PlacementPlan, prepared: PreparedScene) -> dict:
    steps = []
    for step in plan.steps:
        cand = prepared.space.marker_candidates[step.marker_index]
        steps.append(
            {
                "marker_index": step.marker_index,
                "gain": step.gain,
                "q": step.q,
                "position": [float(v) for v in cand.pose.translation],
                "normal": [float(v) for v in cand.normal],
                "segment_index": cand.segment_index,
                "arc_offset": cand.arc_offset,
                "scores_before": step.scores_before,
            }
        )
    return {
        "scene": prepared.scene.name,
        "scene_hash": scene_content_hash(prepared.scene),
        "k": plan.k,
        "v": plan.v,
        "n_cameras": plan.n_cameras,
        "n_candidates": plan.n_candidates,
        "marker_indices": plan.marker_indices,
        "steps": steps,
    }


def load_plan_indices(path: str) -> List[int]:
    with open(path) as fh:
        data = json.load(fh)
    try:
        return [int(i) for i in data["marker_indices"]]
    except (KeyError, TypeError) as exc:
        raise SceneFormatError(f"not a plan file: {path} ({exc})") from None


# ---------------------------------------------------------------------------
# Shared argument plumbing
# ---------------------------------------------------------------------------


def _add_scene_arg(p: argparse.ArgumentParser) -> None:
    p.add_argument("--scene", required=True, help="scene JSON produced by make-scene")


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--jobs", type=int, default=1, help="worker threads (default 1)")
    p.add_argument("--index-cache", default=None, help="optional visibility index cache file")


def _thresholds(args: argparse.Namespace) -> tuple:
    if args.thresholds == "sim":
        return DEFAULT_TRANS_THRESHOLD, DEFAULT_ROT_THRESHOLD
    if args.thresholds == "real":
        return COARSE_TRANS_THRESHOLD, COARSE_ROT_THRESHOLD
    if args.trans_threshold is None or args.rot_threshold_deg is None:
        raise UsageError("--thresholds custom needs --trans-threshold and --rot-threshold-deg")
    return float(args.trans_threshold), math.radians(float(args.rot_threshold_deg))


def _prepare(args: argparse.Namespace) -> PreparedScene:
    scene = load_scene(args.scene)
    return prepare(scene, index_cache=getattr(args, "index_cache", None))


def _eval_config(args: argparse.Namespace) -> LocalizeConfig:
    trans_thr, rot_thr = _thresholds(args)
    return LocalizeConfig(trans_threshold=trans_thr, rot_threshold=rot_thr)


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------


def cmd_make_scene(args: argparse.Namespace) -> int:
    if args.preset not in PRESETS:
        raise UsageError(f"unknown preset '{args.preset}' (known: {', '.join(sorted(PRESETS))})")
    scene = build_preset(args.preset, seed=args.seed)
    save_scene(scene, args.out)
    print(f"wrote {args.out}: preset={scene.name} features={len(scene.feature_points)}")
    return 0


def cmd_discretize(args: argparse.Namespace) -> int:
    prepared = _prepare(args)
    os.makedirs(args.out, exist_ok=True)
    space_path = os.path.join(args.out, "space.json")
    save_space(prepared.space, space_path)
    _write_manifest(
        args.out,
        "discretize",
        {
            "scene": prepared.scene.name,
            "scene_hash": scene_content_hash(prepared.scene),
            "n_locations": len(prepared.space.camera_locations),
            "n_cameras": prepared.space.n_cameras,
            "n_candidates": prepared.space.n_candidates,
        },
        {"space": "space.json"},
    )
    print(
        f"{prepared.space.n_cameras} camera poses "
        f"({len(prepared.space.camera_locations)} locations x {len(prepared.space.camera_yaws)} yaws), "
        f"{prepared.space.n_candidates} marker candidates"
    )
    return 0


def _parse_markers(args: argparse.Namespace, prepared: PreparedScene) -> List[int]:
    indices: List[int] = []
    if getattr(args, "plan", None):
        indices = load_plan_indices(args.plan)
        if args.k is not None:
            if args.k > len(indices):
                raise UsageError(f"plan has {len(indices)} markers, --k {args.k} asked for more")
            indices = indices[: args.k]
    elif getattr(args, "markers", None):
        indices = [int(tok) for tok in args.markers.split(",") if tok.strip()]
    bad = [i for i in indices if not 0 <= i < prepared.space.n_candidates]
    if bad:
        raise UsageError(f"marker indices out of range: {bad}")
    return indices


def cmd_score(args: argparse.Namespace) -> int:
    prepared = _prepare(args)
    placed = _parse_markers(args, prepared)
    scores = prepared.score_map(placed, jobs=args.jobs)
    loc = location_scores(prepared, scores)
    os.makedirs(args.out, exist_ok=True)
    write_heatmap_csv(os.path.join(args.out, "heatmap.csv"), prepared, loc)
    write_heatmap_pgm(os.path.join(args.out, "heatmap.pgm"), prepared, loc)
    finite = scores[scores != SENTINEL_SCORE]
    _write_manifest(
        args.out,
        "score",
        {
            "scene": prepared.scene.name,
            "scene_hash": scene_content_hash(prepared.scene),
            "placed_markers": placed,
            "n_cameras": prepared.space.n_cameras,
            "score_min": float(finite.min()) if finite.size else None,
            "score_mean": float(finite.mean()) if finite.size else None,
            "score_max": float(finite.max()) if finite.size else None,
            "n_sentinel": int(np.count_nonzero(scores == SENTINEL_SCORE)),
        },
        {"heatmap_csv": "heatmap.csv", "heatmap_pgm": "heatmap.pgm"},
    )
    print(f"scored {prepared.space.n_cameras} poses -> {args.out}/heatmap.csv")
    return 0


def cmd_plan(args: argparse.Namespace) -> int:
    if args.k < 0:
        raise UsageError("--k must be non-negative")
    prepared = _prepare(args)
    result = prepared.plan_markers(k=args.k, v=args.v, jobs=args.jobs, keep_gain_fields=True)
    os.makedirs(args.out, exist_ok=True)
    plan_path = os.path.join(args.out, "plan.json")
    atomic_write_text(plan_path, dumps_canonical(plan_to_dict(result, prepared)) + "\n")
    outputs = {"plan": "plan.json"}
    # Per-round gain heatmaps: what the chosen marker contributed per location.
    for round_idx, step in enumerate(result.steps, start=1):
        if step.gains is None:
            continue
        name = f"gain_round_{round_idx:02d}.csv"
        per_loc = step.gains.reshape(
            len(prepared.space.camera_locations), len(prepared.space.camera_yaws)
        ).mean(axis=1)
        rows = [
            {"x": float(x), "y": float(y), "gain": float(g)}
            for (x, y), g in zip(prepared.space.camera_locations, per_loc)
        ]
        _write_csv(os.path.join(args.out, name), ["x", "y", "gain"], rows)
        outputs[f"gain_round_{round_idx:02d}"] = name
    _write_manifest(
        args.out,
        "plan",
        {
            "scene": prepared.scene.name,
            "scene_hash": scene_content_hash(prepared.scene),
            "k": args.k,
            "v": args.v,
            "marker_indices": result.marker_indices,
        },
        outputs,
    )
    for step in result.steps:
        cand = prepared.space.marker_candidates[step.marker_index]
        x, y = cand.position2d
        print(
            f"marker {step.marker_index:4d} at ({x:6.2f}, {y:6.2f}) "
            f"gain={step.gain:.6f} q={step.q:.1f}"
        )
    print(f"wrote {plan_path}")
    return 0


def _build_strategies(args: argparse.Namespace) -> List[PlacementStrategy]:
    names = [s.strip() for s in args.strategies.split(",") if s.strip()]
    strategies = []
    plan_indices: Optional[List[int]] = None
    for name in names:
        if name == "omp":
            if not args.plan:
                raise UsageError("strategy 'omp' needs --plan")
            if plan_indices is None:
                plan_indices = load_plan_indices(args.plan)
            strategies.append(PlacementStrategy("omp", plan_indices))
        elif name in ("none", "random", "uniform"):
            strategies.append(PlacementStrategy(name))
        else:
            raise UsageError(f"unknown strategy '{name}'")
    if not strategies:
        raise UsageError("no strategies given")
    return strategies


def _parse_ks(text: str) -> List[int]:
    try:
        ks = [int(tok) for tok in str(text).split(",") if tok.strip()]
    except ValueError:
        raise UsageError(f"--k expects integers, got '{text}'") from None
    if not ks:
        raise UsageError("--k needs at least one value")
    if any(k < 0 for k in ks):
        raise UsageError("--k values must be non-negative")
    return ks


def cmd_eval(args: argparse.Namespace) -> int:
    ks = _parse_ks(args.k)
    prepared = _prepare(args)
    cfg = _eval_config(args)
    strategies = _build_strategies(args)
    base_scores = prepared.score_map((), jobs=args.jobs)
    test_poses = sample_test_poses(prepared.space, base_scores, args.n_test, args.seed)
    seeds = list(range(args.seeds))
    rows = run_experiment(
        prepared.scene,
        prepared.space,
        prepared.features,
        strategies,
        ks,
        test_poses,
        seeds,
        cfg,
        args.seed,
        jobs=args.jobs,
    )
    os.makedirs(args.out, exist_ok=True)
    _write_csv(os.path.join(args.out, "recall.csv"), RECALL_COLUMNS, rows)
    _write_manifest(
        args.out,
        "eval",
        {
            "scene": prepared.scene.name,
            "scene_hash": scene_content_hash(prepared.scene),
            "ks": ks,
            "n_test": args.n_test,
            "seed": args.seed,
            "seeds": seeds,
            "strategies": [s.name for s in strategies],
            "trans_threshold": cfg.trans_threshold,
            "rot_threshold": cfg.rot_threshold,
            "n_failed": {
                f"{r['strategy']}/k{r['k']}/{r['seed']}": r["n_failed"] for r in rows
            },
        },
        {"recall": "recall.csv"},
    )
    for row in rows:
        print(
            f"{row['strategy']:8s} k={row['k']} seed={row['seed']} recall={row['recall']:.1f}% "
            f"trans={row['mean_trans_error']:.3f}m rot={math.degrees(float(row['mean_rot_error'])):.2f}deg"
        )
    return 0


def cmd_sensitivity(args: argparse.Namespace) -> int:
    prepared = _prepare(args)
    cfg = _eval_config(args)
    indices = load_plan_indices(args.plan)
    if args.k is not None:
        if args.k > len(indices):
            raise UsageError(f"plan has {len(indices)} markers, --k {args.k} asked for more")
        indices = indices[: args.k]
    k = len(indices)
    deltas = [float(tok) for tok in args.deltas.split(",") if tok.strip()]
    base_scores = prepared.score_map((), jobs=args.jobs)
    test_poses = sample_test_poses(prepared.space, base_scores, args.n_test, args.seed)
    ctx = EvalContext(prepared.scene, prepared.space, prepared.features)
    seeds = list(range(args.seeds))

    rows: List[Dict[str, object]] = []
    for deviation in [0.0] + deltas:
        for seed in seeds:
            if deviation == 0.0:
                placed = placement_from_candidates(prepared.space, indices)
            else:
                placed = shift_placement(prepared.space, prepared.scene, indices, deviation)
            results = run_localizations(
                ctx, test_poses, placed, cfg, derive_rng_key(args.seed, seed), jobs=args.jobs
            )
            row: Dict[str, object] = {
                "scene": prepared.scene.name,
                "strategy": "omp",
                "deviation": deviation,
                "seed": seed,
                "k": k,
                "n_test": len(test_poses),
            }
            summary = summarize_results(results, cfg)
            row.update(summary)
            row["n_failed"] = int(summary["n_failed"])
            rows.append(row)
    os.makedirs(args.out, exist_ok=True)
    _write_csv(os.path.join(args.out, "sensitivity.csv"), SENSITIVITY_COLUMNS, rows)
    _write_manifest(
        args.out,
        "sensitivity",
        {
            "scene": prepared.scene.name,
            "scene_hash": scene_content_hash(prepared.scene),
            "k": k,
            "n_test": args.n_test,
            "seed": args.seed,
            "seeds": seeds,
            "deviations": [0.0] + deltas,
            "trans_threshold": cfg.trans_threshold,
            "rot_threshold": cfg.rot_threshold,
        },
        {"sensitivity": "sensitivity.csv"},
    )
    for row in rows:
        print(
            f"deviation={row['deviation']:.2f}m seed={row['seed']} recall={row['recall']:.1f}%"
        )
    return 0


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="markerplan", description=__doc__.split("\n\n")[0])
    parser.add_argument("--version", action="version", version=f"markerplan {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("make-scene", help="write a preset scene to JSON")
    p.add_argument("--preset", default="two_room", help=f"one of: {', '.join(sorted(PRESETS))}")
    p.add_argument("--seed", type=int, default=None, help="feature generation seed")
    p.add_argument("--out", required=True, help="output scene JSON path")
    p.set_defaults(func=cmd_make_scene)

    p = sub.add_parser("discretize", help="discretize a scene into poses and candidates")
    _add_scene_arg(p)
    _add_common(p)
    p.set_defaults(func=cmd_discretize)

    p = sub.add_parser("score", help="localizability heatmap for a (possibly marked) scene")
    _add_scene_arg(p)
    p.add_argument("--plan", default=None, help="plan.json whose markers should be placed")
    p.add_argument("--markers", default=None, help="comma-separated candidate indices to place")
    p.add_argument("--k", type=int, default=None, help="use only the first k plan markers")
    _add_common(p)
    p.set_defaults(func=cmd_score)

    p = sub.add_parser("plan", help="greedily place markers")
    _add_scene_arg(p)
    p.add_argument("--k", type=int, required=True, help="number of markers to place")
    p.add_argument("--v", type=float, default=90.0, help="coverage level in [0, 100] (default 90)")
    _add_common(p)
    p.set_defaults(func=cmd_plan)

    def add_eval_args(p: argparse.ArgumentParser) -> None:
        p.add_argument("--n-test", type=int, default=200, help="number of test poses")
        p.add_argument("--seed", type=int, default=0, help="root seed for all evaluation draws")
        p.add_argument("--seeds", type=int, default=5, help="number of per-run seeds (default 5)")
        p.add_argument(
            "--thresholds",
            choices=["sim", "real", "custom"],
            default="sim",
            help="recall thresholds: sim=5cm/5deg, real=30cm/10deg",
        )
        p.add_argument("--trans-threshold", type=float, default=None, help="custom recall translation threshold, m")
        p.add_argument("--rot-threshold-deg", type=float, default=None, help="custom recall rotation threshold, deg")

    p = sub.add_parser("eval", help="simulate localization recall under placements")
    _add_scene_arg(p)
    p.add_argument("--plan", default=None, help="plan.json for the 'omp' strategy")
    p.add_argument("--k", required=True, help="markers per placement (comma list for a sweep)")
    p.add_argument(
        "--strategies",
        default="none,omp,random,uniform",
        help="comma list of none,omp,random,uniform",
    )
    add_eval_args(p)
    _add_common(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sensitivity", help="recall as planned markers slide along walls")
    _add_scene_arg(p)
    p.add_argument("--plan", required=True, help="plan.json to perturb")
    p.add_argument("--k", type=int, default=None, help="use only the first k plan markers")
    p.add_argument("--deltas", default="0.25,0.5", help="comma list of shift distances, m")
    add_eval_args(p)
    _add_common(p)
    p.set_defaults(func=cmd_sensitivity)

    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except (SceneError, SceneFormatError, IndexCacheError, OSError, ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
