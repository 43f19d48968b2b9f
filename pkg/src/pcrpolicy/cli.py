"""Command-line entry point: ``synth``, ``store``, ``infer`` and ``eval``.

Exit codes: 0 success, 2 usage, 3 input parse, 4 unknown key, 5 low-confidence
rejection. Every randomized command takes an explicit seed; the environment is
never consulted.
"""

from __future__ import annotations

import argparse
import csv
import json
import math
import os
import sys
import tempfile
from dataclasses import replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .demo_store import DemoStore, load_store, save_store
from .errors import InvalidParameterError, LowConfidenceError, PlyFormatError, UnknownTaskError
from .plyio import read_ply
from .policy import infer_keyframe
from .registration import RegistrationParams
from .synth import DEFAULT_CAMERA, export_episode, load_episode, make_episode, pose_error

EXIT_OK, EXIT_USAGE, EXIT_PARSE, EXIT_UNKNOWN_KEY, EXIT_LOW_CONFIDENCE = 0, 2, 3, 4, 5
CSV_SCHEMA = "pcrpolicy-eval v1"
CSV_COLUMNS = ("seed", "episode", "camera", "noise", "stage", "rot_err", "trans_err", "s_a", "s_b", "accepted", "success")
SUCCESS_ROT = math.radians(5.0)
SUCCESS_TRANS = 0.01
DEFAULT_CREATED = "unspecified"


class UsageError(Exception):
    pass


def _add_registration_flags(p: argparse.ArgumentParser, seed_required: bool = False):
    g = p.add_argument_group("registration")
    d = RegistrationParams()
    g.add_argument("--voxel-size", type=float, default=d.voxel_size)
    g.add_argument("--ransac-max-iterations", type=int, default=d.ransac_max_iterations)
    g.add_argument("--ransac-confidence", type=float, default=d.ransac_confidence)
    g.add_argument("--distance-threshold", type=float, default=None)
    g.add_argument("--icp-max-iterations", type=int, default=d.icp_max_iterations)
    g.add_argument("--lambda-geometric", type=float, default=d.lambda_geometric)
    g.add_argument("--n-runs", type=int, default=d.n_runs)
    g.add_argument("--rng-seed", type=int, required=seed_required, default=None if seed_required else d.rng_seed)
    g.add_argument("--fitness-max-dist", type=float, default=None)
    g.add_argument("--normal-radius", type=float, default=None)
    g.add_argument("--feature-radius", type=float, default=None)
    g.add_argument("--no-mutual-filter", dest="mutual_filter", action="store_false")
    g.add_argument("--edge-length-ratio", type=float, default=d.edge_length_ratio)
    g.add_argument("--refine-levels", type=float, nargs="*", default=list(d.refine_levels))
    g.add_argument("--viewpoint", type=float, nargs=3, default=None, metavar=("X", "Y", "Z"))
    g.add_argument("--color-feature-weight", type=float, default=d.color_feature_weight)
    p.add_argument("--fitness-threshold", type=float, default=0.0)


def _params(args) -> RegistrationParams:
    return RegistrationParams(
        voxel_size=args.voxel_size,
        ransac_max_iterations=args.ransac_max_iterations,
        ransac_confidence=args.ransac_confidence,
        distance_threshold=args.distance_threshold,
        icp_max_iterations=args.icp_max_iterations,
        lambda_geometric=args.lambda_geometric,
        n_runs=args.n_runs,
        rng_seed=args.rng_seed,
        fitness_max_dist=args.fitness_max_dist,
        normal_radius=args.normal_radius,
        feature_radius=args.feature_radius,
        mutual_filter=args.mutual_filter,
        edge_length_ratio=args.edge_length_ratio,
        refine_levels=tuple(args.refine_levels),
        viewpoint=tuple(args.viewpoint) if args.viewpoint else None,
        color_feature_weight=args.color_feature_weight,
    )


def _params_record(p: RegistrationParams) -> dict:
    out = {}
    for k, v in vars(p).items():
        out[k] = list(v) if isinstance(v, tuple) else v
    return out


def _check_threshold(t: float):
    if not 0.0 <= t <= 1.0:
        raise InvalidParameterError(f"--fitness-threshold must lie in [0, 1], got {t}")


def _atomic_text(path: Path, text: str):
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent)
    try:
        with os.fdopen(fd, "w", newline="") as f:
            f.write(text)
        os.replace(tmp, path)
    except BaseException:
        Path(tmp).unlink(missing_ok=True)
        raise


# --- commands ----------------------------------------------------------------


def cmd_synth(args) -> int:
    if args.n_episodes < 1:
        raise InvalidParameterError("--n-episodes must be >= 1")
    out = Path(args.out)
    for k in range(args.n_episodes):
        seed = args.seed + k
        ep = make_episode(seed=seed, rotation=args.rotation, camera=args.camera, noise=args.noise,
                          task=args.task, n_demos=args.n_demos)
        d = export_episode(ep, out / f"episode_{seed:06d}")
        print(f"wrote {d}")
    return EXIT_OK


def cmd_store(args) -> int:
    out = Path(args.out)
    if out.exists():
        raise UsageError(f"{out} already exists; refusing to overwrite a store")
    ds = DemoStore(args.voxel_size)
    for path in args.episodes:
        p = Path(path)
        if not (p / "episode.json").is_file():
            raise PlyFormatError(f"{p}: no episode.json found")
        try:
            ep = load_episode(p)
        except (KeyError, ValueError, json.JSONDecodeError) as e:
            raise PlyFormatError(f"{p}: invalid episode ({e})") from e
        for k, demo in enumerate(ep.demos):
            ds.add_demo(demo, demo_id=f"{p.name}#{k}")
    save_store(ds, out, created=args.created)
    for key, n in sorted(ds.counts().items()):
        print(f"{key}\t{n}")
    return EXIT_OK


def cmd_infer(args) -> int:
    params = _params(args)
    _check_threshold(args.fitness_threshold)
    store_dir = Path(args.store)
    if not (store_dir / "manifest.json").is_file():
        raise UsageError(f"store not found: {store_dir}")
    ds = load_store(store_dir)
    obj = read_ply(args.object)
    placement = read_ply(args.placement)
    gripper = read_ply(args.gripper) if args.gripper else None
    code = EXIT_OK
    try:
        action = infer_keyframe(ds, args.task, gripper, obj, placement, params, args.fitness_threshold)
        rejection = None
    except LowConfidenceError as e:
        action, rejection, code = e.action, e, EXIT_LOW_CONFIDENCE
    record = action.to_record(args.fitness_threshold)
    record["params"] = _params_record(params)
    if rejection is not None:
        record["rejection"] = {"stage": rejection.stage, "scores": [float(s) for s in rejection.scores]}
    _atomic_text(Path(args.out), json.dumps(record, indent=2, sort_keys=True) + "\n")
    print(f"{'accepted' if code == EXIT_OK else 'rejected'}: {args.out}")
    return code


def _eval_rows(seed: int, episode: int, camera: str, noise: float, args, params: RegistrationParams):
    stages = ("pick", "preplace", "place")
    try:
        ep = make_episode(seed=seed, rotation=args.rotation, camera=camera, noise=noise, n_demos=args.n_demos)
        ds = DemoStore(params.voxel_size)
        for demo in ep.demos:
            ds.add_demo(demo)
        p = params if camera == "multi" or params.viewpoint is not None else replace(params, viewpoint=DEFAULT_CAMERA)
        try:
            action, accepted = infer_keyframe(ds, ep.demo.task, None, ep.test_object, ep.test_placement, p,
                                              args.fitness_threshold), True
        except LowConfidenceError as e:
            action, accepted = e.action, False
    except Exception as e:  # recorded, not fatal
        print(f"episode seed={seed} failed: {e}", file=sys.stderr)
        return [(seed, episode, camera, noise, s, math.nan, math.nan, 0.0, 0.0, 0, 0) for s in stages]
    rows = []
    for s in stages:
        r, t = pose_error(action.stages[s], ep.truth[s])
        ev = action.evidence[s].evidence
        ok = int(accepted and r < SUCCESS_ROT and t < SUCCESS_TRANS)
        rows.append((seed, episode, camera, noise, s, r, t, ev.s_a, ev.s_b, int(accepted), ok))
    return rows


def _fmt(v) -> str:
    if isinstance(v, float):
        return repr(v) if math.isfinite(v) else "nan"
    return str(v)


def summarize(rows, stage: str = "place") -> list[str]:
    """One summary line per (camera, noise) group, recomputable from the CSV rows."""
    lines = []
    groups = sorted({(r[2], r[3]) for r in rows})
    for cam, noise in groups:
        sel = [r for r in rows if r[2] == cam and r[3] == noise and r[4] == stage]
        n = len(sel)
        ok = sum(r[10] for r in sel)
        rot = np.array([r[5] for r in sel], dtype=float)
        tr = np.array([r[6] for r in sel], dtype=float)
        finite = np.isfinite(rot) & np.isfinite(tr)
        rot, tr = rot[finite], tr[finite]
        stats = (
            f"rot_err mean {np.mean(rot):.6g} median {np.median(rot):.6g} "
            f"trans_err mean {np.mean(tr):.6g} median {np.median(tr):.6g}"
            if len(rot) else "no finite errors"
        )
        lines.append(f"{stage} camera={cam} noise={noise:g}: success {ok}/{n} = {ok / max(n, 1):.4f}; {stats}")
    return lines


def cmd_eval(args) -> int:
    params = _params(args)
    _check_threshold(args.fitness_threshold)
    if args.n_episodes < 1 or args.n_seeds < 1:
        raise InvalidParameterError("--n-episodes and --n-seeds must be >= 1")
    if any(s < 0 for s in args.noise):
        raise InvalidParameterError("--noise values must be >= 0")
    rows = []
    for cam in args.camera:
        for noise in args.noise:
            for e in range(args.n_seeds):
                for i in range(args.n_episodes):
                    seed = args.seed + 1000 * e + i
                    rows.extend(_eval_rows(seed, i, cam, noise, args, params))
    stage_order = {"pick": 0, "preplace": 1, "place": 2}
    rows.sort(key=lambda r: (r[0], r[1], r[2], r[3], stage_order[r[4]]))
    lines = [f"# {CSV_SCHEMA}", ",".join(CSV_COLUMNS)]
    lines += [",".join(_fmt(v) for v in r) for r in rows]
    _atomic_text(Path(args.out), "\n".join(lines) + "\n")
    summary = summarize(rows)
    if args.summary:
        _atomic_text(Path(args.summary), "\n".join(summary) + "\n")
    for line in summary:
        print(line)
    return EXIT_OK


def read_eval_csv(path) -> list[dict]:
    """Parse a CSV written by ``eval`` back into typed rows."""
    with open(path, newline="") as f:
        lines = [ln for ln in f if not ln.startswith("#")]
    out = []
    for r in csv.DictReader(lines):
        out.append({
            "seed": int(r["seed"]), "episode": int(r["episode"]), "camera": r["camera"], "noise": float(r["noise"]),
            "stage": r["stage"], "rot_err": float(r["rot_err"]), "trans_err": float(r["trans_err"]),
            "s_a": float(r["s_a"]), "s_b": float(r["s_b"]), "accepted": int(r["accepted"]),
            "success": int(r["success"]),
        })
    return out


# --- parser ------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="pcrpolicy", description="Registration-based pick-and-place keyframe policy.")
    sub = ap.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="generate synthetic episodes")
    s.add_argument("--seed", type=int, required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--n-episodes", type=int, default=1)
    s.add_argument("--rotation", choices=("so3", "yaw"), default="so3")
    s.add_argument("--camera", choices=("multi", "single"), default="multi")
    s.add_argument("--noise", type=float, default=0.0)
    s.add_argument("--n-demos", type=int, default=1)
    s.add_argument("--task", default="place-object")
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("store", help="build a demo store from episode directories")
    s.add_argument("--episodes", nargs="+", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--voxel-size", type=float, default=RegistrationParams().voxel_size)
    s.add_argument("--created", default=DEFAULT_CREATED, help="creation stamp recorded in the manifest")
    s.set_defaults(func=cmd_store)

    s = sub.add_parser("infer", help="infer pick/preplace/place actions")
    s.add_argument("--store", required=True)
    s.add_argument("--task", required=True)
    s.add_argument("--object", required=True)
    s.add_argument("--placement", required=True)
    s.add_argument("--gripper", default=None)
    s.add_argument("--out", required=True)
    _add_registration_flags(s, seed_required=True)
    s.set_defaults(func=cmd_infer)

    s = sub.add_parser("eval", help="synthetic evaluation sweep")
    s.add_argument("--seed", type=int, required=True)
    s.add_argument("--n-episodes", type=int, default=25)
    s.add_argument("--n-seeds", type=int, default=3)
    s.add_argument("--noise", type=float, nargs="+", default=[0.0])
    s.add_argument("--camera", choices=("multi", "single"), nargs="+", default=["multi"])
    s.add_argument("--rotation", choices=("so3", "yaw"), default="so3")
    s.add_argument("--n-demos", type=int, default=1)
    s.add_argument("--out", required=True)
    s.add_argument("--summary", default=None)
    _add_registration_flags(s)
    s.set_defaults(func=cmd_eval)
    return ap


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    try:
        return args.func(args)
    except (UsageError, InvalidParameterError, FileExistsError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except UnknownTaskError as e:
        print(f"error: unknown task key {e.args[0]!r}", file=sys.stderr)
        return EXIT_UNKNOWN_KEY
    except (PlyFormatError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_PARSE


if __name__ == "__main__":
    sys.exit(main())
