"""Command-line interface: ``depthcal {simulate,train,correct,eval,board}``."""

from __future__ import annotations

import argparse
import json
import logging
import math
import os
import shutil
import sys
import tempfile
from contextlib import contextmanager
from pathlib import Path

import numpy as np

from . import simulator as sim
from .config import RunConfig, load_config
from .consistency_loss import LossKind, map_loss
from .dataio import Dataset, load_dataset_dir, save_dataset, write_csv, write_poses
from .depth_model import BiasKind, BiasModel, correct_scan, load_model, model_to_dict, save_model
from .errors import DepthCalError
from .geometry import corrected_pose
from .map_index import filter_masks
from .optimizer import THREADS_ENV, MapProblem, train
from . import _kernels

logger = logging.getLogger("depthcal")

PRESETS = ("corridor", "room", "board")


@contextmanager
def staged_outputs(*targets: Path):
    """Stage outputs in a temporary directory and move them into place only on success.

    Yields a function mapping each final path to its staging path.
    """
    targets = [Path(t) for t in targets]
    parent = targets[0].resolve().parent
    parent.mkdir(parents=True, exist_ok=True)
    stage = Path(tempfile.mkdtemp(prefix=".depthcal-", dir=parent))
    mapping = {t: stage / f"{i}_{t.name}" for i, t in enumerate(targets)}
    try:
        yield lambda t: mapping[Path(t)]
        for final, staged in mapping.items():
            if not staged.exists():
                continue
            final.parent.mkdir(parents=True, exist_ok=True)
            if final.is_dir():
                if any(final.iterdir()):
                    raise DepthCalError(f"output directory {final} is not empty")
                final.rmdir()
            os.replace(staged, final)
    finally:
        shutil.rmtree(stage, ignore_errors=True)


def _sibling(path: Path, suffix: str) -> Path:
    return path.with_name(path.stem + suffix)


def _parse_range(text: str) -> list[float]:
    """``a:b:step`` inclusive range or comma list."""
    if ":" in text:
        a, b, step = (float(v) for v in text.split(":"))
        n = int(math.floor((b - a) / step + 1e-9)) + 1
        return [a + i * step for i in range(n)]
    return [float(v) for v in text.split(",") if v.strip()]


def _check_outdir(path: Path) -> None:
    if path.exists() and (not path.is_dir() or any(path.iterdir())):
        raise DepthCalError(f"output directory {path} exists and is not empty")


# -- commands ----------------------------------------------------------------


def cmd_simulate(args) -> None:
    out = Path(args.out)
    _check_outdir(out)
    bias = BiasModel(BiasKind(args.bias_kind), (args.w1, args.w2))
    if args.scene == "corridor":
        scene, poses = sim.corridor_scene(), sim.corridor_poses(args.n_scans or 10)
        sensor = sim.SensorModel()
    elif args.scene == "room":
        scene, poses = sim.room_scene(), sim.room_poses(args.n_scans or 8, seed=args.seed + 7)
        sensor = sim.SensorModel()
    else:
        scene, poses = sim.board_scene(0.0, 30.0), sim.board_poses(args.n_scans or 5)
        sensor = sim.SensorModel(n_azimuth=2048, n_elevation=64, fov_azimuth_deg=360.0, fov_elevation_deg=30.0)
    sensor = sim.SensorModel(sensor.n_azimuth, sensor.n_elevation, sensor.fov_azimuth_deg,
                             sensor.fov_elevation_deg, sensor.max_range, args.noise_std, bias, args.seed)
    scans, truths = sim.simulate_sequence(scene, poses, sensor)
    noisy = sim.perturb_poses(poses, args.pose_noise_t, math.radians(args.pose_noise_r),
                              seed=args.seed, keep_first=True)
    ids = [f"{k:03d}" for k in range(len(scans))]
    with staged_outputs(out) as stage:
        tmp = stage(out)
        save_dataset(tmp, ids, [s.points for s in scans], noisy, truths, scene, binary=not args.ascii)
        write_poses(tmp / "truth_poses.csv", ids, poses)
    print(f"wrote {len(scans)} scans ({sum(len(s) for s in scans)} points) to {out}")


def _run_config(args) -> RunConfig:
    cfg = load_config(args.config) if getattr(args, "config", None) else RunConfig()
    overrides = {}
    if getattr(args, "loss", None):
        overrides["loss"] = args.loss
    if getattr(args, "pose_mode", None):
        overrides["pose_mode"] = args.pose_mode
    if getattr(args, "iterations", None):
        overrides["iterations"] = args.iterations
    return cfg.with_overrides(**overrides) if overrides else cfg


def cmd_train(args) -> None:
    cfg = _run_config(args)
    data = load_dataset_dir(args.data, cfg.d_min)
    result = train(data.scans, data.poses, cfg.optimization, cfg.filter, BiasModel(cfg.model_kind))
    out = Path(args.out)
    corr_path, loss_path, report_path = (_sibling(out, s) for s in ("_corrections.csv", "_loss.csv", "_report.json"))
    with staged_outputs(out, corr_path, loss_path, report_path) as stage:
        save_model(result.model, stage(out))
        write_csv(stage(corr_path), ["scan_id", "tx", "ty", "tz", "rx", "ry", "rz"],
                  [[sid, *map(float, p)] for sid, p in zip(data.scan_ids, result.corrections)])
        write_csv(stage(loss_path), ["iteration", "train_loss", "validation_loss"],
                  [[i, float(a), float(b)] for i, (a, b) in enumerate(zip(result.train_loss, result.validation_loss))])
        report = {
            "model": model_to_dict(result.model),
            "best_iteration": result.best_iteration,
            "best_validation_loss": result.validation_loss[result.best_iteration],
            "initial_validation_loss": result.validation_loss[0],
            "train_scans": [data.scan_ids[k] for k in result.train_scans],
            "validation_scans": [data.scan_ids[k] for k in result.validation_scans],
            "corrections": {sid: list(map(float, p)) for sid, p in zip(data.scan_ids, result.corrections)},
            "diagnostics": result.diagnostics,
            "config": cfg.to_dict(),
        }
        stage(report_path).write_text(json.dumps(report, indent=2) + "\n")
    print(f"model {result.model.kind.value} w1={result.model.w[0]!r} w2={result.model.w[1]!r} "
          f"(best iteration {result.best_iteration})")


def _read_corrections(path, data: Dataset) -> np.ndarray:
    out = np.zeros((len(data), 6))
    if path is None:
        return out
    import csv

    with open(path, newline="") as fh:
        rows = {r["scan_id"]: r for r in csv.DictReader(fh)}
    for k, sid in enumerate(data.scan_ids):
        if sid in rows:
            out[k] = [float(rows[sid][c]) for c in ("tx", "ty", "tz", "rx", "ry", "rz")]
    return out


def _incidence_problem(data: Dataset, cfg: RunConfig, model: BiasModel, corrections: np.ndarray) -> MapProblem:
    """Map problem over all scans with incidence refreshed once at the given parameters."""
    problem = MapProblem(data.scans, data.poses, cfg.filter, model.kind)
    if not model.is_zero or np.any(corrections):
        problem.evaluate(model.w, corrections, cfg.optimization.loss, gradients=False, refresh=True)
    return problem


def cmd_correct(args) -> None:
    cfg = _run_config(args)
    data = load_dataset_dir(args.data, cfg.d_min)
    model = load_model(args.model)
    corrections = _read_corrections(args.corrections, data)
    problem = _incidence_problem(data, cfg, model, corrections)
    out = Path(args.out)
    _check_outdir(out)
    points, truths, n_invalid = [], [], 0
    for k, (raw, scan) in enumerate(zip(data.raw_points, problem.scans)):
        fixed = correct_scan(scan, model)
        n_invalid += int(np.count_nonzero(~fixed.valid))
        delta = np.where(fixed.valid, fixed.depths - scan.depths, 0.0)
        moved = raw + delta[:, None] * scan.directions
        # untouched points are copied bit for bit
        points.append(np.where((delta == 0.0)[:, None], raw, moved)[fixed.valid])
        if data.truth is not None:
            t = data.truth[k]
            truths.append(sim.GroundTruth(t.depth_true[fixed.valid], t.incidence_true[fixed.valid],
                                          t.patch_id[fixed.valid]))
    poses = [corrected_pose(T, p) for T, p in zip(data.poses, corrections)]
    with staged_outputs(out) as stage:
        tmp = stage(out)
        save_dataset(tmp, data.scan_ids, points, poses, truths or None, data.scene)
    print(f"wrote corrected scans to {out} ({n_invalid} points invalidated)")


def cmd_eval(args) -> None:
    cfg = _run_config(args)
    data = load_dataset_dir(args.data, cfg.d_min)
    model = load_model(args.model) if args.model else BiasModel(cfg.model_kind)
    corrections = _read_corrections(args.corrections, data)
    problem = _incidence_problem(data, cfg, model, corrections)
    from .map_index import build_map, compute_local_stats

    gmap = compute_local_stats(build_map(problem.scans, problem.poses, corrections, model,
                                         neighborhoods=problem.neighborhoods))
    nbr, flat, disp = filter_masks(gmap.stats, cfg.filter)
    mask = nbr & flat & disp
    rows = [["n_points", len(gmap)], ["n_valid", int(gmap.valid.sum())], ["n_enough_neighbors", int(nbr.sum())],
            ["n_flat", int(flat.sum())], ["n_dispersed", int(disp.sum())], ["n_selected", int(mask.sum())]]
    for kind in LossKind:
        rows.append([f"loss_{kind.value}", map_loss(gmap, mask, kind).value if mask.any() else math.nan])
    out = Path(args.out)
    targets = [out]
    plane_rows = None
    if data.truth is not None and data.scene is not None:
        errors = sim.plane_errors(data.scene, gmap.points, gmap.directions,
                                  patch_id=np.concatenate([t.patch_id for t in data.truth]))
        ok = gmap.valid & np.isfinite(errors.range_error)
        rows.append(["mean_abs_range_error", float(np.abs(errors.range_error[ok]).mean())])
        rows.append(["rms_range_error", float(np.sqrt((errors.range_error[ok] ** 2).mean()))])
        plane_rows = sim.point_to_plane_report(errors, np.arange(0.0, 90.0 + 1e-9, 5.0))
        targets.append(_sibling(out, "_plane.csv"))
    with staged_outputs(*targets) as stage:
        write_csv(stage(out), ["metric", "value"], rows)
        if plane_rows is not None:
            write_csv(stage(targets[1]), ["angle_lo_deg", "angle_hi_deg", "count", "mean_range_error",
                                          "rms_range_error", "mean_plane_distance", "rms_plane_distance"],
                      [[r.angle_lo_deg, r.angle_hi_deg, r.count, r.mean_range_error, r.rms_range_error,
                        r.mean_plane_distance, r.rms_plane_distance] for r in plane_rows])
    for name, value in rows:
        print(f"{name}: {value}")


def cmd_board(args) -> None:
    gt = load_model(args.gt_model)
    learned = load_model(args.learned_model) if args.learned_model else gt
    rows = sim.board_experiment(_parse_range(args.distances), _parse_range(args.angles), gt, learned)
    out = Path(args.out)
    with staged_outputs(out) as stage:
        write_csv(stage(out), ["distance", "angle_deg", "count", "incidence_deg", "gt_bias", "uncorrected_mean",
                               "uncorrected_rms", "corrected_mean", "corrected_rms"],
                  [[r.distance, r.angle_deg, r.count, r.incidence_deg, r.gt_bias, r.uncorrected_mean,
                    r.uncorrected_rms, r.corrected_mean, r.corrected_rms] for r in rows])
    print(f"wrote {len(rows)} rows to {out}")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="depthcal", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="write a synthetic dataset")
    p.add_argument("--scene", choices=PRESETS, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--bias-kind", choices=[k.value for k in BiasKind], default=BiasKind.SCALED_POLYNOMIAL.value)
    p.add_argument("--w1", type=float, default=0.0)
    p.add_argument("--w2", type=float, default=0.0)
    p.add_argument("--noise-std", type=float, default=0.0, help="depth noise std (m)")
    p.add_argument("--pose-noise-t", type=float, default=0.0, help="translation noise std per axis (m)")
    p.add_argument("--pose-noise-r", type=float, default=0.0, help="rotation noise std per axis (deg)")
    p.add_argument("--n-scans", type=int, default=None)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--ascii", action="store_true", help="write ASCII instead of binary PLY")
    p.set_defaults(func=cmd_simulate)

    for name, func, helptext in (("train", cmd_train, "learn a bias model"),
                                 ("correct", cmd_correct, "apply a bias model to scans"),
                                 ("eval", cmd_eval, "map-consistency metrics")):
        p = sub.add_parser(name, help=helptext)
        p.add_argument("--data", required=True)
        p.add_argument("--config", default=None)
        p.add_argument("--out", required=True)
        p.add_argument("--loss", choices=[k.value for k in LossKind], default=None)
        if name == "train":
            p.add_argument("--pose-mode", choices=["frozen", "per_scan", "shared"], default=None)
            p.add_argument("--iterations", type=int, default=None)
        else:
            p.add_argument("--model", required=(name == "correct"), default=None)
            p.add_argument("--corrections", default=None, help="per-scan corrections CSV from train")
        p.set_defaults(func=func)

    p = sub.add_parser("board", help="simulated board experiment curves")
    p.add_argument("--gt-model", required=True)
    p.add_argument("--learned-model", default=None)
    p.add_argument("--distances", default="5.3,8.6")
    p.add_argument("--angles", default="0:85:5")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_board)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    threads = os.environ.get(THREADS_ENV)
    if threads:
        _kernels.set_threads(int(threads))
    try:
        args.func(args)
    except (DepthCalError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
