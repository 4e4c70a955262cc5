"""Dataset files: PLY scans, pose CSV, ground-truth sidecars.

Directory layout of a dataset::

    DIR/poses.csv          scan_id,tx,ty,tz,qx,qy,qz,qw  (sensor -> global)
    DIR/scans/<id>.ply     sensor-frame points, vertex x,y,z
    DIR/truth.csv          optional simulator sidecar
    DIR/scene.json         optional simulator scene (planar patches)
"""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from plyfile import PlyData, PlyElement

from .depth_model import ScanCloud
from .errors import ConfigurationError, FormatError
from .geometry import RigidTransform
from .simulator import GroundTruth, Patch, Scene

logger = logging.getLogger(__name__)

POSE_HEADER = ["scan_id", "tx", "ty", "tz", "qx", "qy", "qz", "qw"]
TRUTH_HEADER = ["scan_id", "point_index", "depth_true", "incidence_true", "patch_id"]
QUAT_TOL = 1e-3


def _sort_key(scan_id: str):
    return (0, int(scan_id), "") if scan_id.isdigit() else (1, 0, scan_id)


# -- PLY ---------------------------------------------------------------------


def write_ply(path, points: np.ndarray, binary: bool = True) -> None:
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    vertex = np.empty(len(points), dtype=[("x", "<f8"), ("y", "<f8"), ("z", "<f8")])
    vertex["x"], vertex["y"], vertex["z"] = points.T
    PlyData([PlyElement.describe(vertex, "vertex")], text=not binary, byte_order="<").write(str(path))


def read_ply(path) -> np.ndarray:
    """Vertex ``x, y, z`` as an ``(n, 3)`` float array; other properties are ignored."""
    try:
        ply = PlyData.read(str(path))
    except FileNotFoundError:
        raise
    except Exception as exc:
        raise FormatError(f"{path}: unreadable PLY ({exc})") from exc
    try:
        vertex = ply["vertex"]
    except KeyError:
        raise FormatError(f"{path}: PLY has no vertex element") from None
    names = {p.name for p in vertex.properties}
    missing = {"x", "y", "z"} - names
    if missing:
        raise FormatError(f"{path}: vertex element lacks {sorted(missing)}")
    data = vertex.data
    return np.stack([np.asarray(data[a], dtype=np.float64) for a in "xyz"], axis=1)


# -- poses -------------------------------------------------------------------


def write_poses(path, scan_ids, poses) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(POSE_HEADER)
        for sid, pose in zip(scan_ids, poses):
            q = pose.as_quaternion()
            w.writerow([sid, *map(repr, map(float, pose.translation)), *map(repr, map(float, q))])


def read_poses(path) -> dict[str, RigidTransform]:
    """Pose table keyed by scan id; quaternions must be unit within 1e-3."""
    out: dict[str, RigidTransform] = {}
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != POSE_HEADER:
            raise FormatError(f"{path}: pose header must be {','.join(POSE_HEADER)}")
        for line_no, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(POSE_HEADER):
                raise FormatError(f"{path}:{line_no}: expected {len(POSE_HEADER)} fields")
            sid = row[0].strip()
            try:
                vals = np.array([float(v) for v in row[1:]])
            except ValueError as exc:
                raise FormatError(f"{path}:{line_no}: {exc}") from None
            if not np.all(np.isfinite(vals)):
                raise FormatError(f"{path}:{line_no}: non-finite pose value")
            q = vals[3:]
            norm = float(np.linalg.norm(q))
            if abs(norm - 1.0) > QUAT_TOL:
                raise FormatError(f"{path}:{line_no}: quaternion norm {norm:.6f} is not 1")
            if sid in out:
                raise FormatError(f"{path}:{line_no}: duplicate scan id {sid!r}")
            out[sid] = RigidTransform.from_quaternion(vals[:3], q / norm)
    return out


# -- ground truth sidecar ----------------------------------------------------


def write_truth(path, scan_ids, truths) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(TRUTH_HEADER)
        for sid, t in zip(scan_ids, truths):
            for i in range(len(t.depth_true)):
                w.writerow([sid, i, repr(float(t.depth_true[i])), repr(float(t.incidence_true[i])), int(t.patch_id[i])])


def read_truth(path) -> dict[str, GroundTruth]:
    rows: dict[str, list] = {}
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != TRUTH_HEADER:
            raise FormatError(f"{path}: truth header must be {','.join(TRUTH_HEADER)}")
        for row in reader:
            rows.setdefault(row["scan_id"], []).append(
                (int(row["point_index"]), float(row["depth_true"]), float(row["incidence_true"]), int(row["patch_id"])))
    out = {}
    for sid, items in rows.items():
        items.sort()
        arr = np.array(items, dtype=float)
        out[sid] = GroundTruth(arr[:, 1], arr[:, 2], arr[:, 3].astype(int))
    return out


def scene_to_dict(scene: Scene) -> dict:
    return {"name": scene.name, "patches": [
        {"name": p.name, "center": p.center.tolist(), "normal": p.normal.tolist(),
         "axis_u": p.axis_u.tolist(), "half_u": p.half_u, "half_v": p.half_v}
        for p in scene.patches]}


def scene_from_dict(data: dict) -> Scene:
    try:
        return Scene(tuple(Patch(np.array(p["center"]), np.array(p["normal"]), np.array(p["axis_u"]),
                                 float(p["half_u"]), float(p["half_v"]), p.get("name", ""))
                           for p in data["patches"]), data.get("name", ""))
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"malformed scene description ({exc})") from exc


# -- datasets ----------------------------------------------------------------


@dataclass
class Dataset:
    """Ordered scans with their poses.

    ``source_index[k]`` maps points of scan ``k`` back to rows of its PLY
    file (and of the ground-truth sidecar), since loading drops points.
    """

    scan_ids: list[str]
    scans: list[ScanCloud]
    poses: list[RigidTransform]
    raw_points: list[np.ndarray]
    source_index: list[np.ndarray]
    truth: list[GroundTruth] | None = None
    scene: Scene | None = None
    dropped: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.scans)


def scan_from_points(points: np.ndarray, d_min: float = 0.5):
    """ScanCloud with origins at zero, plus the kept row indices and the drop count."""
    finite = np.all(np.isfinite(points), axis=1)
    depth = np.linalg.norm(np.where(finite[:, None], points, 0.0), axis=1)
    keep = finite & (depth >= d_min) & (depth > 0)
    idx = np.flatnonzero(keep)
    pts = points[idx]
    d = depth[idx]
    scan = ScanCloud(np.zeros_like(pts), pts / d[:, None], d)
    return scan, idx, int(len(points) - len(idx))


def load_dataset(scan_dir, poses_file, d_min: float = 0.5, truth_file=None, scene_file=None) -> Dataset:
    """Load ``<scan_id>.ply`` files for every row of the pose table."""
    scan_dir = Path(scan_dir)
    table = read_poses(poses_file)
    ids = sorted(table, key=_sort_key)
    if len(ids) < 2:
        raise ConfigurationError("a dataset needs at least 2 scans")
    scans, raws, index, dropped = [], [], [], {}
    for sid in ids:
        path = scan_dir / f"{sid}.ply"
        if not path.exists():
            raise FormatError(f"missing scan file for scan id {sid!r}: {path}")
        pts = read_ply(path)
        scan, idx, n_drop = scan_from_points(pts, d_min)
        if n_drop:
            logger.info("scan %s: dropped %d points (non-finite or closer than %.2f m)", sid, n_drop, d_min)
        scans.append(scan)
        raws.append(pts[idx])
        index.append(idx)
        dropped[sid] = n_drop
    truth = None
    if truth_file is not None and Path(truth_file).exists():
        table_t = read_truth(truth_file)
        truth = []
        for sid, idx in zip(ids, index):
            t = table_t.get(sid)
            if t is None or len(t.depth_true) <= (idx.max() if idx.size else -1):
                raise FormatError(f"{truth_file}: no ground truth rows for scan {sid!r}")
            truth.append(GroundTruth(t.depth_true[idx], t.incidence_true[idx], t.patch_id[idx]))
    scene = None
    if scene_file is not None and Path(scene_file).exists():
        scene = scene_from_dict(json.loads(Path(scene_file).read_text()))
    return Dataset(ids, scans, [table[s] for s in ids], raws, index, truth, scene, dropped)


def load_dataset_dir(path, d_min: float = 0.5) -> Dataset:
    path = Path(path)
    if not (path / "poses.csv").exists():
        raise FormatError(f"{path}: no poses.csv")
    return load_dataset(path / "scans", path / "poses.csv", d_min,
                        truth_file=path / "truth.csv", scene_file=path / "scene.json")


def save_dataset(path, scan_ids, points_per_scan, poses, truths=None, scene: Scene | None = None,
                 binary: bool = True) -> None:
    path = Path(path)
    (path / "scans").mkdir(parents=True, exist_ok=True)
    for sid, pts in zip(scan_ids, points_per_scan):
        write_ply(path / "scans" / f"{sid}.ply", pts, binary=binary)
    write_poses(path / "poses.csv", scan_ids, poses)
    if truths is not None:
        write_truth(path / "truth.csv", scan_ids, truths)
    if scene is not None:
        (path / "scene.json").write_text(json.dumps(scene_to_dict(scene), indent=2) + "\n")


def write_csv(path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for row in rows:
            w.writerow([_cell(v) for v in row])


def _cell(value):
    """Shortest round-tripping text for floats, plain ints for numpy integers."""
    if isinstance(value, (bool, np.bool_)):
        return int(value)
    if isinstance(value, (np.integer,)):
        return int(value)
    if isinstance(value, (float, np.floating)):
        return repr(float(value)) if math.isfinite(value) else str(float(value))
    return value
