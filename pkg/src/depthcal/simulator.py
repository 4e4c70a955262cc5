"""Synthetic lidar over planar scenes with known depth bias and pose errors.

The simulator is the ground-truth oracle for the rest of the package: it
casts rays against rectangular patches, injects a bias model so that
correcting with the same model recovers the true depth exactly, and measures
how far points sit from the true surfaces.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .depth_model import BiasKind, BiasModel, ScanCloud, bias_basis, correct_scan
from .errors import InvalidParameterError
from .geometry import RigidTransform, exp_correction
from .map_index import estimate_incidence

BOARD_WIDTH = 0.50
BOARD_HEIGHT = 1.15


@dataclass(frozen=True, eq=False)
class Patch:
    """Rectangle ``center + s * axis_u + t * axis_v`` with ``|s| <= half_u``, ``|t| <= half_v``.

    ``normal`` is the front side; rays arriving from behind do not return.
    """

    center: np.ndarray
    normal: np.ndarray
    axis_u: np.ndarray
    half_u: float
    half_v: float
    name: str = ""

    def __post_init__(self):
        n = np.asarray(self.normal, float)
        u = np.asarray(self.axis_u, float)
        n = n / np.linalg.norm(n)
        u = u - (u @ n) * n
        u = u / np.linalg.norm(u)
        if not (self.half_u > 0 and self.half_v > 0):
            raise InvalidParameterError("patch extents must be positive")
        object.__setattr__(self, "center", np.asarray(self.center, float))
        object.__setattr__(self, "normal", n)
        object.__setattr__(self, "axis_u", u)

    @property
    def axis_v(self) -> np.ndarray:
        return np.cross(self.normal, self.axis_u)

    def transformed(self, t: RigidTransform) -> "Patch":
        return Patch(t.apply(self.center), t.rotation @ self.normal, t.rotation @ self.axis_u,
                     self.half_u, self.half_v, self.name)


@dataclass(frozen=True)
class Scene:
    patches: tuple[Patch, ...]
    name: str = ""

    def transformed(self, t: RigidTransform) -> "Scene":
        return Scene(tuple(p.transformed(t) for p in self.patches), self.name)


@dataclass(frozen=True)
class SensorModel:
    """Regular azimuth/elevation ray grid of a spinning lidar."""

    n_azimuth: int = 256
    n_elevation: int = 64
    fov_azimuth_deg: float = 360.0
    fov_elevation_deg: float = 90.0
    max_range: float = 30.0
    noise_std: float = 0.0
    bias: BiasModel = field(default_factory=BiasModel)
    seed: int = 0

    def __post_init__(self):
        if self.noise_std < 0:
            raise InvalidParameterError("noise std must be non-negative")
        if self.n_azimuth < 1 or self.n_elevation < 1 or self.max_range <= 0:
            raise InvalidParameterError("sensor grid needs positive counts and range")

    def ray_directions(self) -> np.ndarray:
        full_turn = self.fov_azimuth_deg >= 360.0
        half_az = math.radians(self.fov_azimuth_deg) / 2
        az = np.linspace(-half_az, half_az, self.n_azimuth, endpoint=not full_turn)
        if self.n_elevation == 1:
            el = np.zeros(1)
        else:
            half_el = math.radians(self.fov_elevation_deg) / 2
            el = np.linspace(-half_el, half_el, self.n_elevation)
        el_g, az_g = np.meshgrid(el, az, indexing="ij")
        dirs = np.stack([np.cos(el_g) * np.cos(az_g), np.cos(el_g) * np.sin(az_g), np.sin(el_g)], axis=-1)
        dirs = dirs.reshape(-1, 3)
        return dirs / np.linalg.norm(dirs, axis=1, keepdims=True)


@dataclass(frozen=True, eq=False)
class GroundTruth:
    """Per-point sidecar of a simulated scan; never consumed by training."""

    depth_true: np.ndarray
    incidence_true: np.ndarray
    patch_id: np.ndarray


# -- scene presets ---------------------------------------------------------


def _box_faces(lo, hi, gap: float, inward: bool = True, faces=("floor", "ceiling", "x-", "x+", "y-", "y+")):
    """Axis-aligned box faces shrunk by ``gap`` along every edge."""
    lo = np.asarray(lo, float)
    hi = np.asarray(hi, float)
    c = (lo + hi) / 2
    half = (hi - lo) / 2
    s = 1.0 if inward else -1.0
    out = []
    layout = {
        "floor": (2, -1, 0), "ceiling": (2, 1, 0),
        "x-": (0, -1, 1), "x+": (0, 1, 1),
        "y-": (1, -1, 0), "y+": (1, 1, 0),
    }
    for name in faces:
        axis, side, u_axis = layout[name]
        v_axis = 3 - axis - u_axis
        center = c.copy()
        center[axis] = lo[axis] if side < 0 else hi[axis]
        normal = np.zeros(3)
        normal[axis] = -side * s
        u = np.zeros(3)
        u[u_axis] = 1.0
        out.append(Patch(center, normal, u, half[u_axis] - gap, half[v_axis] - gap, name))
    return out


def corridor_scene(length: float = 70.0, width: float = 2.6, height: float = 2.8, seam: float = 0.3) -> Scene:
    """Floor, ceiling and two side walls of a long corridor along +x.

    Neighbouring surfaces are separated by open seams of ``seam`` meters so
    that no neighborhood of the default radius spans two surfaces.
    """
    patches = _box_faces((0.0, -width / 2, 0.0), (length, width / 2, height), seam,
                         faces=("floor", "ceiling", "y-", "y+"))
    # the seam only needs to cut the long edges
    fixed = []
    for p in patches:
        if p.name in ("floor", "ceiling"):
            fixed.append(Patch(p.center, p.normal, p.axis_u, length / 2, p.half_v, p.name))
        else:
            fixed.append(Patch(p.center, p.normal, np.array([1.0, 0, 0]), length / 2, height / 2 - seam, p.name))
    return Scene(tuple(fixed), "corridor")


def corridor_poses(n: int = 10, spacing: float = 2.0, start: float = 25.0, height: float = 1.2,
                   yaw_deg: float = 5.0, lateral: float = 0.15) -> list[RigidTransform]:
    """Stop-and-go sensor poses along the corridor with alternating yaw and lateral offset."""
    poses = []
    for k in range(n):
        sign = 1.0 if k % 2 == 0 else -1.0
        yaw = math.radians(sign * yaw_deg)
        poses.append(RigidTransform(
            exp_correction([0, 0, 0, 0, 0, yaw]).rotation,
            [start + k * spacing, sign * lateral, height],
        ))
    return poses


def room_scene(size=(8.0, 6.0, 3.0), seam: float = 0.3) -> Scene:
    """Closed box room; all six faces, open seams along the edges."""
    return Scene(tuple(_box_faces((0.0, 0.0, 0.0), size, seam)), "room")


def room_poses(n: int = 6, seed: int = 7, size=(8.0, 6.0, 3.0), margin: float = 1.5) -> list[RigidTransform]:
    rng = np.random.default_rng(seed)
    poses = []
    for _ in range(n):
        xy = rng.uniform([margin, margin], [size[0] - margin, size[1] - margin])
        z = rng.uniform(1.0, size[2] - 1.0)
        yaw = rng.uniform(-np.pi, np.pi)
        poses.append(RigidTransform(exp_correction([0, 0, 0, 0, 0, yaw]).rotation, [xy[0], xy[1], z]))
    return poses


def board_scene(distance: float, angle_deg: float) -> Scene:
    """The rotatable calibration board in front of the sensor.

    The board center sits on the sensor's +x axis at ``distance``; the board
    is turned by ``angle_deg`` about the vertical axis through its center.
    """
    a = math.radians(angle_deg)
    normal = np.array([-math.cos(a), -math.sin(a), 0.0])
    axis_u = np.array([-math.sin(a), math.cos(a), 0.0])
    board = Patch(np.array([distance, 0.0, 0.0]), normal, axis_u, BOARD_WIDTH / 2, BOARD_HEIGHT / 2, "board")
    return Scene((board,), "board")


def board_sensor(distance: float, bias: BiasModel | None = None,
                 spacing_h: float = 0.004, spacing_v: float = 0.04) -> SensorModel:
    """Dense narrow-field ray grid covering the board at ``distance``.

    ``spacing_h`` and ``spacing_v`` are the beam spacings (m) at the board.
    """
    fov_az = 2 * math.atan(0.3 / distance)
    fov_el = 2 * math.atan(0.6 / distance)
    return SensorModel(
        n_azimuth=int(math.ceil(fov_az * distance / spacing_h)) + 1,
        n_elevation=int(math.ceil(fov_el * distance / spacing_v)) + 1,
        fov_azimuth_deg=math.degrees(fov_az),
        fov_elevation_deg=math.degrees(fov_el),
        max_range=2 * distance + 5,
        bias=bias if bias is not None else BiasModel(),
    )


def board_poses(n: int = 5, distance: float = 6.0, spread: float = 2.0, height: float = 0.0) -> list[RigidTransform]:
    """Sensor positions on a line facing a board placed at the world origin."""
    poses = []
    for y in np.linspace(-spread, spread, n):
        yaw = math.atan2(-y, distance)
        poses.append(RigidTransform(exp_correction([0, 0, 0, 0, 0, yaw]).rotation, [-distance, y, height]))
    return poses


# -- ray casting -----------------------------------------------------------


def inject_bias(model: BiasModel, depth_true: np.ndarray, gamma: np.ndarray) -> np.ndarray:
    """Measured depths whose correction with ``model`` returns ``depth_true`` exactly.

    NaN where the scaled model would need a non-positive measurement.
    """
    if model.is_zero:
        return depth_true.copy()
    if model.kind is BiasKind.POLYNOMIAL:
        return depth_true + bias_basis(model.kind, depth_true, gamma) @ model.weights
    scale = bias_basis(BiasKind.POLYNOMIAL, depth_true, gamma) @ model.weights
    with np.errstate(divide="ignore", invalid="ignore"):
        out = depth_true / (1.0 - scale)
    out[~(scale < 1.0)] = np.nan
    return out


def intersect(scene: Scene, origin: np.ndarray, dirs: np.ndarray, max_range: float):
    """Nearest front-facing hit per ray: ``(depth, incidence, patch_id)``, NaN/-1 on miss."""
    m = len(dirs)
    best_t = np.full(m, np.inf)
    best_p = np.full(m, -1)
    for pid, patch in enumerate(scene.patches):
        denom = dirs @ patch.normal
        with np.errstate(divide="ignore", invalid="ignore"):
            t = ((patch.center - origin) @ patch.normal) / denom
        hit = np.isfinite(t) & (t > 0) & (t <= max_range)
        rel = origin + t[:, None] * dirs - patch.center
        with np.errstate(invalid="ignore"):
            hit &= np.abs(rel @ patch.axis_u) <= patch.half_u
            hit &= np.abs(rel @ patch.axis_v) <= patch.half_v
        closer = hit & (t < best_t)
        best_t[closer] = t[closer]
        best_p[closer] = pid
    depth = np.where(best_p >= 0, best_t, np.nan)
    incidence = np.full(m, np.nan)
    front = np.zeros(m, bool)
    for pid, patch in enumerate(scene.patches):
        sel = best_p == pid
        cos_g = -(dirs[sel] @ patch.normal)
        front[sel] = cos_g > 0
        incidence[sel] = np.arccos(np.clip(cos_g, 0.0, 1.0))
    # back-face hits occlude but return nothing
    best_p[~front] = -1
    depth[~front] = np.nan
    incidence[~front] = np.nan
    return depth, incidence, best_p


def cast_scan(scene: Scene, pose: RigidTransform, sensor: SensorModel, scan_index: int = 0):
    """Simulate one scan from ``pose`` (sensor to world).

    Returns the measured :class:`ScanCloud` in the sensor frame and its
    :class:`GroundTruth` sidecar.
    """
    dirs = sensor.ray_directions()
    local_scene = scene.transformed(pose.inverse())
    depth, gamma, pid = intersect(local_scene, np.zeros(3), dirs, sensor.max_range)
    hit = pid >= 0
    dirs, depth, gamma, pid = dirs[hit], depth[hit], gamma[hit], pid[hit]
    measured = inject_bias(sensor.bias, depth, gamma)
    if sensor.noise_std > 0:
        rng = np.random.default_rng([sensor.seed, scan_index])
        measured = measured + rng.normal(0.0, sensor.noise_std, size=measured.shape)
    keep = np.isfinite(measured) & (measured > 0)
    scan = ScanCloud(np.zeros((keep.sum(), 3)), dirs[keep], measured[keep])
    truth = GroundTruth(depth[keep], gamma[keep], pid[keep])
    return scan, truth


def simulate_sequence(scene: Scene, poses, sensor: SensorModel):
    """Cast one scan per pose; returns ``(scans, truths)``."""
    scans, truths = [], []
    for k, pose in enumerate(poses):
        s, t = cast_scan(scene, pose, sensor, scan_index=k)
        scans.append(s)
        truths.append(t)
    return scans, truths


def perturb_poses(poses, translation_std: float, rotation_std: float, seed: int = 0,
                  keep_first: bool = False) -> list[RigidTransform]:
    """Right-compose each pose with a Gaussian correction (meters, radians, per axis).

    ``keep_first`` leaves the first pose exact, as the reference frame.
    """
    if translation_std < 0 or rotation_std < 0:
        raise InvalidParameterError("perturbation std must be non-negative")
    rng = np.random.default_rng(seed)
    out = []
    for k, pose in enumerate(poses):
        noise = np.concatenate([rng.normal(0.0, translation_std, 3), rng.normal(0.0, rotation_std, 3)])
        if (k == 0 and keep_first) or (translation_std == 0 and rotation_std == 0):
            out.append(pose)
        else:
            out.append(pose.compose(exp_correction(noise)))
    return out


def pose_errors(estimated, truth) -> tuple[np.ndarray, np.ndarray]:
    """Per-pose translation error (m) and rotation error angle (rad)."""
    t_err, r_err = [], []
    for e, g in zip(estimated, truth):
        t_err.append(np.linalg.norm(e.translation - g.translation))
        rel = g.rotation.T @ e.rotation
        r_err.append(math.acos(min(1.0, max(-1.0, (np.trace(rel) - 1.0) / 2.0))))
    return np.array(t_err), np.array(r_err)


# -- ground-truth error metrics -------------------------------------------


def attribute_points(scene: Scene, points: np.ndarray, max_distance: float = 0.5, margin: float = 0.05):
    """Nearest patch per point within ``max_distance`` of its plane and inside its extents (+margin).

    Returns patch ids, -1 for unattributable points.
    """
    best = np.full(len(points), np.inf)
    ids = np.full(len(points), -1)
    for pid, patch in enumerate(scene.patches):
        rel = points - patch.center
        dist = np.abs(rel @ patch.normal)
        inside = (np.abs(rel @ patch.axis_u) <= patch.half_u + margin) & (np.abs(rel @ patch.axis_v) <= patch.half_v + margin)
        sel = inside & (dist <= max_distance) & (dist < best)
        best[sel] = dist[sel]
        ids[sel] = pid
    return ids


@dataclass
class PlaneErrors:
    """Per-point errors against the true surfaces."""

    patch_id: np.ndarray
    incidence: np.ndarray
    range_error: np.ndarray
    plane_distance: np.ndarray

    @property
    def n_unattributed(self) -> int:
        return int(np.count_nonzero(self.patch_id < 0))


def plane_errors(scene: Scene, points: np.ndarray, directions: np.ndarray, patch_id=None, **kwargs) -> PlaneErrors:
    """Signed errors of world points observed along world ``directions``.

    ``plane_distance`` is the perpendicular distance behind the surface
    (positive when the point lies beyond it as seen by the sensor);
    ``range_error`` is the same offset measured along the beam, i.e. the
    depth excess over the true surface.
    """
    points = np.asarray(points, float)
    ids = attribute_points(scene, points, **kwargs) if patch_id is None else np.asarray(patch_id)
    gamma = np.full(len(points), np.nan)
    rng_err = np.full(len(points), np.nan)
    dist = np.full(len(points), np.nan)
    for pid, patch in enumerate(scene.patches):
        sel = ids == pid
        if not sel.any():
            continue
        s = (points[sel] - patch.center) @ patch.normal
        cos_g = -(directions[sel] @ patch.normal)
        dist[sel] = -s
        with np.errstate(divide="ignore", invalid="ignore"):
            rng_err[sel] = -s / cos_g
        gamma[sel] = np.arccos(np.clip(cos_g, -1.0, 1.0))
    return PlaneErrors(ids, gamma, rng_err, dist)


@dataclass
class PlaneReportRow:
    angle_lo_deg: float
    angle_hi_deg: float
    count: int
    mean_range_error: float
    rms_range_error: float
    mean_plane_distance: float
    rms_plane_distance: float


def point_to_plane_report(errors: PlaneErrors, bin_edges_deg) -> list[PlaneReportRow]:
    """Per incidence-angle bin signed mean and RMS of the errors; empty bins report NaN."""
    edges = np.asarray(bin_edges_deg, float)
    ok = (errors.patch_id >= 0) & np.isfinite(errors.range_error)
    deg = np.degrees(errors.incidence)
    rows = []
    for lo, hi in zip(edges[:-1], edges[1:]):
        sel = ok & (deg >= lo) & (deg < hi)
        n = int(sel.sum())
        if n:
            re, pd_ = errors.range_error[sel], errors.plane_distance[sel]
            rows.append(PlaneReportRow(lo, hi, n, float(re.mean()), float(np.sqrt((re**2).mean())),
                                       float(pd_.mean()), float(np.sqrt((pd_**2).mean()))))
        else:
            rows.append(PlaneReportRow(lo, hi, 0, math.nan, math.nan, math.nan, math.nan))
    return rows


@dataclass
class BoardCurveRow:
    distance: float
    angle_deg: float
    count: int
    incidence_deg: float
    gt_bias: float
    uncorrected_mean: float
    uncorrected_rms: float
    corrected_mean: float
    corrected_rms: float


def board_experiment(distances, angles_deg, gt_model: BiasModel, learned_model: BiasModel,
                     radius: float = 0.1, noise_std: float = 0.0, seed: int = 0,
                     refine: int = 3) -> list[BoardCurveRow]:
    """Range error of a simulated board vs rotation angle, before and after correction.

    The correction uses incidence angles estimated from the board scan
    itself, as a deployed model would.  The bias tilts the measured board,
    so the angles are re-estimated ``refine`` times on the corrected points.
    """
    rows = []
    for dist in distances:
        for angle in angles_deg:
            if not 0.0 <= angle <= 85.0 + 1e-9:
                raise InvalidParameterError("board angles must lie in [0, 85] degrees")
            scene = board_scene(dist, angle)
            sensor = board_sensor(dist, gt_model)
            if noise_std:
                sensor = replace(sensor, noise_std=noise_std, seed=seed)
            scan, truth = cast_scan(scene, RigidTransform.identity(), sensor)
            before = plane_errors(scene, scan.points, scan.directions, patch_id=truth.patch_id)
            gamma = estimate_incidence(scan.points, scan.directions, radius)
            corrected = correct_scan(scan.with_incidence(gamma), learned_model)
            for _ in range(refine):
                gamma = estimate_incidence(corrected.points, scan.directions, radius)
                corrected = correct_scan(scan.with_incidence(gamma), learned_model)
            keep = corrected.valid
            after = plane_errors(scene, corrected.points[keep], corrected.directions[keep],
                                 patch_id=truth.patch_id[keep])
            gt_bias = float(np.mean(bias_basis(gt_model.kind, scan.depths, truth.incidence_true) @ gt_model.weights)) if len(scan) else math.nan

            def stats(e):
                if len(e) == 0:
                    return math.nan, math.nan
                return float(e.mean()), float(np.sqrt((e**2).mean()))

            um, ur = stats(before.range_error)
            cm, cr = stats(after.range_error)
            rows.append(BoardCurveRow(float(dist), float(angle), len(scan),
                                      float(np.degrees(truth.incidence_true.mean())) if len(scan) else math.nan,
                                      gt_bias, um, ur, cm, cr))
    return rows
