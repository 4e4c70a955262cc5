"""Fused global map, frozen radius neighborhoods, local PCA statistics and point filters."""

from __future__ import annotations

import logging
from dataclasses import dataclass, replace

import numpy as np

from . import _kernels
from .depth_model import BiasModel, ScanCloud, bias_basis, corrected_depths
from .errors import ConfigurationError, InvalidParameterError
from .geometry import RigidTransform, corrected_pose

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class FilterConfig:
    """Neighborhood radius and the thresholds of the three point filters.

    Attributes:
        radius: neighborhood radius in meters.
        n_min: minimum neighborhood size (the point itself included).
        c0: upper bound on lambda1 / lambda2.
        c1, c2: bounds on lambda2 / lambda3.
        sigma_min: minimum viewpoint dispersion in m^2.
    """

    radius: float = 0.25
    n_min: int = 10
    c0: float = 0.25
    c1: float = 0.25
    c2: float = 1.0
    sigma_min: float = 0.36

    def __post_init__(self):
        if not self.radius > 0:
            raise InvalidParameterError("radius must be positive")
        if self.n_min < 3:
            raise InvalidParameterError("n_min must be at least 3")
        if not 0 < self.c0 <= 1:
            raise InvalidParameterError("c0 must lie in (0, 1]")
        if not 0 <= self.c1 <= self.c2 <= 1:
            raise InvalidParameterError("need 0 <= c1 <= c2 <= 1")
        if not self.sigma_min >= 0:
            raise InvalidParameterError("sigma_min must be non-negative")


@dataclass(frozen=True, eq=False)
class Neighborhoods:
    """Neighbor index lists in CSR layout; row ``i`` is ``indices[indptr[i]:indptr[i+1]]``."""

    indptr: np.ndarray
    indices: np.ndarray
    radius: float

    def __len__(self) -> int:
        return len(self.indptr) - 1

    def __getitem__(self, i: int) -> np.ndarray:
        return self.indices[self.indptr[i]:self.indptr[i + 1]]

    @property
    def sizes(self) -> np.ndarray:
        return np.diff(self.indptr)

    def rows(self) -> np.ndarray:
        """Row index of every stored entry."""
        return np.repeat(np.arange(len(self), dtype=np.int64), self.sizes)


@dataclass(frozen=True, eq=False)
class LocalStats:
    """Per-point PCA of the neighborhood; see :func:`compute_local_stats`."""

    count: np.ndarray
    mean: np.ndarray
    cov: np.ndarray
    eigvals: np.ndarray
    eigvecs: np.ndarray
    normal: np.ndarray
    incidence: np.ndarray
    dispersion: np.ndarray
    available: np.ndarray


@dataclass(frozen=True, eq=False)
class GlobalMap:
    """Corrected scans fused in the global frame.

    Points of scan ``k`` occupy ``scan_offsets[k]:scan_offsets[k+1]`` in scan
    order, so map index ``scan_offsets[k] + i`` is point ``i`` of scan ``k``.
    """

    points: np.ndarray
    local_points: np.ndarray
    directions: np.ndarray
    origins: np.ndarray
    depths: np.ndarray
    incidence: np.ndarray
    valid: np.ndarray
    scan_ids: np.ndarray
    scan_offsets: np.ndarray
    scan_origins: np.ndarray
    poses: tuple[RigidTransform, ...]
    corrections: np.ndarray
    model: BiasModel
    neighborhoods: Neighborhoods | None = None
    stats: LocalStats | None = None

    def __len__(self) -> int:
        return len(self.points)

    @property
    def n_scans(self) -> int:
        return len(self.scan_offsets) - 1

    def scan_slice(self, k: int) -> slice:
        return slice(int(self.scan_offsets[k]), int(self.scan_offsets[k + 1]))

    def bias_basis(self) -> np.ndarray:
        """``d eps / d w`` per map point; zero where no correction applies."""
        has = np.isfinite(self.incidence) & self.valid
        out = np.zeros((len(self), 2))
        out[has] = bias_basis(self.model.kind, self.depths[has], self.incidence[has])
        return out

    def split_by_scan(self, values: np.ndarray) -> list[np.ndarray]:
        return [values[self.scan_slice(k)] for k in range(self.n_scans)]


def build_map(scans, poses, corrections=None, model: BiasModel | None = None,
              neighborhoods: Neighborhoods | None = None, min_scans: int = 2) -> GlobalMap:
    """Correct every scan with ``model``, move it by ``pose_k @ exp(p_k)`` and stack.

    Each scan's ``incidence`` drives its depth correction.  Passing frozen
    ``neighborhoods`` reuses them (point counts must match).
    """
    k = len(scans)
    if k < min_scans:
        raise ConfigurationError("map consistency needs multiple view-points (at least 2 scans)")
    if len(poses) != k:
        raise ConfigurationError("need exactly one pose per scan")
    model = model if model is not None else BiasModel()
    corrections = np.zeros((k, 6)) if corrections is None else np.asarray(corrections, float).reshape(k, 6)

    pts, loc, dirs, orgs, deps, inc, val, ids = [], [], [], [], [], [], [], []
    offsets = np.zeros(k + 1, np.int64)
    scan_origins = np.zeros((k, 3))
    for s_idx, (scan, pose) in enumerate(zip(scans, poses)):
        t = corrected_pose(pose, corrections[s_idx])
        depths, _ = corrected_depths(scan, model)
        ok = scan.valid & (depths > 0)
        n_bad = int(np.count_nonzero(scan.valid & ~(depths > 0)))
        if n_bad:
            logger.warning("scan %d: %d points invalid after correction", s_idx, n_bad)
        depths = np.where(ok, depths, scan.depths)
        local = scan.origins + depths[:, None] * scan.directions
        pts.append(t.apply(local))
        loc.append(local)
        dirs.append(scan.directions @ t.rotation.T)
        orgs.append(t.apply(scan.origins))
        deps.append(scan.depths)
        inc.append(scan.incidence if scan.incidence is not None else np.full(len(scan), np.nan))
        val.append(ok)
        ids.append(np.full(len(scan), s_idx, np.int64))
        offsets[s_idx + 1] = offsets[s_idx] + len(scan)
        scan_origins[s_idx] = t.translation
    gmap = GlobalMap(
        points=np.ascontiguousarray(np.concatenate(pts)),
        local_points=np.concatenate(loc),
        directions=np.concatenate(dirs),
        origins=np.concatenate(orgs),
        depths=np.concatenate(deps),
        incidence=np.concatenate(inc),
        valid=np.concatenate(val),
        scan_ids=np.concatenate(ids),
        scan_offsets=offsets,
        scan_origins=scan_origins,
        poses=tuple(poses),
        corrections=corrections,
        model=model,
    )
    if neighborhoods is not None:
        if len(neighborhoods) != len(gmap):
            raise ConfigurationError("frozen neighborhoods do not match the map size")
        gmap = replace(gmap, neighborhoods=neighborhoods)
    return gmap


def radius_search(points: np.ndarray, radius: float) -> Neighborhoods:
    indptr, indices = _kernels.radius_neighbors(points, radius)
    return Neighborhoods(indptr, indices, float(radius))


def freeze_neighborhoods(gmap: GlobalMap, cfg: FilterConfig) -> GlobalMap:
    """Attach the radius-``cfg.radius`` neighbor lists of the current point positions."""
    return replace(gmap, neighborhoods=radius_search(gmap.points, cfg.radius))


def _orient_normals(u1: np.ndarray, directions: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    dots = np.einsum("ij,ij->i", u1, directions)
    sign = np.where(dots > 0, -1.0, 1.0)
    normal = u1 * sign[:, None]
    gamma = np.arccos(np.clip(np.abs(dots), 0.0, 1.0))
    return normal, gamma


def local_stats(points, valid, neighborhoods: Neighborhoods, directions, scan_ids, scan_origins) -> LocalStats:
    counts, means, covs, dispersion = _kernels.neighborhood_stats(
        np.ascontiguousarray(points), np.ascontiguousarray(valid), neighborhoods.indptr,
        neighborhoods.indices, np.ascontiguousarray(scan_ids), np.ascontiguousarray(scan_origins))
    eigvals, eigvecs = _kernels.eigh3_batch(covs)
    np.maximum(eigvals, 0.0, out=eigvals)
    available = (counts >= 3) & valid
    normal, gamma = _orient_normals(eigvecs[:, :, 0], directions)
    normal[~available] = np.nan
    gamma[~available] = np.nan
    return LocalStats(counts, means, covs, eigvals, eigvecs, normal, gamma, dispersion, available)


def compute_local_stats(gmap: GlobalMap) -> GlobalMap:
    """Covariance, eigen-pairs, oriented normal, incidence and viewpoint dispersion per point.

    Statistics use the frozen neighborhoods over the current positions and
    only count valid points.  Points with fewer than 3 valid neighbors are
    marked unavailable and carry NaN normals and incidence angles.
    """
    if gmap.neighborhoods is None:
        raise ConfigurationError("neighborhoods must be frozen before computing statistics")
    stats = local_stats(gmap.points, gmap.valid, gmap.neighborhoods, gmap.directions,
                        gmap.scan_ids, gmap.scan_origins)
    return replace(gmap, stats=stats)


def _safe_ratio(num: np.ndarray, den: np.ndarray) -> np.ndarray:
    out = np.zeros_like(num)
    nz = den > 0
    out[nz] = num[nz] / den[nz]
    return out


def filter_masks(stats: LocalStats, cfg: FilterConfig) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """The enough-neighbors, flatness and viewpoint-dispersion masks separately."""
    lam = stats.eigvals
    r01 = _safe_ratio(lam[:, 0], lam[:, 1])
    r12 = _safe_ratio(lam[:, 1], lam[:, 2])
    nbr = stats.available & (stats.count >= cfg.n_min)
    flat = stats.available & (r01 <= cfg.c0) & (r12 >= cfg.c1) & (r12 <= cfg.c2)
    disp = stats.available & (stats.dispersion >= cfg.sigma_min)
    return nbr, flat, disp


def apply_filters(gmap: GlobalMap | LocalStats, cfg: FilterConfig) -> np.ndarray:
    """Points that have enough neighbors, lie on flat structure and are seen from spread-out viewpoints."""
    stats = gmap.stats if isinstance(gmap, GlobalMap) else gmap
    if stats is None:
        raise ConfigurationError("local statistics must be computed before filtering")
    nbr, flat, disp = filter_masks(stats, cfg)
    return nbr & flat & disp


def estimate_incidence(points: np.ndarray, directions: np.ndarray, radius: float) -> np.ndarray:
    """Incidence angles from PCA normals of a single cloud; NaN with < 3 neighbors."""
    points = np.ascontiguousarray(points, float)
    nb = radius_search(points, radius)
    stats = local_stats(points, np.ones(len(points), bool), nb, directions,
                        np.zeros(len(points), np.int64), np.zeros((1, 3)))
    return stats.incidence


def scan_incidence(gmap: GlobalMap) -> list[np.ndarray]:
    """Per-scan incidence estimates taken from the map normals."""
    if gmap.stats is None:
        raise ConfigurationError("local statistics must be computed first")
    return gmap.split_by_scan(gmap.stats.incidence)


def with_incidence(scans, incidence) -> list[ScanCloud]:
    return [s.with_incidence(g) for s, g in zip(scans, incidence)]
