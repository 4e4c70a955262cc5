"""Incidence-angle depth bias models and depth correction of scans.

The bias ``eps`` is the amount by which the sensor overestimates depth, so a
corrected depth is ``d - eps(d, gamma)``.  Two models are provided:

* polynomial: ``eps = w1 * gamma**2 + w2 * gamma**4``
* scaled polynomial: ``eps = d * (w1 * gamma**2 + w2 * gamma**4)``
"""

from __future__ import annotations

import enum
import json
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import DomainError, FormatError, InvalidParameterError

logger = logging.getLogger(__name__)

# Tolerance on the upper end of the incidence domain; normal estimates are
# clamped to [0, pi/2] so this only absorbs representation error.
_ANGLE_EPS = 1e-12


class BiasKind(str, enum.Enum):
    POLYNOMIAL = "polynomial"
    SCALED_POLYNOMIAL = "scaled_polynomial"


@dataclass(frozen=True)
class BiasModel:
    kind: BiasKind = BiasKind.SCALED_POLYNOMIAL
    w: tuple[float, float] = (0.0, 0.0)

    def __post_init__(self):
        object.__setattr__(self, "kind", BiasKind(self.kind))
        w = tuple(float(v) for v in self.w)
        if len(w) != 2 or not all(math.isfinite(v) for v in w):
            raise InvalidParameterError(f"bias weights must be two finite numbers, got {self.w}")
        object.__setattr__(self, "w", w)

    @property
    def weights(self) -> np.ndarray:
        return np.array(self.w)

    def with_weights(self, w) -> "BiasModel":
        return replace(self, w=tuple(float(v) for v in w))

    @property
    def is_zero(self) -> bool:
        return self.w == (0.0, 0.0)


def _check_angles(gamma: np.ndarray, domain_check: bool) -> None:
    if domain_check and gamma.size:
        if np.any(~np.isfinite(gamma)) or gamma.min() < 0.0 or gamma.max() > np.pi / 2 + _ANGLE_EPS:
            raise DomainError("incidence angle outside [0, pi/2]")


def bias_basis(kind: BiasKind, d, gamma) -> np.ndarray:
    """Derivative of the bias with respect to ``(w1, w2)``, shape ``(..., 2)``.

    Both models are linear in the weights, so ``eps = bias_basis @ w``.
    """
    d = np.asarray(d, dtype=float)
    g2 = np.asarray(gamma, dtype=float) ** 2
    basis = np.stack(np.broadcast_arrays(g2, g2 * g2), axis=-1)
    if BiasKind(kind) is BiasKind.SCALED_POLYNOMIAL:
        basis = basis * d[..., None]
    return basis


def eval_bias(model: BiasModel, d, gamma, *, domain_check: bool = True):
    """Depth bias in meters for measured depth ``d`` and incidence ``gamma``."""
    gamma_arr = np.asarray(gamma, dtype=float)
    _check_angles(gamma_arr, domain_check)
    eps = bias_basis(model.kind, d, gamma_arr) @ model.weights
    if np.ndim(eps) == 0:
        return float(eps)
    return eps


@dataclass(frozen=True, eq=False)
class ScanCloud:
    """One lidar scan in the sensor frame as ``x = origin + depth * direction``.

    ``incidence`` holds the per-point incidence angle in radians, NaN where no
    normal estimate is available.  ``valid`` marks points usable downstream.
    """

    origins: np.ndarray
    directions: np.ndarray
    depths: np.ndarray
    incidence: np.ndarray | None = None
    valid: np.ndarray | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        n = len(self.depths)
        origins = np.asarray(self.origins, dtype=float).reshape(n, 3)
        directions = np.asarray(self.directions, dtype=float).reshape(n, 3)
        depths = np.asarray(self.depths, dtype=float).reshape(n)
        valid = np.ones(n, bool) if self.valid is None else np.asarray(self.valid, bool).reshape(n)
        object.__setattr__(self, "origins", origins)
        object.__setattr__(self, "directions", directions)
        object.__setattr__(self, "depths", depths)
        object.__setattr__(self, "valid", valid)
        if self.incidence is not None:
            object.__setattr__(self, "incidence", np.asarray(self.incidence, dtype=float).reshape(n))

    @classmethod
    def from_points(cls, points: np.ndarray, **kwargs) -> "ScanCloud":
        """Scan from sensor-frame points with all rays starting at the origin."""
        points = np.asarray(points, dtype=float).reshape(-1, 3)
        depths = np.linalg.norm(points, axis=1)
        with np.errstate(invalid="ignore", divide="ignore"):
            directions = points / depths[:, None]
        return cls(np.zeros_like(points), directions, depths, **kwargs)

    def __len__(self) -> int:
        return len(self.depths)

    @property
    def points(self) -> np.ndarray:
        return self.origins + self.depths[:, None] * self.directions

    def with_incidence(self, incidence: np.ndarray) -> "ScanCloud":
        return replace(self, incidence=np.asarray(incidence, dtype=float))

    def validate(self, tol: float = 1e-9) -> None:
        norms = np.linalg.norm(self.directions, axis=1)
        if np.any(np.abs(norms - 1.0) > tol):
            raise InvalidParameterError("scan directions must be unit vectors")
        if np.any(~(self.depths > 0)):
            raise InvalidParameterError("scan depths must be positive")


def corrected_depths(scan: ScanCloud, model: BiasModel) -> tuple[np.ndarray, np.ndarray]:
    """Corrected depths and the mask of points the correction applies to.

    Points without an incidence estimate keep their measured depth.
    """
    if scan.incidence is None:
        has_angle = np.zeros(len(scan), bool)
    else:
        has_angle = np.isfinite(scan.incidence)
    depths = scan.depths.copy()
    if model.is_zero or not has_angle.any():
        return depths, has_angle
    gamma = scan.incidence[has_angle]
    _check_angles(gamma, True)
    depths[has_angle] -= eval_bias(model, scan.depths[has_angle], gamma, domain_check=False)
    return depths, has_angle


def correct_scan(scan: ScanCloud, model: BiasModel) -> ScanCloud:
    """Apply the depth correction; points whose depth would become non-positive are invalidated."""
    depths, _ = corrected_depths(scan, model)
    if model.is_zero:
        return scan
    bad = ~(depths > 0)
    n_bad = int(np.count_nonzero(bad & scan.valid))
    if n_bad:
        logger.warning("depth correction invalidated %d points (corrected depth <= 0)", n_bad)
    # invalidated points keep their measured depth so the cloud stays well formed
    depths = np.where(bad, scan.depths, depths)
    meta = dict(scan.meta, invalidated=n_bad)
    return replace(scan, depths=depths, valid=scan.valid & ~bad, meta=meta)


def d_corrected_point_d_weights(scan: ScanCloud, model: BiasModel, i: int) -> np.ndarray:
    """Jacobian ``(3, 2)`` of the corrected point ``i`` w.r.t. ``(w1, w2)``.

    The incidence angle is treated as a constant input.
    """
    gamma = np.nan if scan.incidence is None else scan.incidence[i]
    if not np.isfinite(gamma):
        return np.zeros((3, 2))
    basis = bias_basis(model.kind, scan.depths[i], gamma)
    return -np.outer(scan.directions[i], basis)


def save_model(model: BiasModel, path) -> None:
    text = json.dumps(model_to_dict(model), indent=2)
    Path(path).write_text(text + "\n")


def model_to_dict(model: BiasModel) -> dict:
    return {"kind": model.kind.value, "w1": float(model.w[0]), "w2": float(model.w[1])}


def load_model(path) -> BiasModel:
    """Read a model file with keys ``kind``, ``w1``, ``w2``."""
    try:
        data = json.loads(Path(path).read_text())
        if set(data) != {"kind", "w1", "w2"}:
            raise FormatError(f"{path}: model file needs exactly the keys kind, w1, w2")
        return BiasModel(BiasKind(data["kind"]), (float(data["w1"]), float(data["w2"])))
    except (json.JSONDecodeError, TypeError, ValueError) as exc:
        if isinstance(exc, FormatError):
            raise
        raise FormatError(f"{path}: malformed model file ({exc})") from exc
