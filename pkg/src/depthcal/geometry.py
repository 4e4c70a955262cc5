"""Rigid transforms, the 6-vector pose correction and its derivatives.

A pose correction ``p = [tx, ty, tz, rx, ry, rz]`` holds a translation in
meters and an axis-angle rotation (angle times unit axis) in radians.  It is
composed on the right of an initial pose, ``T_hat = T @ exp_correction(p)``,
so the correction acts in the sensor frame.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial.transform import Rotation

from .errors import InvalidParameterError

SMALL_ANGLE = 1e-8
ORTHO_TOL = 1e-9


def skew(v: np.ndarray) -> np.ndarray:
    """Cross-product matrix ``[v]x`` such that ``skew(a) @ b == cross(a, b)``."""
    x, y, z = v
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


@dataclass(frozen=True, eq=False)
class RigidTransform:
    """Rotation matrix plus translation, mapping ``x -> R x + t``."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        rot = np.array(self.rotation, dtype=float).reshape(3, 3)
        trans = np.array(self.translation, dtype=float).reshape(3)
        if not (np.all(np.isfinite(rot)) and np.all(np.isfinite(trans))):
            raise InvalidParameterError("rigid transform has non-finite entries")
        if not (np.allclose(rot.T @ rot, np.eye(3), atol=ORTHO_TOL, rtol=0.0)
                and abs(np.linalg.det(rot) - 1.0) <= ORTHO_TOL):
            raise InvalidParameterError("rotation is not orthonormal with unit determinant")
        rot.flags.writeable = False
        trans.flags.writeable = False
        object.__setattr__(self, "rotation", rot)
        object.__setattr__(self, "translation", trans)

    @classmethod
    def identity(cls) -> "RigidTransform":
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_matrix(cls, m: np.ndarray) -> "RigidTransform":
        m = np.asarray(m, dtype=float)
        return cls(m[:3, :3], m[:3, 3])

    @classmethod
    def from_quaternion(cls, translation, quat_xyzw) -> "RigidTransform":
        """Build from a unit quaternion in ``(x, y, z, w)`` order."""
        rot = Rotation.from_quat(np.asarray(quat_xyzw, dtype=float)).as_matrix()
        return cls(rot, translation)

    def as_quaternion(self) -> np.ndarray:
        """Unit quaternion ``(x, y, z, w)`` with ``w >= 0``."""
        q = Rotation.from_matrix(self.rotation).as_quat()
        return -q if q[3] < 0 else q

    def as_matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    def apply(self, x: np.ndarray) -> np.ndarray:
        """Transform one point ``(3,)`` or a batch ``(n, 3)``."""
        x = np.asarray(x, dtype=float)
        return x @ self.rotation.T + self.translation

    def compose(self, other: "RigidTransform") -> "RigidTransform":
        """``self @ other``: apply ``other`` first, then ``self``."""
        return RigidTransform(
            self.rotation @ other.rotation,
            self.rotation @ other.translation + self.translation,
        )

    def inverse(self) -> "RigidTransform":
        rt = self.rotation.T
        return RigidTransform(rt, -rt @ self.translation)

    def __matmul__(self, other: "RigidTransform") -> "RigidTransform":
        return self.compose(other)

    def is_valid(self, tol: float = 1e-9) -> bool:
        r = self.rotation
        return bool(
            np.allclose(r.T @ r, np.eye(3), atol=tol, rtol=0.0)
            and abs(np.linalg.det(r) - 1.0) <= tol
        )


def compose(a: RigidTransform, b: RigidTransform) -> RigidTransform:
    return a.compose(b)


def apply(t: RigidTransform, x: np.ndarray) -> np.ndarray:
    return t.apply(x)


def _check_correction(p) -> np.ndarray:
    p = np.asarray(p, dtype=float).reshape(-1)
    if p.shape != (6,):
        raise InvalidParameterError(f"pose correction must have 6 entries, got {p.shape}")
    if not np.all(np.isfinite(p)):
        raise InvalidParameterError("pose correction has non-finite entries")
    return p


def rotation_from_axis_angle(phi: np.ndarray) -> np.ndarray:
    """Rodrigues' formula, with a second-order expansion near zero."""
    phi = np.asarray(phi, dtype=float)
    theta = float(np.linalg.norm(phi))
    k = skew(phi)
    if theta < SMALL_ANGLE:
        return np.eye(3) + k + 0.5 * (k @ k)
    a = np.sin(theta) / theta
    b = (1.0 - np.cos(theta)) / theta**2
    return np.eye(3) + a * k + b * (k @ k)


def right_jacobian(phi: np.ndarray) -> np.ndarray:
    """Right Jacobian ``J_r`` of SO(3) at axis-angle ``phi``.

    ``R(phi + d) ~= R(phi) @ exp(J_r(phi) @ d)`` for small ``d``.
    """
    phi = np.asarray(phi, dtype=float)
    theta = float(np.linalg.norm(phi))
    k = skew(phi)
    if theta < 1e-4:
        # series terms beyond k^2 are below 1e-17 here
        return np.eye(3) - 0.5 * k + (1.0 / 6.0) * (k @ k)
    a = (1.0 - np.cos(theta)) / theta**2
    b = (theta - np.sin(theta)) / theta**3
    return np.eye(3) - a * k + b * (k @ k)


def exp_correction(p) -> RigidTransform:
    """Rigid transform of a 6-vector correction ``[t, theta * e]``."""
    p = _check_correction(p)
    return RigidTransform(rotation_from_axis_angle(p[3:]), p[:3])


def corrected_pose(t0: RigidTransform, p) -> RigidTransform:
    """Initial pose with the correction composed on the right."""
    return t0.compose(exp_correction(p))


def d_transformed_point_d_correction(t0: RigidTransform, p, x) -> np.ndarray:
    """Jacobian ``(3, 6)`` of ``(t0 @ exp_correction(p)) x`` with respect to ``p``."""
    p = _check_correction(p)
    x = np.asarray(x, dtype=float).reshape(3)
    r = rotation_from_axis_angle(p[3:])
    jac = np.empty((3, 6))
    jac[:, :3] = t0.rotation
    jac[:, 3:] = -t0.rotation @ r @ skew(x) @ right_jacobian(p[3:])
    return jac


def pullback_point_gradients(
    t0: RigidTransform, p, local_points: np.ndarray, grads: np.ndarray
) -> np.ndarray:
    """Sum over points of ``J_i^T g_i`` for the Jacobian above, without forming it.

    ``local_points`` are the points before the correction is applied (sensor
    frame), ``grads`` the loss gradients at the transformed points.
    """
    p = _check_correction(p)
    r = rotation_from_axis_angle(p[3:])
    g_sum = grads.sum(axis=0)
    # h_i = (R0 R)^T g_i, torque-like term sum_i y_i x h_i
    h = grads @ (t0.rotation @ r)
    torque = np.cross(local_points, h).sum(axis=0)
    out = np.empty(6)
    out[:3] = t0.rotation.T @ g_sum
    out[3:] = right_jacobian(p[3:]).T @ torque
    return out
