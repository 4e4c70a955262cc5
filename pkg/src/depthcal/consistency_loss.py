"""Map-consistency losses and their gradients.

Both losses are functions of the neighborhood covariance ``Q_i`` of a map
point: its smallest eigenvalue (out-of-surface variance) or its trace (total
variance).  The map loss is the mean over the points selected by the filters.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from . import _kernels
from .errors import ConfigurationError, EmptySelectionError, NumericalError
from .geometry import pullback_point_gradients
from .map_index import GlobalMap, LocalStats

GAP_MIN = 1e-8


class LossKind(str, enum.Enum):
    MIN_EIGENVALUE = "min_eig"
    TRACE = "trace"


@dataclass
class LossReport:
    value: float
    contributions: np.ndarray
    count: int
    grad_w: np.ndarray | None = None
    grad_p: np.ndarray | None = None
    point_grad: np.ndarray | None = None
    n_skipped: int = 0


def point_loss(stats: LocalStats, kind: LossKind, index=None):
    """Per-point loss: smallest eigenvalue or trace of the neighborhood covariance."""
    kind = LossKind(kind)
    lam = stats.eigvals if index is None else stats.eigvals[index]
    if kind is LossKind.MIN_EIGENVALUE:
        return lam[..., 0]
    return lam.sum(axis=-1)


def _selected(gmap: GlobalMap, mask: np.ndarray) -> np.ndarray:
    if gmap.stats is None:
        raise ConfigurationError("local statistics must be computed before the loss")
    sel = np.flatnonzero(mask)
    if sel.size == 0:
        raise EmptySelectionError("no map points passed the filters; relax the filter thresholds")
    return sel


def map_loss(gmap: GlobalMap, mask: np.ndarray, kind: LossKind) -> LossReport:
    """Mean point loss over the masked points."""
    sel = _selected(gmap, mask)
    contrib = point_loss(gmap.stats, kind, sel)
    value = float(contrib.mean())
    if not np.isfinite(value):
        bad = sel[~np.isfinite(contrib)]
        raise NumericalError(f"non-finite loss at map point {int(bad[0]) if bad.size else -1}")
    return LossReport(value, contrib, int(sel.size))


def position_gradient(gmap: GlobalMap, mask: np.ndarray, kind: LossKind,
                      gap_min: float = GAP_MIN) -> tuple[np.ndarray, int]:
    """Gradient of the map loss w.r.t. every map point position, and the skipped count.

    For neighborhood ``i`` with ``n`` points and mean ``m``, a member ``x_j``
    receives ``2 / (n - 1) * (u1 . (x_j - m)) u1`` (smallest eigenvalue) or
    ``2 / (n - 1) * (x_j - m)`` (trace), scaled by ``1 / |selection|``.
    Smallest-eigenvalue neighborhoods whose eigengap is below ``gap_min``
    are left out of the gradient.
    """
    kind = LossKind(kind)
    sel = _selected(gmap, mask)
    stats = gmap.stats
    nb = gmap.neighborhoods
    weights = np.zeros(len(gmap))
    n = stats.count[sel].astype(float)
    weights[sel] = 2.0 / ((n - 1.0) * sel.size)
    skipped = 0
    if kind is LossKind.MIN_EIGENVALUE:
        gap = stats.eigvals[sel, 1] - stats.eigvals[sel, 0]
        degenerate = sel[gap < gap_min]
        weights[degenerate] = 0.0
        skipped = int(degenerate.size)
        u1 = np.ascontiguousarray(stats.eigvecs[:, :, 0])
        grad = _kernels.gather_min_eig_gradient(gmap.points, gmap.valid, nb.indptr, nb.indices,
                                                weights, stats.mean, u1)
    else:
        grad = _kernels.gather_trace_gradient(gmap.points, gmap.valid, nb.indptr, nb.indices,
                                              weights, stats.mean)
    return grad, skipped


def chain_to_parameters(gmap: GlobalMap, point_grad: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Pull point gradients back to the bias weights and to every pose correction."""
    along_beam = np.einsum("ij,ij->i", point_grad, gmap.directions)
    # corrected point moves by -d_eps along its beam
    grad_w = -(gmap.bias_basis().T @ along_beam)
    grad_p = np.zeros((gmap.n_scans, 6))
    for k in range(gmap.n_scans):
        sl = gmap.scan_slice(k)
        grad_p[k] = pullback_point_gradients(gmap.poses[k], gmap.corrections[k],
                                             gmap.local_points[sl], point_grad[sl])
    return grad_w, grad_p


def map_loss_gradients(gmap: GlobalMap, mask: np.ndarray, kind: LossKind,
                       gap_min: float = GAP_MIN, keep_point_grad: bool = False) -> LossReport:
    """Loss value plus gradients w.r.t. the bias weights and each scan's pose correction.

    The mask and the incidence angles driving the correction are held fixed.
    """
    report = map_loss(gmap, mask, kind)
    point_grad, skipped = position_gradient(gmap, mask, kind, gap_min)
    finite = np.isfinite(point_grad).all(axis=1)
    if not finite.all():
        raise NumericalError(f"non-finite gradient at map point {int(np.flatnonzero(~finite)[0])}")
    grad_w, grad_p = chain_to_parameters(gmap, point_grad)
    report.grad_w = grad_w
    report.grad_p = grad_p
    report.n_skipped = skipped
    if keep_point_grad:
        report.point_grad = point_grad
    return report
