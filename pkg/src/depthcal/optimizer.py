"""Joint learning of depth-bias weights and pose corrections from map consistency.

Every iteration rebuilds the global map from the current parameters,
re-estimates statistics and filters over neighborhoods frozen on the
initial map, evaluates the loss and its gradients and takes one descent
step.  The returned parameters are those with the lowest validation loss.
"""

from __future__ import annotations

import enum
import logging
import math
import os
from dataclasses import dataclass, field

import numpy as np

from . import _kernels
from .consistency_loss import GAP_MIN, LossKind, map_loss, map_loss_gradients
from .depth_model import BiasKind, BiasModel
from .errors import ConfigurationError, EmptySelectionError, InvalidParameterError, NumericalError
from .map_index import (
    FilterConfig,
    build_map,
    compute_local_stats,
    freeze_neighborhoods,
    apply_filters,
    scan_incidence,
    with_incidence,
)

logger = logging.getLogger(__name__)

THREADS_ENV = "DEPTHCAL_THREADS"


class PoseMode(str, enum.Enum):
    FROZEN = "frozen"
    PER_SCAN = "per_scan"
    SHARED = "shared"


class Variant(str, enum.Enum):
    PLAIN = "plain"
    MOMENTUM = "momentum"
    ADAM = "adam"


# (w step, p step) per variant when not configured explicitly
DEFAULT_STEPS = {
    Variant.ADAM: (1e-3, 1e-4),
    Variant.PLAIN: (1e-1, 1e-2),
    Variant.MOMENTUM: (1e-2, 1e-3),
}


@dataclass(frozen=True)
class OptimizationConfig:
    """Settings of the training loop.

    Attributes:
        iterations: number of descent steps (no early stopping).
        loss: consistency loss driving the optimization.
        variant: plain gradient descent, heavy-ball momentum or Adam.
        step_w, step_p: step sizes for the bias weights and the pose
            corrections; ``None`` picks the variant default.
        rotation_scale: multiplier on ``step_p`` for the rotation components.
        lr_decay: step sizes shrink geometrically to this fraction of their
            initial value by the last iteration (1.0 keeps them constant).
        pose_mode: how pose corrections are parameterized.
        anchor_first: in per-scan mode keep the first training scan's
            correction at zero; it defines the global frame.
        learn_weights: update the bias weights (disable to refine poses only).
        train_scans, validation_scans: scan ids; ``None`` selects the last
            25% of scans (at least 2) for validation and the rest for training.
        refresh_incidence: re-estimate incidence angles from the map normals
            every iteration.
        grad_tol: a parameter group whose largest gradient component is at
            or below this value is left unchanged for that iteration.  Adam
            would otherwise blow round-off gradients of a consistent map up
            to full-size steps.
    """

    iterations: int = 200
    loss: LossKind = LossKind.MIN_EIGENVALUE
    variant: Variant = Variant.ADAM
    step_w: float | None = None
    step_p: float | None = None
    rotation_scale: float = 0.1
    lr_decay: float = 1.0
    pose_mode: PoseMode = PoseMode.PER_SCAN
    anchor_first: bool = True
    learn_weights: bool = True
    train_scans: tuple[int, ...] | None = None
    validation_scans: tuple[int, ...] | None = None
    validation_fraction: float = 0.25
    momentum: float = 0.9
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    gap_min: float = GAP_MIN
    refresh_incidence: bool = True
    grad_tol: float = 1e-12
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "loss", LossKind(self.loss))
        object.__setattr__(self, "variant", Variant(self.variant))
        object.__setattr__(self, "pose_mode", PoseMode(self.pose_mode))
        for name in ("train_scans", "validation_scans"):
            val = getattr(self, name)
            if val is not None:
                object.__setattr__(self, name, tuple(int(v) for v in val))
        if self.iterations < 1:
            raise InvalidParameterError("iterations must be at least 1")
        for name in ("step_w", "step_p"):
            val = getattr(self, name)
            if val is not None and not val > 0:
                raise InvalidParameterError(f"{name} must be positive")
        if not self.rotation_scale > 0:
            raise InvalidParameterError("rotation_scale must be positive")
        if not 0 < self.lr_decay <= 1:
            raise InvalidParameterError("lr_decay must lie in (0, 1]")
        if not self.grad_tol >= 0:
            raise InvalidParameterError("grad_tol must be non-negative")
        if not 0 < self.validation_fraction < 1:
            raise InvalidParameterError("validation_fraction must lie in (0, 1)")

    @property
    def steps(self) -> tuple[float, float]:
        dw, dp = DEFAULT_STEPS[self.variant]
        return (self.step_w if self.step_w is not None else dw,
                self.step_p if self.step_p is not None else dp)

    def split(self, n_scans: int) -> tuple[list[int], list[int]]:
        """Training and validation scan ids for a dataset of ``n_scans``."""
        ids = list(range(n_scans))
        if self.validation_scans is None:
            n_val = max(2, int(math.ceil(self.validation_fraction * n_scans)))
            val = ids[n_scans - n_val:] if n_val < n_scans else []
        else:
            val = sorted(set(self.validation_scans))
        if self.train_scans is None:
            train = [k for k in ids if k not in val]
        else:
            train = sorted(set(self.train_scans))
        for k in train + val:
            if not 0 <= k < n_scans:
                raise ConfigurationError(f"scan id {k} out of range for {n_scans} scans")
        if len(train) < 2:
            raise ConfigurationError("training needs at least 2 scans")
        if len(val) < 2:
            raise ConfigurationError("validation needs at least 2 scans")
        return train, val


@dataclass
class TrainingResult:
    model: BiasModel
    corrections: np.ndarray
    train_loss: list[float]
    validation_loss: list[float]
    best_iteration: int
    train_scans: list[int]
    validation_scans: list[int]
    weights_history: list[tuple[float, float]] = field(default_factory=list)
    diagnostics: dict = field(default_factory=dict)


class MapProblem:
    """Loss evaluation over a fixed subset of scans.

    Neighborhoods are frozen on the map built with zero weights and zero
    corrections.  The incidence angles that drive the depth correction are
    kept as state and refreshed from the map normals after each evaluation.
    """

    def __init__(self, scans, poses, fcfg: FilterConfig, kind: BiasKind):
        self.poses = list(poses)
        self.fcfg = fcfg
        self.kind = BiasKind(kind)
        initial = build_map(scans, self.poses)
        initial = compute_local_stats(freeze_neighborhoods(initial, fcfg))
        self.neighborhoods = initial.neighborhoods
        self.scans = with_incidence(scans, scan_incidence(initial))
        self.last_mask = None

    def evaluate(self, w, corrections, kind: LossKind, gradients: bool = True,
                 refresh: bool = True, gap_min: float = GAP_MIN):
        """Loss report at ``(w, corrections)`` plus the filter mask used."""
        model = BiasModel(self.kind, tuple(w))
        gmap = build_map(self.scans, self.poses, corrections, model, neighborhoods=self.neighborhoods)
        gmap = compute_local_stats(gmap)
        mask = apply_filters(gmap, self.fcfg)
        if not mask.any():
            raise EmptySelectionError(
                f"filters selected no points out of {len(gmap)}; "
                f"n_min={self.fcfg.n_min}, c0={self.fcfg.c0}, sigma_min={self.fcfg.sigma_min}")
        if gradients:
            report = map_loss_gradients(gmap, mask, kind, gap_min)
        else:
            report = map_loss(gmap, mask, kind)
        if not math.isfinite(report.value):
            raise NumericalError("non-finite loss")
        if refresh:
            self.scans = with_incidence(self.scans, scan_incidence(gmap))
        self.last_mask = mask
        return report, mask


def _apply_threads():
    env = os.environ.get(THREADS_ENV)
    if env is not None and env.strip():
        _kernels.set_threads(int(env))


class _Stepper:
    """One of the descent rules applied elementwise with per-element step sizes."""

    def __init__(self, cfg: OptimizationConfig, shape):
        self.cfg = cfg
        self.m = np.zeros(shape)
        self.v = np.zeros(shape)
        self.t = 0

    def step(self, grad: np.ndarray, lr: np.ndarray) -> np.ndarray:
        cfg = self.cfg
        if not np.abs(grad).max(initial=0.0) > cfg.grad_tol:
            return np.zeros_like(grad)
        self.t += 1
        if cfg.variant is Variant.PLAIN:
            return -lr * grad
        if cfg.variant is Variant.MOMENTUM:
            self.m = cfg.momentum * self.m + grad
            return -lr * self.m
        self.m = cfg.beta1 * self.m + (1 - cfg.beta1) * grad
        self.v = cfg.beta2 * self.v + (1 - cfg.beta2) * grad * grad
        m_hat = self.m / (1 - cfg.beta1**self.t)
        v_hat = self.v / (1 - cfg.beta2**self.t)
        return -lr * m_hat / (np.sqrt(v_hat) + cfg.adam_eps)


def shared_correction_update(grad_p: np.ndarray) -> np.ndarray:
    """Gradient of the single tied correction: the sum of the per-scan gradients."""
    return np.asarray(grad_p, float).reshape(-1, 6).sum(axis=0)


def _full_corrections(mode: PoseMode, params: np.ndarray, n_scans: int) -> np.ndarray:
    if mode is PoseMode.SHARED:
        return np.tile(params, (n_scans, 1))
    return params.copy()


def train(scans, poses, cfg: OptimizationConfig | None = None, fcfg: FilterConfig | None = None,
          model0: BiasModel | None = None) -> TrainingResult:
    """Run the optimization loop for ``cfg.iterations`` steps.

    Args:
        scans: measured scans in their sensor frames.
        poses: initial sensor-to-global transforms, one per scan.
        cfg: optimization settings.
        fcfg: neighborhood radius and filter thresholds.
        model0: model kind and, when weights are not learned, their fixed value.

    Returns:
        The validation-best snapshot and the loss history.  History index 0
        holds the initial parameters; index ``i`` the parameters after ``i``
        updates.
    """
    cfg = cfg or OptimizationConfig()
    fcfg = fcfg or FilterConfig()
    model0 = model0 or BiasModel()
    _apply_threads()
    n_scans = len(scans)
    if len(poses) != n_scans:
        raise ConfigurationError("need exactly one pose per scan")
    train_ids, val_ids = cfg.split(n_scans)

    train_problem = MapProblem([scans[k] for k in train_ids], [poses[k] for k in train_ids], fcfg, model0.kind)
    val_problem = MapProblem([scans[k] for k in val_ids], [poses[k] for k in val_ids], fcfg, model0.kind)

    w = np.array(model0.w)
    if cfg.pose_mode is PoseMode.SHARED:
        p = np.zeros(6)
    else:
        p = np.zeros((len(train_ids), 6))

    step_w, step_p = cfg.steps
    lr_w = np.full(2, step_w)
    lr_p_row = np.array([step_p] * 3 + [step_p * cfg.rotation_scale] * 3)
    w_stepper = _Stepper(cfg, w.shape)
    p_stepper = _Stepper(cfg, p.shape)
    decay = cfg.lr_decay ** (1.0 / max(1, cfg.iterations - 1))

    def val_corrections(params):
        out = np.zeros((len(val_ids), 6))
        if cfg.pose_mode is PoseMode.SHARED:
            out[:] = params
        elif cfg.pose_mode is PoseMode.PER_SCAN:
            for row, k in enumerate(val_ids):
                if k in train_ids:
                    out[row] = params[train_ids.index(k)]
        return out

    train_hist, val_hist, w_hist, snapshots = [], [], [], []
    skipped, flips, selected = [], [], []
    prev_mask = None
    for it in range(cfg.iterations + 1):
        corr = _full_corrections(cfg.pose_mode, p, len(train_ids))
        final = it == cfg.iterations
        report, mask = train_problem.evaluate(w, corr, cfg.loss, gradients=not final,
                                              refresh=cfg.refresh_incidence, gap_min=cfg.gap_min)
        val_report, _ = val_problem.evaluate(w, val_corrections(p), cfg.loss, gradients=False,
                                             refresh=cfg.refresh_incidence)
        train_hist.append(report.value)
        val_hist.append(val_report.value)
        w_hist.append((float(w[0]), float(w[1])))
        snapshots.append((w.copy(), p.copy()))
        selected.append(int(mask.sum()))
        flips.append(0 if prev_mask is None else int(np.count_nonzero(mask != prev_mask)))
        prev_mask = mask
        logger.debug("iter %d train %.6g val %.6g w %s", it, report.value, val_report.value, w)
        if final:
            break
        skipped.append(report.n_skipped)
        scale = decay**it
        if cfg.learn_weights:
            w = w + w_stepper.step(report.grad_w, lr_w * scale)
        if cfg.pose_mode is PoseMode.PER_SCAN:
            g = report.grad_p.copy()
            if cfg.anchor_first:
                g[0] = 0.0
            p = p + p_stepper.step(g, lr_p_row[None, :] * scale)
            if cfg.anchor_first:
                p[0] = 0.0
        elif cfg.pose_mode is PoseMode.SHARED:
            p = p + p_stepper.step(shared_correction_update(report.grad_p), lr_p_row * scale)
        if not (np.all(np.isfinite(w)) and np.all(np.isfinite(p))):
            raise NumericalError(f"parameters became non-finite at iteration {it}")

    best = int(np.argmin(val_hist))
    best_w, best_p = snapshots[best]
    corrections = np.zeros((n_scans, 6))
    if cfg.pose_mode is PoseMode.SHARED:
        corrections[:] = best_p
    elif cfg.pose_mode is PoseMode.PER_SCAN:
        for row, k in enumerate(train_ids):
            corrections[k] = best_p[row]
    return TrainingResult(
        model=BiasModel(model0.kind, tuple(best_w)),
        corrections=corrections,
        train_loss=train_hist,
        validation_loss=val_hist,
        best_iteration=best,
        train_scans=train_ids,
        validation_scans=val_ids,
        weights_history=w_hist,
        diagnostics={"skipped": skipped, "mask_flips": flips, "selected": selected},
    )


def validation_loss(scans, poses, w, corrections, cfg: OptimizationConfig | None = None,
                    fcfg: FilterConfig | None = None, kind: BiasKind = BiasKind.SCALED_POLYNOMIAL,
                    refine: int = 1) -> float:
    """Consistency loss of the validation scans at weights ``w`` and their corrections.

    ``corrections`` holds one row per scan of the dataset.  Incidence angles
    start from the uncorrected validation map and are re-estimated ``refine``
    times at the given parameters before the final evaluation.
    """
    cfg = cfg or OptimizationConfig()
    fcfg = fcfg or FilterConfig()
    _, val_ids = cfg.split(len(scans))
    corrections = np.zeros((len(scans), 6)) if corrections is None else np.asarray(corrections, float)
    problem = MapProblem([scans[k] for k in val_ids], [poses[k] for k in val_ids], fcfg, kind)
    corr = corrections[val_ids]
    for _ in range(refine):
        problem.evaluate(w, corr, cfg.loss, gradients=False, refresh=True)
    report, _ = problem.evaluate(w, corr, cfg.loss, gradients=False, refresh=False)
    return report.value
