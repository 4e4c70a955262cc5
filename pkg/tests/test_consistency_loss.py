import numpy as np
import pytest
from scipy.spatial.transform import Rotation

from depthcal import _kernels
from depthcal.consistency_loss import LossKind, map_loss, map_loss_gradients, point_loss, position_gradient
from depthcal.depth_model import BiasModel, ScanCloud
from depthcal.errors import EmptySelectionError
from depthcal.geometry import RigidTransform
from depthcal.map_index import (
    FilterConfig,
    apply_filters,
    build_map,
    compute_local_stats,
    freeze_neighborhoods,
    local_stats,
    radius_search,
    scan_incidence,
    with_incidence,
)

from conftest import GT

CFG = FilterConfig()


def prepared(scans, poses, model=GT, corrections=None):
    """Map with frozen neighborhoods and incidence taken from the uncorrected map."""
    g0 = compute_local_stats(freeze_neighborhoods(build_map(scans, poses), CFG))
    scans = with_incidence(scans, scan_incidence(g0))
    gmap = compute_local_stats(build_map(scans, poses, corrections, model, neighborhoods=g0.neighborhoods))
    return gmap, scans, g0.neighborhoods


def test_point_loss_on_worked_example():
    pts = np.array([[0.0, 0, 0], [1, 0, 0], [0, 1, 0]])
    st_ = local_stats(pts, np.ones(3, bool), radius_search(pts, 5.0), np.tile([0, 0, -1.0], (3, 1)),
                      np.zeros(3, np.int64), np.zeros((1, 3)))
    assert point_loss(st_, LossKind.TRACE, 0) == pytest.approx(2 / 3, abs=1e-12)
    assert point_loss(st_, LossKind.MIN_EIGENVALUE, 0) == pytest.approx(0.0, abs=1e-12)


def test_trace_dominates_min_eigenvalue(room3):
    _, poses, scans, _ = room3
    gmap, _, _ = prepared(scans, poses)
    ok = gmap.stats.available
    assert np.all(point_loss(gmap.stats, LossKind.TRACE)[ok] >= point_loss(gmap.stats, LossKind.MIN_EIGENVALUE)[ok])


def test_map_loss_is_mean_of_contributions(room3):
    _, poses, scans, _ = room3
    gmap, _, _ = prepared(scans, poses)
    mask = apply_filters(gmap, CFG)
    for kind in LossKind:
        rep = map_loss(gmap, mask, kind)
        assert rep.count == mask.sum()
        assert rep.value == pytest.approx(rep.contributions.mean(), rel=1e-12)
        assert rep.value >= 0
        one = np.zeros_like(mask)
        one[np.flatnonzero(mask)[7]] = True
        assert map_loss(gmap, one, kind).value == point_loss(gmap.stats, kind, np.flatnonzero(mask)[7])


def test_empty_selection_is_an_error(room3):
    _, poses, scans, _ = room3
    gmap, _, _ = prepared(scans, poses)
    with pytest.raises(EmptySelectionError):
        map_loss(gmap, np.zeros(len(gmap), bool), LossKind.TRACE)


def _loss_pair(corridor_biased, kind):
    _, poses, scans, _ = corridor_biased
    zero, _, _ = prepared(scans, poses, BiasModel())
    fixed, _, _ = prepared(scans, poses, GT)
    return (map_loss(zero, apply_filters(zero, CFG), kind).value,
            map_loss(fixed, apply_filters(fixed, CFG), kind).value)


def test_ground_truth_model_lowers_min_eigenvalue_loss(corridor_biased):
    uncorrected, corrected = _loss_pair(corridor_biased, LossKind.MIN_EIGENVALUE)
    assert corrected < 1e-3 * uncorrected


@pytest.mark.xfail(strict=True, reason="the fixed-radius trace loss of the biased corridor is already "
                   "below that of the true geometry; it is not minimized by the true model")
def test_ground_truth_model_lowers_trace_loss(corridor_biased):
    uncorrected, corrected = _loss_pair(corridor_biased, LossKind.TRACE)
    assert corrected < uncorrected


def test_consistent_map_has_zero_weight_gradient(room3_clean):
    _, poses, scans, _ = room3_clean
    gmap, _, _ = prepared(scans, poses, BiasModel())
    rep = map_loss_gradients(gmap, apply_filters(gmap, CFG), LossKind.MIN_EIGENVALUE)
    assert np.abs(rep.grad_w).max() < 1e-10


def scatter_gradient(gmap, mask, kind, gap_min=1e-8):
    """Per-neighborhood scatter of the point-gradient formula, one neighborhood at a time."""
    out = np.zeros_like(gmap.points)
    sel = np.flatnonzero(mask)
    for i in sel:
        nb = gmap.neighborhoods[i]
        nb = nb[gmap.valid[nb]]
        x = gmap.points[nb]
        m = x.mean(axis=0)
        lam, vec = np.linalg.eigh(np.cov(x.T))
        if kind is LossKind.MIN_EIGENVALUE:
            if lam[1] - lam[0] < gap_min:
                continue
            u = vec[:, 0]
            g = np.outer((x - m) @ u, u)
        else:
            g = x - m
        out[nb] += 2.0 / ((len(nb) - 1) * len(sel)) * g
    return out


@pytest.mark.parametrize("kind", list(LossKind))
def test_point_gradient_matches_scatter_oracle(room3, kind):
    _, poses, scans, _ = room3
    gmap, _, _ = prepared(scans, poses)
    mask = apply_filters(gmap, CFG)
    mask[np.flatnonzero(mask)[::7]] = False
    grad, _ = position_gradient(gmap, mask, kind)
    ref = scatter_gradient(gmap, mask, kind)
    assert np.abs(grad - ref).max() <= 1e-9 * np.abs(ref).max()


@pytest.mark.parametrize("kind", list(LossKind))
def test_gradient_of_one_neighborhood_sums_to_zero(room3, kind):
    _, poses, scans, _ = room3
    gmap, _, _ = prepared(scans, poses)
    full = apply_filters(gmap, CFG)
    for i in np.flatnonzero(full)[:: max(1, full.sum() // 20)]:
        mask = np.zeros_like(full)
        mask[i] = True
        grad, _ = position_gradient(gmap, mask, kind)
        support = np.flatnonzero(np.any(grad != 0, axis=1))
        assert set(support) <= set(gmap.neighborhoods[i])
        # the members' offsets from their mean cancel up to round-off in the coordinates
        n = gmap.stats.count[i]
        tol = 10 * np.finfo(float).eps * n * np.abs(gmap.points[support]).max() * 2.0 / (n - 1)
        assert np.abs(grad.sum(axis=0)).max() <= tol


def test_degenerate_eigengap_is_skipped():
    # all points on a line: lambda1 = lambda2 = 0
    line = np.column_stack([np.linspace(1, 1.2, 12), np.zeros(12), np.zeros(12)])
    scans = [ScanCloud.from_points(line[::2]), ScanCloud.from_points(line[1::2])]
    gmap = compute_local_stats(freeze_neighborhoods(build_map(scans, [RigidTransform.identity()] * 2), CFG))
    grad, skipped = position_gradient(gmap, np.ones(len(gmap), bool), LossKind.MIN_EIGENVALUE)
    assert skipped == len(gmap)
    assert not grad.any()


def test_finite_difference_gradients(room3):
    _, poses, scans, _ = room3
    rng = np.random.default_rng(1)
    from depthcal import simulator as sim

    noisy = sim.perturb_poses(poses, 0.01, np.radians(0.5), seed=1)
    model = BiasModel(GT.kind, (0.002, 0.0005))
    corr = rng.normal(0, 1e-3, (len(scans), 6))
    _, scans_i, nb = prepared(scans, noisy, model)

    def evaluate(w, p):
        return compute_local_stats(build_map(scans_i, noisy, p, model.with_weights(w), neighborhoods=nb))

    g = evaluate(model.w, corr)
    mask = apply_filters(g, CFG)
    for kind in LossKind:
        rep = map_loss_gradients(g, mask, kind)
        f = lambda w, p: map_loss(evaluate(w, p), mask, kind).value
        w = np.array(model.w)
        fd_w = np.array([(f(w + e, corr) - f(w - e, corr)) / 2e-6 for e in np.eye(2) * 1e-6])
        assert np.abs(rep.grad_w - fd_w).max() <= 1e-5 * np.abs(fd_w).max()
        fd_p = np.zeros_like(corr)
        for k in range(len(scans)):
            for a in range(6):
                e = np.zeros_like(corr)
                e[k, a] = 1e-7
                fd_p[k, a] = (f(w, corr + e) - f(w, corr - e)) / 2e-7
        assert np.abs(rep.grad_p - fd_p).max() <= 1e-4 * np.abs(fd_p).max()


def test_rigid_and_permutation_invariance(room3):
    _, poses, scans, _ = room3
    gmap, scans_i, _ = prepared(scans, poses)
    base = {k: map_loss(gmap, apply_filters(gmap, CFG), k).value for k in LossKind}

    g = RigidTransform(Rotation.from_rotvec([0.3, -0.2, 0.9]).as_matrix(), [3.0, -2.0, 1.0])
    moved, _, _ = prepared(scans, [g @ p for p in poses])
    order = [2, 0, 1]
    perm, _, _ = prepared([scans[k] for k in order], [poses[k] for k in order])
    for k in LossKind:
        assert abs(map_loss(moved, apply_filters(moved, CFG), k).value - base[k]) <= 1e-10 * base[k]
        assert abs(map_loss(perm, apply_filters(perm, CFG), k).value - base[k]) <= 1e-12 * base[k]


def test_gradients_do_not_depend_on_thread_count(room3):
    _, poses, scans, _ = room3
    gmap, _, _ = prepared(scans, poses)
    mask = apply_filters(gmap, CFG)
    try:
        _kernels.set_threads(1)
        one = map_loss_gradients(gmap, mask, LossKind.MIN_EIGENVALUE, keep_point_grad=True)
        _kernels.set_threads(None)
        many = map_loss_gradients(gmap, mask, LossKind.MIN_EIGENVALUE, keep_point_grad=True)
    finally:
        _kernels.set_threads(None)
    assert np.array_equal(one.point_grad, many.point_grad)
    assert np.array_equal(one.grad_w, many.grad_w)
