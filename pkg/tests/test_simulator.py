import math

import numpy as np
import pytest

from depthcal import simulator as sim
from depthcal.depth_model import BiasKind, BiasModel, correct_scan
from depthcal.errors import InvalidParameterError
from depthcal.geometry import RigidTransform, exp_correction

from conftest import GT

FLOOR = sim.Scene((sim.Patch(np.zeros(3), np.array([0, 0, 1.0]), np.array([1.0, 0, 0]), 50, 50, "floor"),))


def test_vertical_ray_onto_floor():
    d, g, pid = sim.intersect(FLOOR, np.array([0, 0, 1.0]), np.array([[0, 0, -1.0]]), 30)
    assert d[0] == pytest.approx(1.0, abs=1e-15) and g[0] == pytest.approx(0.0, abs=1e-12) and pid[0] == 0


def test_oblique_ray_onto_floor():
    ray = np.array([[1.0, 0, -1.0]]) / math.sqrt(2)
    d, g, _ = sim.intersect(FLOOR, np.array([0, 0, 1.0]), ray, 30)
    assert d[0] == pytest.approx(math.sqrt(2), abs=1e-12)
    assert g[0] == pytest.approx(math.pi / 4, abs=1e-12)


def test_back_faces_occlude_and_return_nothing():
    d, _, pid = sim.intersect(FLOOR, np.array([0, 0, -1.0]), np.array([[0, 0, 1.0]]), 30)
    assert pid[0] == -1 and np.isnan(d[0])


def test_unbiased_noiseless_scan_is_exact():
    scene, poses = sim.room_scene(), sim.room_poses(2)
    scans, truths = sim.simulate_sequence(scene, poses, sim.SensorModel(n_azimuth=120, n_elevation=30))
    for s, t in zip(scans, truths):
        assert np.array_equal(s.depths, t.depth_true)


@pytest.mark.parametrize("kind", list(BiasKind))
def test_bias_round_trip(kind):
    model = BiasModel(kind, (0.006, 0.001) if kind is BiasKind.SCALED_POLYNOMIAL else (0.05, 0.01))
    scene, poses = sim.room_scene(), sim.room_poses(2)
    scans, truths = sim.simulate_sequence(scene, poses, sim.SensorModel(n_azimuth=120, n_elevation=30, bias=model))
    for s, t in zip(scans, truths):
        assert np.all(s.depths >= t.depth_true)
        fixed = correct_scan(s.with_incidence(t.incidence_true), model)
        assert np.abs(fixed.depths - t.depth_true).max() < 1e-9


def test_returned_points_lie_on_their_patches():
    scene = sim.corridor_scene()
    pose = sim.corridor_poses()[3]
    scan, truth = sim.cast_scan(scene, pose, sim.SensorModel())
    world = pose.apply(scan.points)
    for pid, patch in enumerate(scene.patches):
        sel = truth.patch_id == pid
        rel = world[sel] - patch.center
        assert np.abs(rel @ patch.normal).max() < 1e-9
        assert np.all(np.abs(rel @ patch.axis_u) <= patch.half_u + 1e-9)
        assert np.all(np.abs(rel @ patch.axis_v) <= patch.half_v + 1e-9)
    assert np.all((truth.incidence_true >= 0) & (truth.incidence_true < math.pi / 2))


def test_ray_directions_are_unit():
    dirs = sim.SensorModel().ray_directions()
    assert dirs.shape == (256 * 64, 3)
    assert np.allclose(np.linalg.norm(dirs, axis=1), 1, atol=1e-12)


def test_sensor_validation():
    with pytest.raises(InvalidParameterError):
        sim.SensorModel(noise_std=-1)


def test_noise_is_seeded_per_scan():
    scene, poses = sim.room_scene(), sim.room_poses(2)
    sensor = sim.SensorModel(n_azimuth=60, n_elevation=20, noise_std=0.01, seed=4)
    a, _ = sim.simulate_sequence(scene, poses, sensor)
    b, _ = sim.simulate_sequence(scene, poses, sensor)
    assert all(np.array_equal(x.depths, y.depths) for x, y in zip(a, b))
    single, _ = sim.cast_scan(scene, poses[1], sensor, scan_index=1)
    assert np.array_equal(single.depths, a[1].depths)


def test_perturb_poses():
    poses = sim.corridor_poses(4)
    same = sim.perturb_poses(poses, 0.0, 0.0, seed=1)
    assert all(p is q for p, q in zip(poses, same))
    a = sim.perturb_poses(poses, 0.01, 0.01, seed=5)
    b = sim.perturb_poses(poses, 0.01, 0.01, seed=5)
    assert all(np.array_equal(p.as_matrix(), q.as_matrix()) for p, q in zip(a, b))
    assert sim.perturb_poses(poses, 0.01, 0.01, seed=5, keep_first=True)[0] is poses[0]
    with pytest.raises(InvalidParameterError):
        sim.perturb_poses(poses, -1.0, 0.0)


def test_perturbation_statistics():
    base = [RigidTransform.identity()] * 10000
    out = sim.perturb_poses(base, 0.02, 0.004, seed=0)
    t = np.array([p.translation for p in out])
    r = np.array([exp_correction(np.zeros(6)).rotation.T @ p.rotation for p in out])
    angles = np.stack([r[:, 2, 1], r[:, 0, 2], r[:, 1, 0]], axis=1)
    assert np.all(np.abs(t.std(axis=0) / 0.02 - 1) < 0.05)
    assert np.all(np.abs(angles.std(axis=0) / 0.004 - 1) < 0.05)


def test_pose_errors():
    a = RigidTransform.identity()
    b = exp_correction([0.03, 0.04, 0, 0, 0, 0.1])
    t, r = sim.pose_errors([a], [b])
    assert t[0] == pytest.approx(0.05) and r[0] == pytest.approx(0.1)


def test_board_dimensions():
    board = sim.board_scene(5.3, 0.0).patches[0]
    assert 2 * board.half_u == 0.50 and 2 * board.half_v == 1.15


def board_scan(distance, angle, bias=GT):
    scene = sim.board_scene(distance, angle)
    scan, truth = sim.cast_scan(scene, RigidTransform.identity(), sim.board_sensor(distance, bias))
    return scene, scan, truth


def test_unbiased_report_is_zero():
    scene, scan, truth = board_scan(5.3, 40.0, BiasModel())
    errors = sim.plane_errors(scene, scan.points, scan.directions)
    for row in sim.point_to_plane_report(errors, np.arange(0, 91, 10)):
        if row.count:
            assert abs(row.mean_range_error) < 1e-9 and abs(row.mean_plane_distance) < 1e-9


def test_board_report_magnitude_at_grazing_incidence():
    scene, scan, truth = board_scan(8.6, 80.0)
    errors = sim.plane_errors(scene, scan.points, scan.directions, patch_id=truth.patch_id)
    rows = [r for r in sim.point_to_plane_report(errors, [75, 85]) if r.count]
    assert rows[0].mean_range_error == pytest.approx(0.10, abs=0.01)
    assert rows[0].mean_plane_distance == pytest.approx(0.10 * math.cos(math.radians(80)), abs=0.003)
    fixed = correct_scan(scan.with_incidence(truth.incidence_true), GT)
    after = sim.plane_errors(scene, fixed.points, fixed.directions, patch_id=truth.patch_id)
    assert np.abs(after.range_error).max() < 1e-9


def test_attribution_counts_unattributable_points():
    scene = sim.board_scene(5.0, 0.0)
    pts = np.array([[5.0, 0.0, 0.0], [5.0, 3.0, 0.0], [9.0, 0.0, 0.0]])
    errors = sim.plane_errors(scene, pts, np.tile([1.0, 0, 0], (3, 1)))
    assert errors.patch_id.tolist() == [0, -1, -1]
    assert errors.n_unattributed == 2


def test_board_experiment_shapes():
    rows = sim.board_experiment([5.3, 8.6], [0, 40, 60, 80], GT, GT)
    by = {(r.distance, r.angle_deg): r for r in rows}
    # incidence is estimated from the board scan, so the residual is small rather than zero
    peak = max(abs(r.uncorrected_mean) for r in rows)
    for r in rows:
        assert abs(r.corrected_mean) < 1e-5 * peak
    for a in (40, 60, 80):
        assert by[(8.6, a)].uncorrected_mean > by[(5.3, a)].uncorrected_mean > 0
    with pytest.raises(InvalidParameterError):
        sim.board_experiment([5.3], [90], GT, GT)


def test_corridor_surfaces_seen_from_several_poses():
    scene, poses = sim.corridor_scene(), sim.corridor_poses()
    assert len(poses) == 10
    gaps = np.diff([p.translation[0] for p in poses])
    assert np.allclose(gaps, 2.0)
    _, truths = sim.simulate_sequence(scene, poses[:3], sim.SensorModel(n_azimuth=64, n_elevation=16))
    for pid in range(len(scene.patches)):
        assert sum(np.any(t.patch_id == pid) for t in truths) >= 2
