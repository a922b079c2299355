import numpy as np
import pytest

from pyegopose.features import geometry, synthesis
from pyegopose.modules import enums, models
from pyegopose.modules.exceptions import BehindCamera, DomainError, NonConvergence, RankError, ShapeError


@pytest.fixture
def camera() -> models.PinholeCamera:
    return models.PinholeCamera()


def test_project_pinhole(camera):
    pixels = geometry.project_pinhole(camera, np.array([[0.0, 0.0, 1.0], [0.1, -0.2, 2.0]]))
    np.testing.assert_allclose(pixels, [[640.0, 480.0], [670.0, 420.0]])


def test_project_pinhole_rejects_points_behind(camera):
    with pytest.raises(BehindCamera):
        geometry.project_pinhole(camera, np.array([[0.0, 0.0, 0.0]]))


def test_solver_recovers_noise_free_offset(camera):
    local3d = geometry.hand_template()
    offset = np.array([0.12, -0.08, 0.55])
    obs2d = geometry.project_pinhole(camera, local3d + offset)
    solution = geometry.solve_wrist_offset(camera, local3d, obs2d, init_depth=1.0)
    np.testing.assert_allclose(solution.offset, offset, atol=1e-6)
    assert solution.rms < 1e-4
    assert all(later <= earlier for earlier, later in zip(solution.history, solution.history[1:]))


def test_solver_with_pixel_noise(camera):
    rng = np.random.default_rng(0)
    local3d = geometry.hand_template()
    offset = np.array([-0.05, 0.1, 0.7])
    obs2d = geometry.project_pinhole(camera, local3d + offset) + rng.normal(0.0, 1.0, (21, 2))
    solution = geometry.solve_wrist_offset(camera, local3d, obs2d)
    assert np.linalg.norm(solution.offset - offset) < 0.02
    assert solution.rms < 3.0


def test_solver_rejects_collinear_joints(camera):
    local3d = np.outer(np.linspace(0.0, 0.1, 5), [1.0, 0.0, 0.0])
    obs2d = np.zeros((5, 2))
    with pytest.raises(RankError):
        geometry.solve_wrist_offset(camera, local3d, obs2d)


def test_solver_validates_inputs(camera):
    local3d = geometry.hand_template()
    with pytest.raises(ShapeError):
        geometry.solve_wrist_offset(camera, local3d[:2], np.zeros((2, 2)))
    with pytest.raises(ShapeError):
        geometry.solve_wrist_offset(camera, local3d, np.zeros((20, 2)))
    with pytest.raises(DomainError):
        geometry.solve_wrist_offset(camera, local3d, np.zeros((21, 2)), init_depth=0.0)


def test_camera_frame_flips_for_negative_axis():
    np.testing.assert_array_equal(geometry.camera_frame(enums.ViewAxis.positive_z), np.eye(3))
    assert np.linalg.det(geometry.camera_frame(enums.ViewAxis.negative_z)) == pytest.approx(1.0)


def test_detections_follow_visibility(motion):
    mask = synthesis.compute_visibility(motion)
    detections = geometry.simulate_detections(
        motion, mask, models.PinholeCamera(), 0.0, np.random.default_rng(0), hand_mode=3
    )
    assert len(detections) == int(mask.sum())
    signal = synthesis.derive_tracking_signal(motion, hand_mode=3)
    values, available = detections.dense()
    np.testing.assert_array_equal(available, mask)
    np.testing.assert_allclose(values[mask], signal.hands[mask], atol=1e-9)


def test_reprojection_detector_recovers_wrists(motion):
    mask = synthesis.compute_visibility(motion)
    detections = geometry.simulate_detections(
        motion,
        mask,
        models.PinholeCamera(),
        0.0,
        np.random.default_rng(0),
        detector=enums.Detector.reprojection,
        pixel_noise=0.0,
    )
    signal = synthesis.derive_tracking_signal(motion)
    values, available = detections.dense()
    assert np.all(mask[available])
    np.testing.assert_allclose(values[available][:, :3], signal.hands[available][:, :3], atol=1e-3)


def test_negative_noise_is_rejected(motion):
    mask = np.zeros((len(motion), 2), dtype=bool)
    with pytest.raises(DomainError):
        geometry.simulate_detections(motion, mask, models.PinholeCamera(), -1.0, np.random.default_rng(0))


def test_solver_needs_progress_to_converge(camera, monkeypatch):
    local3d = geometry.hand_template()
    obs2d = geometry.project_pinhole(camera, local3d + np.array([0.0, 0.0, 0.5]))
    lstsq = np.linalg.lstsq

    def uphill(*args, **kwargs):
        solution, *rest = lstsq(*args, **kwargs)
        return (-solution, *rest)

    monkeypatch.setattr(np.linalg, "lstsq", uphill)
    with pytest.raises(NonConvergence) as error:
        geometry.solve_wrist_offset(camera, local3d, obs2d, tolerance=0.1)
    np.testing.assert_array_equal(error.value.best_offset, [0.0, 0.0, 1.0])


def diverging_solve(cam, local3d, obs2d, init_depth=1.0, **kwargs):
    raise NonConvergence("cost increased 5 times", best_offset=np.array([0.0, 0.0, init_depth]), best_rms=9.0)


def test_nonconverging_solve_drops_the_observation(camera, monkeypatch):
    monkeypatch.setattr(geometry, "solve_wrist_offset", diverging_solve)
    observation = geometry.observe_hand(
        camera, np.zeros(3), np.eye(3), np.array([0.1, -0.1, 0.5]), np.eye(3), np.random.default_rng(0), 0.0
    )
    assert not observation.valid


def test_nonconverging_solves_are_masked_out(motion, monkeypatch):
    monkeypatch.setattr(geometry, "solve_wrist_offset", diverging_solve)
    mask = np.ones((len(motion), 2), dtype=bool)
    detections = geometry.simulate_detections(
        motion, mask, models.PinholeCamera(), 0.0, np.random.default_rng(0), detector=enums.Detector.reprojection
    )
    _, available = detections.dense()
    assert len(detections) == 0
    assert not available.any()


def test_gaussian_detector_error_follows_chi_mean():
    config = models.GeneratorConfig(frames=5000, root_style=enums.RootStyle.stationary)
    motion = synthesis.generate_motion(config, 0)
    mask = np.ones((len(motion), 2), dtype=bool)
    detections = geometry.simulate_detections(
        motion, mask, models.PinholeCamera(), 0.06, np.random.default_rng(1), hand_mode=3
    )
    values, _ = detections.dense()
    truth = synthesis.derive_tracking_signal(motion, hand_mode=3).hands
    error = np.linalg.norm(values - truth, axis=-1).mean()
    assert error == pytest.approx(0.06 * 2 * np.sqrt(2 / np.pi), abs=2e-3)
    assert error == pytest.approx(0.096, abs=3e-3)
