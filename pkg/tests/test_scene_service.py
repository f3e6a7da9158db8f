import numpy as np
import pytest

from app.helpers.exceptions import CheckpointError, InvalidPrimitiveError, PipelineError
from app.services.scene_service import GaussianSet, SceneModel, SceneService
from tests.helpers import central_difference, random_gaussians


def test_activate_matches_closed_form(rng):
    primitives = random_gaussians(rng, 5)
    act = SceneService().activate(primitives)
    np.testing.assert_allclose(act.scales, np.exp(primitives.log_scales))
    np.testing.assert_allclose(act.opacities, 1.0 / (1.0 + np.exp(-primitives.opacity_logits)))
    for i in range(5):
        R = act.rotation_matrices[i]
        np.testing.assert_allclose(R @ R.T, np.eye(3), atol=1e-12)
        expected = R @ np.diag(act.scales[i] ** 2) @ R.T
        np.testing.assert_allclose(act.covariances[i], expected, atol=1e-14)
        np.testing.assert_allclose(act.covariances[i], act.covariances[i].T, atol=1e-15)
        assert np.all(np.linalg.eigvalsh(act.covariances[i]) > 0)


def test_activate_ignores_quaternion_norm(rng):
    primitives = random_gaussians(rng, 3)
    scaled = primitives.copy()
    scaled.rotations *= 3.7
    a = SceneService().activate(primitives)
    b = SceneService().activate(scaled)
    np.testing.assert_allclose(a.covariances, b.covariances, atol=1e-14)


def test_activate_reports_first_non_finite_primitive(rng):
    primitives = random_gaussians(rng, 4)
    primitives.log_scales[2, 1] = np.nan
    primitives.opacity_logits[3] = np.inf
    with pytest.raises(InvalidPrimitiveError) as info:
        SceneService().activate(primitives)
    assert info.value.index == 2


def test_covariance_backward_matches_finite_differences(rng):
    service = SceneService()
    primitives = random_gaussians(rng, 2)
    upstream = rng.normal(size=(2, 3, 3))

    def energy():
        return float(np.sum(service.activate(primitives).covariances * upstream))

    act = service.activate(primitives)
    d_q, d_log_s = service.covariance_backward(primitives, act, upstream)
    np.testing.assert_allclose(d_q, central_difference(energy, primitives.rotations), rtol=1e-5, atol=1e-8)
    np.testing.assert_allclose(d_log_s, central_difference(energy, primitives.log_scales), rtol=1e-5, atol=1e-8)


def test_knn_matches_brute_force(rng):
    points = rng.normal(size=(60, 3))
    k = 4
    result = SceneService().knn_neighbors(points, k)
    for i in range(points.shape[0]):
        d2 = np.sum((points - points[i]) ** 2, axis=1)
        d2[i] = np.inf
        expected = np.lexsort((np.arange(points.shape[0]), d2))[:k]
        np.testing.assert_array_equal(result[i], expected)


def test_knn_breaks_ties_by_index():
    # every point of a regular grid row has two equidistant neighbours
    points = np.array([[float(x), 0.0, 0.0] for x in range(6)])
    result = SceneService().knn_neighbors(points, 2)
    np.testing.assert_array_equal(result[2], [1, 3])
    np.testing.assert_array_equal(result[0], [1, 2])


def test_knn_rejects_k_not_below_count(rng):
    with pytest.raises(PipelineError):
        SceneService().knn_neighbors(rng.normal(size=(3, 3)), 3)


def test_checkpoint_round_trip_is_float32_exact(tmp_path, rng):
    service = SceneService()
    scene = SceneModel(bg=random_gaussians(rng, 7), fg=random_gaussians(rng, 4), frame_index=5)
    scene.snapshot_background()
    path = tmp_path / "frame_0005.g4d"
    service.save_checkpoint(path, scene, sections={"head.extra": b"payload"}, meta={"stage": "frame"})

    loaded, sections, meta = service.load_checkpoint(path)
    assert loaded.frame_index == 5
    assert len(loaded.bg) == 7 and len(loaded.fg) == 4
    for name, value in scene.combined().arrays().items():
        np.testing.assert_array_equal(getattr(loaded.combined(), name), value.astype(np.float32).astype(np.float64))
    assert sections == {"head.extra": b"payload"}
    assert meta == {"stage": "frame"}
    np.testing.assert_array_equal(loaded.bg_reference["opacity_logits"],
                                  scene.bg.opacity_logits.astype(np.float32).astype(np.float64))


def test_checkpoint_with_empty_foreground(tmp_path, rng):
    service = SceneService()
    scene = SceneModel(bg=random_gaussians(rng, 3), fg=GaussianSet.empty())
    service.save_checkpoint(tmp_path / "bg.g4d", scene)
    loaded, _, _ = service.load_checkpoint(tmp_path / "bg.g4d")
    assert len(loaded.fg) == 0 and len(loaded.bg) == 3


def test_load_rejects_foreign_and_truncated_files(tmp_path, rng):
    service = SceneService()
    foreign = tmp_path / "foreign.g4d"
    foreign.write_bytes(b"PNG\x00garbage")
    with pytest.raises(CheckpointError):
        service.load_checkpoint(foreign)

    good = tmp_path / "good.g4d"
    service.save_checkpoint(good, SceneModel(bg=random_gaussians(rng, 5), fg=GaussianSet.empty()))
    truncated = tmp_path / "truncated.g4d"
    truncated.write_bytes(good.read_bytes()[:40])
    with pytest.raises(CheckpointError):
        service.load_checkpoint(truncated)

    with pytest.raises(CheckpointError):
        service.load_checkpoint(tmp_path / "missing.g4d")
