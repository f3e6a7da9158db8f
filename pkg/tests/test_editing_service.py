import numpy as np
import pytest

from app.helpers.exceptions import PipelineError
from app.helpers.geometry_helpers import quaternion_to_rotation
from app.services.editing_service import EditingService
from tests.helpers import one_hot_heads, two_instance_scene


def test_remove_drops_only_the_instance():
    scene = two_instance_scene()
    edited, report = EditingService().edit_instance(scene, one_hot_heads(), 1, remove=True)
    assert report.removed and report.selected == 1
    assert len(edited.fg) == 1
    np.testing.assert_array_equal(edited.fg.positions[0], scene.fg.positions[1])
    assert len(scene.fg) == 2


def test_similarity_transform_about_the_centroid():
    scene = two_instance_scene()
    scene.fg.rotations[1] = [np.cos(0.2), 0.0, np.sin(0.2), 0.0]
    edited, report = EditingService().edit_instance(scene, one_hot_heads(), 2, translation=(0.0, 0.5, 0.0),
                                                    rotation_deg=(0.0, 0.0, 90.0), scale=2.0)
    assert report.selected == 1 and not report.removed
    # a single primitive is its own centroid
    np.testing.assert_allclose(edited.fg.positions[1], [0.4, 0.5, 0.0])
    np.testing.assert_allclose(edited.fg.log_scales[1], scene.fg.log_scales[1] + np.log(2.0))
    np.testing.assert_array_equal(edited.fg.positions[0], scene.fg.positions[0])
    before = quaternion_to_rotation(scene.fg.rotations[1:2])[0]
    after = quaternion_to_rotation(edited.fg.rotations[1:2])[0]
    turn = np.array([[0.0, -1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0]])
    np.testing.assert_allclose(after, turn @ before, atol=1e-12)


def test_transform_of_a_cluster_keeps_its_shape():
    scene = two_instance_scene()
    cluster = scene.fg.subset(np.array([1, 1, 1]))
    cluster.positions = np.array([[0.4, 0.0, 0.0], [0.6, 0.0, 0.0], [0.5, 0.3, 0.0]])
    scene.fg = scene.fg.subset(np.array([0])).concat(cluster)
    edited, _ = EditingService().edit_instance(scene, one_hot_heads(), 2, rotation_deg=(0.0, 0.0, 45.0))
    before = scene.fg.positions[1:]
    after = edited.fg.positions[1:]
    np.testing.assert_allclose(after.mean(axis=0), before.mean(axis=0), atol=1e-12)
    np.testing.assert_allclose(np.linalg.norm(after[0] - after[1]), np.linalg.norm(before[0] - before[1]))


def test_invalid_edits():
    service = EditingService()
    with pytest.raises(PipelineError):
        service.edit_instance(two_instance_scene(), one_hot_heads(), 3)
    with pytest.raises(PipelineError):
        service.edit_instance(two_instance_scene(), one_hot_heads(), 0)
    with pytest.raises(PipelineError):
        service.edit_instance(two_instance_scene(), one_hot_heads(), 1, scale=0.0)
