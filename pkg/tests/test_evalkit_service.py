import math

import numpy as np
import orjson
import pytest

from app.helpers.exceptions import PipelineError, ShapeMismatchError
from app.services.dataset import DatasetService
from app.services.evalkit_service import EvalkitService, convert_to_native, format_psnr
from app.services.scene_service import SceneService
from tests.helpers import one_hot_heads, two_instance_scene


def test_psnr_of_a_known_error():
    a = np.zeros((4, 4, 3))
    b = np.full((4, 4, 3), 0.1)
    assert EvalkitService.psnr(a, b) == pytest.approx(20.0)


def test_identical_images_are_exact():
    image = np.full((3, 3, 3), 0.4)
    value = EvalkitService.psnr(image, image.copy())
    assert math.isinf(value)
    assert format_psnr(value) == "exact"
    assert format_psnr(31.5) == 31.5
    with pytest.raises(ShapeMismatchError):
        EvalkitService.psnr(image, np.zeros((3, 4, 3)))


def test_half_overlapping_instance():
    gt = np.zeros((4, 4), dtype=np.int64)
    pred = np.zeros((4, 4), dtype=np.int64)
    gt[:, :2] = 1
    pred[:, 1:3] = 1
    metrics = EvalkitService().seg_metrics([pred], [gt], 1)
    assert metrics["mIoU"] == pytest.approx(1.0 / 3.0)
    assert metrics["Recall"] == pytest.approx(0.5)
    assert metrics["F1"] == pytest.approx(0.5)


def test_metrics_average_instances_then_frames():
    gt = np.array([[1, 1, 2, 2]])
    perfect = gt.copy()
    swapped = np.array([[2, 2, 1, 1]])
    metrics = EvalkitService().seg_metrics([perfect, swapped], [gt, gt], 2)
    assert metrics["mIoU"] == pytest.approx(0.5)
    assert metrics["F1"] == pytest.approx(0.5)


def test_background_only_frames_give_nan():
    empty = np.zeros((3, 3), dtype=np.int64)
    metrics = EvalkitService().seg_metrics([empty], [empty], 2)
    assert all(math.isnan(v) for v in metrics.values())
    with pytest.raises(ShapeMismatchError):
        EvalkitService().seg_metrics([empty], [], 2)


def test_convert_to_native():
    payload = {"a": np.float32(1.5), "b": [np.int64(3), math.inf, math.nan], 4: np.array([1.0, 2.0])}
    assert convert_to_native(payload) == {"a": 1.5, "b": [3, "exact", None], "4": [1.0, 2.0]}


def test_instance_centroids():
    scene = two_instance_scene()
    centroids = EvalkitService().instance_centroids(scene, one_hot_heads(), 3)
    np.testing.assert_allclose(centroids[:2], scene.fg.positions)
    assert np.all(np.isnan(centroids[2]))


def test_evaluate_run_on_saved_checkpoints(tiny_dataset_dir, tmp_path):
    dataset = DatasetService().load_dataset(tiny_dataset_dir, validate=False)
    scene_service = SceneService()
    heads = one_hot_heads()
    for t in range(2):
        scene_service.save_checkpoint(tmp_path / f"frame_{t:04d}.g4d", two_instance_scene(frame_index=t),
                                      heads.to_sections())
    service = EvalkitService()
    result = service.evaluate_run(dataset, tmp_path, views=[0, 2], threads=2)
    assert list(result["table"]["frame"]) == [0, 0, 1, 1]
    assert list(result["table"]["view"]) == [0, 2, 0, 2]
    assert {"psnr", "ssim", "mIoU", "Recall", "F1"} <= set(result["summary"])
    assert len(result["frames"]) == 2
    assert set(result["tracking"]["relative_errors"]) == {0, 1}
    decoded = orjson.loads(service.metrics_json(result))
    assert len(decoded["views"]) == 4


def test_evaluate_run_needs_checkpoints(tiny_dataset_dir, tmp_path):
    dataset = DatasetService().load_dataset(tiny_dataset_dir, validate=False)
    with pytest.raises(PipelineError):
        EvalkitService().evaluate_run(dataset, tmp_path)


def test_masked_psnr_ignores_unselected_pixels():
    a = np.zeros((4, 4, 3))
    b = a.copy()
    b[:, 2:] = 0.5
    select = np.zeros((4, 4), dtype=bool)
    select[:, :2] = True
    service = EvalkitService()
    assert math.isinf(service.masked_psnr(a, b, select))
    assert math.isnan(service.masked_psnr(a, b, np.zeros((4, 4), dtype=bool)))


def test_background_checkpoint_alone_is_scored_on_background_pixels(tiny_dataset_dir, tmp_path):
    dataset = DatasetService().load_dataset(tiny_dataset_dir, validate=False)
    SceneService().save_checkpoint(tmp_path / "background.g4d", two_instance_scene())
    result = EvalkitService().evaluate_run(dataset, tmp_path, views=[0, 1], threads=2)
    assert set(result["table"].columns) == {"frame", "view", "psnr", "ssim"}
    assert list(result["frames"]["frame"]) == [0, 1, 2]
    assert set(result["summary"]) == {"psnr", "ssim"}
    assert result["tracking"] is None
    decoded = orjson.loads(EvalkitService.metrics_json(result))
    assert len(decoded["views"]) == 6
