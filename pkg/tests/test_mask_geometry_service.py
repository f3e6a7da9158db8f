import numpy as np
import pytest
from scipy.ndimage import distance_transform_edt

from app.helpers.exceptions import MaskError, ShapeMismatchError
from app.services.mask_geometry_service import MaskGeometryService


def _brute_force_squared(sites):
    rows, cols = np.nonzero(sites)
    ys, xs = np.mgrid[0:sites.shape[0], 0:sites.shape[1]]
    d2 = (ys[..., None] - rows) ** 2 + (xs[..., None] - cols) ** 2
    return d2.min(axis=-1).astype(np.float64)


def test_squared_distance_matches_brute_force(rng):
    sites = rng.random((17, 23)) < 0.05
    sites[3, 4] = True
    result = MaskGeometryService().squared_distance_to(sites)
    np.testing.assert_array_equal(result, _brute_force_squared(sites))


def test_squared_distance_without_sites_is_infinite():
    result = MaskGeometryService().squared_distance_to(np.zeros((4, 5), dtype=bool))
    assert np.all(np.isinf(result))


def test_signed_distance_field_matches_scipy(rng):
    mask = np.zeros((30, 40), dtype=bool)
    mask[8:20, 10:31] = True
    mask[rng.random(mask.shape) < 0.02] = True
    sdf = MaskGeometryService().signed_distance_field(mask, instance_id=1)
    expected = np.where(mask, -distance_transform_edt(mask), distance_transform_edt(~mask))
    np.testing.assert_allclose(sdf, expected, atol=1e-12)
    assert np.all(sdf[mask] <= 0) and np.all(sdf[~mask] > 0)


def test_single_pixel_mask():
    mask = np.zeros((5, 5), dtype=bool)
    mask[2, 2] = True
    sdf = MaskGeometryService().signed_distance_field(mask)
    assert sdf[2, 2] == -1.0
    assert sdf[0, 0] == pytest.approx(np.sqrt(8.0))


def test_empty_mask_is_an_error():
    with pytest.raises(MaskError):
        MaskGeometryService().signed_distance_field(np.zeros((6, 6), dtype=bool), instance_id=3)


def test_full_mask_gives_the_unsigned_interior_distance():
    sdf = MaskGeometryService().signed_distance_field(np.ones((4, 6), dtype=bool), instance_id=2)
    assert sdf.shape == (4, 6)
    assert np.all(np.isposinf(sdf))


def test_instance_sdfs_skip_full_frame_instances():
    labels = np.ones((5, 5), dtype=np.int64)
    assert MaskGeometryService().instance_sdfs(labels, 2) == {}


def test_instance_sdfs_skip_absent_ids():
    labels = np.zeros((8, 8), dtype=np.int64)
    labels[1:3, 1:3] = 1
    labels[5:7, 4:8] = 3
    fields = MaskGeometryService().instance_sdfs(labels, 3)
    assert sorted(fields) == [1, 3]
    assert fields[1][1, 1] < 0 and fields[1][6, 6] > 0


def test_mask_iou():
    a = np.zeros((4, 4), dtype=bool)
    b = np.zeros((4, 4), dtype=bool)
    a[:, :2] = True
    b[:, 1:3] = True
    service = MaskGeometryService()
    assert service.mask_iou(a, b) == pytest.approx(4 / 12)
    assert service.mask_iou(np.zeros((2, 2)), np.zeros((2, 2))) == 1.0
    with pytest.raises(ShapeMismatchError):
        service.mask_iou(a, np.zeros((3, 3)))


def test_label_iou_matrix_matches_pairwise_iou(rng):
    a = rng.integers(0, 4, size=(12, 9))
    b = rng.integers(0, 3, size=(12, 9))
    service = MaskGeometryService()
    matrix = service.label_iou_matrix(a, b, 3, 2)
    for i in range(4):
        for j in range(3):
            assert matrix[i, j] == pytest.approx(service.mask_iou(a == i, b == j))
