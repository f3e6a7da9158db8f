import numpy as np
import pytest

from app.helpers.config_helpers import RasterConfig
from app.helpers.geometry_helpers import SH_COEFFS
from app.services.flow_warp_service import FlowWarpService
from app.services.rasterizer_service import RasterizerService
from app.services.scene_service import Camera, GaussianSet
from tests.helpers import pinhole_camera


def _rig():
    return [pinhole_camera(width=32, height=32, focal=40.0, yaw_deg=yaw) for yaw in (0.0, 25.0, -30.0)]


def _blob(position):
    return GaussianSet(positions=np.asarray([position], dtype=np.float64), rotations=np.array([[1.0, 0, 0, 0]]),
                       log_scales=np.full((1, 3), np.log(0.05)), opacity_logits=np.array([3.0]),
                       sh=np.zeros((1, 3, SH_COEFFS)), features=np.zeros((1, 8)))


def test_triangulation_is_exact_without_noise():
    point = np.array([0.2, -0.15, 0.3])
    observations = [(camera, camera.project(point[None])[0][0]) for camera in _rig()]
    result = FlowWarpService().triangulate(observations)
    assert not result.degenerate
    np.testing.assert_allclose(result.point, point, atol=1e-8)
    assert result.residual < 1e-8


def test_noisy_triangulation_matches_the_least_squares_null_vector(rng):
    point = np.array([-0.1, 0.25, -0.2])
    observations = []
    for camera in _rig():
        uv = camera.project(point[None])[0][0] + rng.normal(0.0, 0.3, size=2)
        observations.append((camera, uv))
    rows = []
    for camera, uv in observations:
        P = camera.projection
        rows.extend([uv[0] * P[2] - P[0], uv[1] * P[2] - P[1]])
    A = np.array(rows)
    _, vectors = np.linalg.eigh(A.T @ A)
    expected = vectors[:3, 0] / vectors[3, 0]
    result = FlowWarpService().triangulate(observations)
    np.testing.assert_allclose(result.point, expected, rtol=1e-6, atol=1e-7)
    assert result.residual > 0.0


def test_degenerate_configurations():
    service = FlowWarpService()
    camera = _rig()[0]
    uv = np.array([12.0, 17.0])
    assert service.triangulate([(camera, uv)]).degenerate
    assert service.triangulate([(camera, uv), (camera, uv)]).degenerate
    assert service.triangulate([]).point is None
    nudged = Camera(K=camera.K, R=camera.R, t=camera.t + np.array([1e-13, 0.0, 0.0]), width=32, height=32)
    # near-parallel rays from almost the same centre
    assert service.triangulate([(camera, uv), (nudged, uv + 1e-9)]).degenerate
    assert FlowWarpService.degenerate_spectrum(np.array([3.0, 2.0, 1.0, 1.0 - 1e-12]), 1e-9)
    assert FlowWarpService.degenerate_spectrum(np.array([3.0, 2.0, 1e-12, 0.0]), 1e-9)
    assert not FlowWarpService.degenerate_spectrum(np.array([3.0, 2.0, 1.0, 0.5]), 1e-9)


def test_bilinear_flow_sampling_is_exact_on_linear_fields():
    ys, xs = np.mgrid[0:10, 0:12].astype(np.float64)
    flow = np.stack([2.0 * xs + 1.0, -ys], axis=-1)
    service = FlowWarpService()
    value, clamped = service.sample_flow(flow, [3.3, 4.6])
    np.testing.assert_allclose(value, [7.6, -4.6])
    assert not clamped
    value, clamped = service.sample_flow(flow, [-2.0, 4.0])
    np.testing.assert_allclose(value, [1.0, -4.0])
    assert clamped


def test_warp_follows_a_rigid_translation():
    cameras = _rig()
    fg = _blob([0.05, -0.1, 0.1])
    moved = fg.positions[0] + np.array([0.04, 0.03, -0.05])
    rasterizer = RasterizerService(config=RasterConfig())
    targets = [rasterizer.rasterize(fg, camera) for camera in cameras]
    flows = []
    for camera in cameras:
        before = camera.project(fg.positions)[0][0]
        after = camera.project(moved[None])[0][0]
        flows.append(np.broadcast_to(after - before, (camera.height, camera.width, 2)).copy())
    report = FlowWarpService().warp_foreground(fg, cameras, flows, targets)
    assert report.warped == 1 and report.fallbacks == 0
    np.testing.assert_allclose(report.positions[0], moved, atol=1e-8)
    assert report.views_used == [1, 1, 1]


def test_zero_flow_keeps_every_position(rng):
    cameras = _rig()
    n = 6
    fg = GaussianSet(positions=rng.uniform(-0.3, 0.3, size=(n, 3)), rotations=np.tile([1.0, 0, 0, 0], (n, 1)),
                     log_scales=np.full((n, 3), np.log(0.04)), opacity_logits=np.full(n, 3.0),
                     sh=np.zeros((n, 3, SH_COEFFS)), features=np.zeros((n, 8)))
    rasterizer = RasterizerService()
    targets = [rasterizer.rasterize(fg, camera) for camera in cameras]
    flows = [np.zeros((32, 32, 2)) for _ in cameras]
    report = FlowWarpService().warp_foreground(fg, cameras, flows, targets)
    np.testing.assert_allclose(report.positions, fg.positions, atol=1e-8)
    assert report.warped + report.fallbacks == n


def test_primitive_seen_in_one_view_falls_back():
    cameras = _rig()
    fg = _blob([0.0, 0.0, 0.0])
    rasterizer = RasterizerService()
    targets = [rasterizer.rasterize(fg, camera) for camera in cameras]
    flows = [np.full((32, 32, 2), 2.0)] + [np.full((32, 32, 2), np.nan) for _ in cameras[1:]]
    report = FlowWarpService().warp_foreground(fg, cameras, flows, targets)
    assert report.fallback_views == 1 and report.warped == 0
    np.testing.assert_array_equal(report.positions, fg.positions)


@pytest.mark.parametrize("threads", [1, 3])
def test_warp_is_independent_of_thread_count(rng, threads):
    cameras = _rig()
    n = 9
    fg = GaussianSet(positions=rng.uniform(-0.3, 0.3, size=(n, 3)), rotations=np.tile([1.0, 0, 0, 0], (n, 1)),
                     log_scales=np.full((n, 3), np.log(0.04)), opacity_logits=np.full(n, 3.0),
                     sh=np.zeros((n, 3, SH_COEFFS)), features=np.zeros((n, 8)))
    targets = [RasterizerService().rasterize(fg, camera) for camera in cameras]
    flows = [np.full((32, 32, 2), 0.5 * (v + 1)) for v in range(len(cameras))]
    reference = FlowWarpService(threads=1).warp_foreground(fg, cameras, flows, targets)
    report = FlowWarpService(threads=threads).warp_foreground(fg, cameras, flows, targets)
    np.testing.assert_array_equal(report.positions, reference.positions)
