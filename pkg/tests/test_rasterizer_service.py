import numpy as np
import pytest

from app.helpers.config_helpers import RasterConfig
from app.helpers.exceptions import RenderError, ShapeMismatchError
from app.helpers.geometry_helpers import SH_COEFFS, sh_basis
from app.services.rasterizer_service import RasterizerService
from app.services.scene_service import Camera, GaussianSet
from tests.helpers import SMOOTH_RASTER, central_difference, pinhole_camera, random_gaussians


def _weighted_energy(target, weights):
    return float(np.sum(target.color * weights["color"]) + np.sum(target.feature * weights["feature"])
                 + np.sum(target.alpha * weights["alpha"]) + np.sum(target.depth * weights["depth"]))


def _upstream(rng, camera, feature_dim):
    shape = (camera.height, camera.width)
    return {"color": rng.normal(size=shape + (3,)), "feature": rng.normal(size=shape + (feature_dim,)),
            "alpha": rng.normal(size=shape), "depth": rng.normal(size=shape)}


@pytest.mark.parametrize("attribute", ["positions", "rotations", "log_scales", "opacity_logits", "sh", "features"])
def test_backward_matches_central_differences(rng, attribute):
    rasterizer = RasterizerService(config=SMOOTH_RASTER)
    camera = pinhole_camera(width=12, height=10)
    primitives = random_gaussians(rng, 3, feature_dim=2)
    weights = _upstream(rng, camera, 2)

    target = rasterizer.rasterize(primitives, camera)
    grads = rasterizer.rasterize_backward(target, weights["color"], weights["feature"], weights["alpha"],
                                          weights["depth"])

    def energy():
        return _weighted_energy(rasterizer.rasterize(primitives, camera), weights)

    numeric = central_difference(energy, getattr(primitives, attribute))
    analytic = getattr(grads, attribute)
    scale = max(np.max(np.abs(numeric)), 1e-3)
    np.testing.assert_allclose(analytic, numeric, rtol=1e-4, atol=1e-5 * scale)


def _reference_render(primitives, camera, dilation):
    """Direct per-pixel compositing of a handful of Gaussians, sorted by depth."""
    scales = np.exp(primitives.log_scales)
    q = primitives.rotations / np.linalg.norm(primitives.rotations, axis=1, keepdims=True)
    height, width = camera.height, camera.width
    ys, xs = np.mgrid[0:height, 0:width]
    pix = np.stack([xs, ys], axis=-1).astype(np.float64)
    layers = []
    for i in range(len(primitives)):
        w, x, y, z = q[i]
        R = np.array([
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ])
        sigma = R @ np.diag(scales[i] ** 2) @ R.T
        cam = camera.R @ primitives.positions[i] + camera.t
        f, cx, cy = camera.K[0, 0], camera.K[0, 2], camera.K[1, 2]
        mean = np.array([f * cam[0] / cam[2] + cx, f * cam[1] / cam[2] + cy])
        J = np.array([[f / cam[2], 0.0, -f * cam[0] / cam[2] ** 2], [0.0, f / cam[2], -f * cam[1] / cam[2] ** 2]])
        cov2d = J @ camera.R @ sigma @ camera.R.T @ J.T + dilation * np.eye(2)
        d = pix - mean
        power = -0.5 * np.einsum("hwi,ij,hwj->hw", d, np.linalg.inv(cov2d), d)
        opacity = 1.0 / (1.0 + np.exp(-primitives.opacity_logits[i]))
        direction = primitives.positions[i] - camera.center
        direction /= np.linalg.norm(direction)
        color = np.clip(sh_basis(direction[None], 3)[0] @ primitives.sh[i].T + 0.5, 0.0, 1.0)
        layers.append((cam[2], i, opacity * np.exp(power), color))
    layers.sort(key=lambda layer: (layer[0], layer[1]))
    color = np.zeros((height, width, 3))
    alpha = np.zeros((height, width))
    depth = np.zeros((height, width))
    transmittance = np.ones((height, width))
    for z, _, a, c in layers:
        weight = transmittance * a
        color += weight[..., None] * c
        alpha += weight
        depth += weight * z
        transmittance *= 1.0 - a
    return color, alpha, depth


def test_two_gaussians_composite_front_to_back(rng):
    rasterizer = RasterizerService(config=SMOOTH_RASTER)
    camera = pinhole_camera(width=15, height=13)
    primitives = random_gaussians(rng, 2)
    primitives.positions[:, 2] = [0.4, -0.4]
    target = rasterizer.rasterize(primitives, camera)
    color, alpha, depth = _reference_render(primitives, camera, SMOOTH_RASTER.dilation)
    np.testing.assert_allclose(target.color, color, atol=1e-12)
    np.testing.assert_allclose(target.alpha, alpha, atol=1e-12)
    np.testing.assert_allclose(target.depth, depth, atol=1e-12)
    assert np.all(target.alpha <= 1.0) and np.all(target.alpha >= 0.0)


def test_sh_color_is_clipped_to_unit_range(camera):
    rasterizer = RasterizerService(config=SMOOTH_RASTER)
    primitives = random_gaussians(np.random.default_rng(0), 1)
    primitives.sh[:] = 0.0
    primitives.sh[0, 0, 0] = 10.0
    primitives.opacity_logits[:] = 20.0
    target = rasterizer.rasterize(primitives, camera)
    assert target.color.max() <= 1.0 + 1e-12
    grads = rasterizer.rasterize_backward(target, d_color=np.ones(target.color.shape))
    assert grads.sh[0, 0, 0] == 0.0


def test_render_is_deterministic_across_thread_counts(rng):
    config = RasterConfig(tile_size=4)
    camera = pinhole_camera(width=20, height=18)
    primitives = random_gaussians(rng, 12)
    upstream = rng.normal(size=(18, 20, 3))
    single = RasterizerService(config=config, threads=1)
    pooled = RasterizerService(config=config, threads=4)
    a = single.rasterize(primitives, camera)
    b = pooled.rasterize(primitives, camera)
    np.testing.assert_array_equal(a.color, b.color)
    np.testing.assert_array_equal(a.feature, b.feature)
    ga = single.rasterize_backward(a, d_color=upstream)
    gb = pooled.rasterize_backward(b, d_color=upstream)
    for name, value in ga.arrays().items():
        np.testing.assert_array_equal(value, gb.arrays()[name])


def test_tile_size_does_not_change_the_image(rng):
    camera = pinhole_camera(width=20, height=18)
    primitives = random_gaussians(rng, 6)
    small = RasterizerService(config=SMOOTH_RASTER.model_copy(update={"tile_size": 4})).rasterize(primitives, camera)
    large = RasterizerService(config=SMOOTH_RASTER).rasterize(primitives, camera)
    np.testing.assert_allclose(small.color, large.color, atol=1e-12)
    np.testing.assert_allclose(small.alpha, large.alpha, atol=1e-12)


def test_empty_scene_renders_transparent_black(camera):
    target = RasterizerService().rasterize(GaussianSet.empty(), camera)
    assert target.color.shape == (16, 16, 3)
    assert np.all(target.color == 0.0) and np.all(target.alpha == 0.0)
    assert target.contributor_set().size == 0


def test_zero_area_camera_is_rejected(rng):
    camera = pinhole_camera()
    flat = Camera(K=camera.K, R=camera.R, t=camera.t, width=0, height=16)
    with pytest.raises(RenderError):
        RasterizerService().rasterize(random_gaussians(rng, 2), flat)


def test_primitive_behind_camera_is_culled(rng, camera):
    rasterizer = RasterizerService(config=SMOOTH_RASTER)
    primitives = random_gaussians(rng, 2)
    primitives.positions[1] = [0.0, 0.0, -6.0]
    target = rasterizer.rasterize(primitives, camera)
    assert not target.projection.visible[1]
    assert 1 not in target.contributor_set()
    grads = rasterizer.rasterize_backward(target, d_color=np.ones(target.color.shape))
    assert np.all(grads.positions[1] == 0.0) and grads.opacity_logits[1] == 0.0


def test_feature_gradient_is_the_blend_weight(rng, camera):
    rasterizer = RasterizerService(config=SMOOTH_RASTER)
    primitives = random_gaussians(rng, 4)
    target = rasterizer.rasterize(primitives, camera)
    d_feature = np.zeros(target.feature.shape)
    d_feature[..., 0] = 1.0
    grads = rasterizer.rasterize_backward(target, d_feature=d_feature)
    for i in range(4):
        assert grads.features[i, 0] == pytest.approx(target.blend_weight_image(i).sum(), rel=1e-12)
        assert np.all(grads.features[i, 1:] == 0.0)


def test_contributors_are_front_to_back(rng, camera):
    rasterizer = RasterizerService(config=SMOOTH_RASTER)
    primitives = random_gaussians(rng, 5)
    target = rasterizer.rasterize(primitives, camera)
    pairs = target.contributors(8, 8)
    depths = [target.projection.depth[i] for i, _ in pairs]
    assert depths == sorted(depths)
    assert sum(w for _, w in pairs) == pytest.approx(target.alpha[8, 8], rel=1e-12)


def test_upstream_shape_is_checked(rng, camera):
    rasterizer = RasterizerService()
    target = rasterizer.rasterize(random_gaussians(rng, 2), camera)
    with pytest.raises(ShapeMismatchError):
        rasterizer.rasterize_backward(target, d_color=np.zeros((4, 4, 3)))


def test_project_gaussian_reports_mean_and_depth(camera):
    primitives = GaussianSet(positions=np.array([[0.2, -0.1, 0.0]]), rotations=np.array([[1.0, 0, 0, 0]]),
                             log_scales=np.full((1, 3), np.log(0.1)), opacity_logits=np.zeros(1),
                             sh=np.zeros((1, 3, SH_COEFFS)), features=np.zeros((1, 8)))
    result = RasterizerService().project_gaussian(primitives.primitive(0), camera)
    assert result["depth"] == pytest.approx(4.0)
    np.testing.assert_allclose(result["mean2d"], [20.0 * 0.2 / 4.0 + 7.5, 20.0 * -0.1 / 4.0 + 7.5])
