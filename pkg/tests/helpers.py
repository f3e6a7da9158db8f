from typing import Callable

import numpy as np

from app.helpers.config_helpers import RasterConfig
from app.helpers.geometry_helpers import SH_COEFFS
from app.services.neural_heads_service import LinearAutoencoder, MlpParams, SemanticHeads
from app.services.scene_service import FEATURE_DIM, Camera, GaussianSet, SceneModel

# one tile, boxes wider than the image: the rendered buffers are smooth in every parameter
SMOOTH_RASTER = RasterConfig(tile_size=64, radius_sigma=50.0, transmittance_cutoff=0.0)


def pinhole_camera(width: int = 16, height: int = 16, focal: float = 20.0, distance: float = 4.0,
                   yaw_deg: float = 0.0) -> Camera:
    """Camera on a circle of radius `distance` around the origin, looking at it."""
    yaw = np.radians(yaw_deg)
    c, s = np.cos(yaw), np.sin(yaw)
    R = np.array([[c, 0.0, -s], [0.0, 1.0, 0.0], [s, 0.0, c]])
    K = np.array([[focal, 0.0, (width - 1) / 2.0], [0.0, focal, (height - 1) / 2.0], [0.0, 0.0, 1.0]])
    return Camera(K=K, R=R, t=np.array([0.0, 0.0, distance]), width=width, height=height)


def random_gaussians(rng: np.random.Generator, n: int, spread: float = 0.3, scale: float = 0.15,
                     sh_scale: float = 0.01, feature_dim: int = FEATURE_DIM) -> GaussianSet:
    """Gaussians near the origin with small SH so the raw color stays inside (0, 1)."""
    rotations = rng.normal(size=(n, 4))
    rotations /= np.linalg.norm(rotations, axis=1, keepdims=True)
    return GaussianSet(
        positions=rng.uniform(-spread, spread, size=(n, 3)),
        rotations=rotations,
        log_scales=np.log(scale) + rng.uniform(-0.3, 0.3, size=(n, 3)),
        opacity_logits=rng.uniform(-1.0, 1.0, size=n),
        sh=rng.uniform(-sh_scale, sh_scale, size=(n, 3, SH_COEFFS)),
        features=rng.normal(size=(n, feature_dim)),
    )


def central_difference(fn: Callable[[], float], array: np.ndarray, eps: float = 1e-6) -> np.ndarray:
    """Numerical gradient of `fn()` with respect to every entry of `array`, perturbed in place."""
    grad = np.zeros_like(array, dtype=np.float64)
    flat = array.reshape(-1)
    out = grad.reshape(-1)
    for i in range(flat.size):
        original = flat[i]
        flat[i] = original + eps
        plus = fn()
        flat[i] = original - eps
        minus = fn()
        flat[i] = original
        out[i] = (plus - minus) / (2.0 * eps)
    return grad


def one_hot_heads(n_instances: int = 2, feature_dim: int = FEATURE_DIM, code_dim: int = 6) -> SemanticHeads:
    """Linear heads: feature e_d classifies as d and decodes to the raw embedding e_d."""
    classifier_w = np.zeros((feature_dim, n_instances + 1))
    classifier_w[np.arange(n_instances + 1), np.arange(n_instances + 1)] = 10.0
    semantic_w = np.eye(feature_dim, code_dim)
    return SemanticHeads(
        classifier=MlpParams([classifier_w], [np.zeros(n_instances + 1)], ["linear"]),
        semantic=MlpParams([semantic_w], [np.zeros(code_dim)], ["linear"]),
        autoencoder=LinearAutoencoder(enc_w=np.eye(code_dim), enc_b=np.zeros(code_dim), dec_w=np.eye(code_dim),
                                      dec_b=np.zeros(code_dim)),
    )


def two_instance_scene(frame_index: int = 0) -> SceneModel:
    """Empty background and one opaque blob per instance at x = -0.4 and x = +0.4."""
    features = np.zeros((2, FEATURE_DIM))
    features[0, 1] = 1.0
    features[1, 2] = 1.0
    fg = GaussianSet(positions=np.array([[-0.4, 0.0, 0.0], [0.4, 0.0, 0.0]]),
                     rotations=np.tile([1.0, 0.0, 0.0, 0.0], (2, 1)), log_scales=np.full((2, 3), np.log(0.08)),
                     opacity_logits=np.full(2, 4.0), sh=np.zeros((2, 3, SH_COEFFS)), features=features)
    return SceneModel(bg=GaussianSet.empty(), fg=fg, frame_index=frame_index)
