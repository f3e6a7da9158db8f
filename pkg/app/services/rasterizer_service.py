from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np
from joblib import Parallel, delayed

from app.helpers.codec_helpers import write_f32m, write_png_rgb
from app.helpers.config_helpers import RasterConfig
from app.helpers.exceptions import RenderError, ShapeMismatchError
from app.helpers.geometry_helpers import sh_basis, sh_basis_jacobian
from app.logFile import logger
from app.services.scene_service import Activation, Camera, GaussianSet, SceneModel, SceneService


@dataclass
class Projection:
    """Per-primitive screen-space quantities of one view; entries of culled primitives are unused."""

    visible: np.ndarray
    mean2d: np.ndarray
    cov2d: np.ndarray
    conic: np.ndarray
    depth: np.ndarray
    cam_points: np.ndarray
    jacobian: np.ndarray
    cam_cov: np.ndarray
    bbox: np.ndarray
    directions: np.ndarray
    distances: np.ndarray
    basis: np.ndarray
    colors: np.ndarray
    color_active: np.ndarray


@dataclass
class TileRecord:
    """Contributors of one tile: primitive indices in depth order and their (N_t, P) blend weights."""

    y0: int
    y1: int
    x0: int
    x1: int
    indices: np.ndarray
    weights: np.ndarray


@dataclass
class RenderTarget:
    """
    Output of one rasterization pass.

    Attributes:
        color (np.ndarray): (H, W, 3) blended color in [0, 1].
        feature (np.ndarray): (H, W, F) blended semantic features.
        alpha (np.ndarray): (H, W) accumulated opacity.
        depth (np.ndarray): (H, W) blended camera-space depth.
        tiles (list): TileRecord per tile, the contributor records kept for backward.
    """

    color: np.ndarray
    feature: np.ndarray
    alpha: np.ndarray
    depth: np.ndarray
    tiles: List[TileRecord]
    primitives: GaussianSet
    features_in: np.ndarray
    activation: Activation
    projection: Projection
    camera: Camera
    config: RasterConfig

    @property
    def shape(self) -> Tuple[int, int]:
        return self.alpha.shape

    def contributors(self, row: int, col: int) -> List[Tuple[int, float]]:
        """(primitive index, blend weight) pairs of one pixel, front to back, zero weights dropped."""
        for tile in self.tiles:
            if tile.y0 <= row < tile.y1 and tile.x0 <= col < tile.x1:
                p = (row - tile.y0) * (tile.x1 - tile.x0) + (col - tile.x0)
                w = tile.weights[:, p]
                keep = w > 0
                return list(zip(tile.indices[keep].tolist(), w[keep].tolist()))
        return []

    def contributor_set(self) -> np.ndarray:
        """Sorted indices of every primitive with a non-zero blend weight somewhere in the image."""
        hits = [tile.indices[np.any(tile.weights > 0, axis=1)] for tile in self.tiles]
        if not hits:
            return np.zeros(0, dtype=np.int64)
        return np.unique(np.concatenate(hits))

    def blend_weight_image(self, index: int) -> np.ndarray:
        """(H, W) blend weights of one primitive; equals dF/df for that primitive."""
        out = np.zeros(self.shape)
        for tile in self.tiles:
            hit = np.flatnonzero(tile.indices == index)
            if hit.size:
                out[tile.y0:tile.y1, tile.x0:tile.x1] = tile.weights[hit[0]].reshape(tile.y1 - tile.y0,
                                                                                     tile.x1 - tile.x0)
        return out

    def weight_at_projection(self) -> np.ndarray:
        """
        Blend weight of every primitive at the pixel nearest its projected mean.

        Returns:
            np.ndarray: (N,) weights; 0 for culled or off-image primitives.
        """
        n = len(self.primitives)
        out = np.zeros(n)
        height, width = self.shape
        pix = np.rint(self.projection.mean2d).astype(np.int64)
        for tile in self.tiles:
            idx = tile.indices
            if idx.size == 0:
                continue
            cols, rows = pix[idx, 0], pix[idx, 1]
            inside = (cols >= tile.x0) & (cols < tile.x1) & (rows >= tile.y0) & (rows < tile.y1)
            if not np.any(inside):
                continue
            p = (rows[inside] - tile.y0) * (tile.x1 - tile.x0) + (cols[inside] - tile.x0)
            out[idx[inside]] = tile.weights[np.flatnonzero(inside), p]
        return out

    def dominant_contributor(self) -> np.ndarray:
        """(H, W) index of the primitive with the largest blend weight per pixel, -1 where nothing contributes."""
        out = np.full(self.shape, -1, dtype=np.int64)
        for tile in self.tiles:
            if tile.indices.size == 0:
                continue
            best = np.argmax(tile.weights, axis=0)
            hit = tile.weights[best, np.arange(best.size)] > 0
            block = np.where(hit, tile.indices[best], -1)
            out[tile.y0:tile.y1, tile.x0:tile.x1] = block.reshape(tile.y1 - tile.y0, tile.x1 - tile.x0)
        return out

    def label_weights(self, labels: np.ndarray, n_labels: int) -> np.ndarray:
        """
        Per-pixel sum of blend weights grouped by a per-primitive label.

        Args:
            labels (np.ndarray): (N,) integer labels in [0, n_labels).
            n_labels (int): Number of label channels.

        Returns:
            np.ndarray: (H, W, n_labels) accumulated weights.
        """
        out = np.zeros(self.shape + (n_labels,))
        for tile in self.tiles:
            if tile.indices.size == 0:
                continue
            onehot = np.eye(n_labels)[labels[tile.indices]]
            block = tile.weights.T @ onehot
            out[tile.y0:tile.y1, tile.x0:tile.x1] = block.reshape(tile.y1 - tile.y0, tile.x1 - tile.x0, n_labels)
        return out


@dataclass
class Gradients:
    """
    Per-primitive partial derivatives, named like the GaussianSet attributes they belong to.

    Attributes:
        mean2d_norm (np.ndarray): (N,) magnitude of dL/d(mean2d), the densification statistic.
    """

    positions: np.ndarray
    rotations: np.ndarray
    log_scales: np.ndarray
    opacity_logits: np.ndarray
    sh: np.ndarray
    features: np.ndarray
    mean2d_norm: np.ndarray = field(default=None)

    @classmethod
    def zeros_like(cls, primitives: GaussianSet) -> "Gradients":
        return cls(**{name: np.zeros_like(value) for name, value in primitives.arrays().items()},
                   mean2d_norm=np.zeros(len(primitives)))

    def arrays(self) -> Dict[str, np.ndarray]:
        return {"positions": self.positions, "rotations": self.rotations, "log_scales": self.log_scales,
                "opacity_logits": self.opacity_logits, "sh": self.sh, "features": self.features}

    def all_finite(self) -> bool:
        return all(np.all(np.isfinite(v)) for v in self.arrays().values())


class RasterizerService:
    """
    Tiled front-to-back splatting of color, semantic features, alpha and depth, with an analytic backward pass.

    Primitives are projected with the EWA approximation, sorted once per view by
    (depth, index) and blended within fixed-size tiles. Tiles run on a joblib
    thread pool; results are gathered back in tile order so repeated renders and
    gradient reductions are bit-identical.
    """

    def __init__(self, scene_service: Optional[SceneService] = None, config: Optional[RasterConfig] = None,
                 threads: int = 1):
        self.scene = scene_service or SceneService()
        self.config = config or RasterConfig()
        self.threads = max(1, int(threads))

    def set_threads(self, threads: int) -> None:
        self.threads = max(1, int(threads))

    def project(self, primitives: GaussianSet, activation: Activation, camera: Camera,
                config: Optional[RasterConfig] = None) -> Projection:
        """
        EWA projection of every primitive into one camera.

        Args:
            primitives (GaussianSet): Source primitives.
            activation (Activation): Their activated quantities.
            camera (Camera): Target view.
            config (RasterConfig | None): Overrides the service configuration.

        Returns:
            Projection: Screen-space means, dilated covariances, conics, depths and 3-sigma boxes.
        """
        cfg = config or self.config
        n = len(primitives)
        W, t, K = camera.R, camera.t, camera.K
        cam = primitives.positions @ W.T + t
        z = cam[:, 2]
        front = z > cfg.near_plane
        zs = np.where(front, z, 1.0)
        x, y = cam[:, 0], cam[:, 1]
        a, b, f = K[0, 0], K[0, 1], K[1, 1]

        mean2d = np.stack([(a * x + b * y) / zs + K[0, 2], f * y / zs + K[1, 2]], axis=-1)
        J = np.zeros((n, 2, 3))
        J[:, 0, 0] = a / zs
        J[:, 0, 1] = b / zs
        J[:, 0, 2] = -(a * x + b * y) / zs ** 2
        J[:, 1, 1] = f / zs
        J[:, 1, 2] = -f * y / zs ** 2
        V = W @ activation.covariances @ W.T
        cov2d = J @ V @ np.swapaxes(J, -1, -2) + cfg.dilation * np.eye(2)
        det = cov2d[:, 0, 0] * cov2d[:, 1, 1] - cov2d[:, 0, 1] * cov2d[:, 1, 0]
        det = np.where(det > 0, det, 1.0)
        conic = np.empty_like(cov2d)
        conic[:, 0, 0] = cov2d[:, 1, 1] / det
        conic[:, 1, 1] = cov2d[:, 0, 0] / det
        conic[:, 0, 1] = -cov2d[:, 0, 1] / det
        conic[:, 1, 0] = -cov2d[:, 1, 0] / det

        rx = cfg.radius_sigma * np.sqrt(np.maximum(cov2d[:, 0, 0], 0.0))
        ry = cfg.radius_sigma * np.sqrt(np.maximum(cov2d[:, 1, 1], 0.0))
        bbox = np.stack([mean2d[:, 0] - rx, mean2d[:, 0] + rx, mean2d[:, 1] - ry, mean2d[:, 1] + ry], axis=-1)
        on_image = ((bbox[:, 1] >= 0) & (bbox[:, 0] <= camera.width - 1)
                    & (bbox[:, 3] >= 0) & (bbox[:, 2] <= camera.height - 1))
        visible = front & on_image & np.all(np.isfinite(mean2d), axis=1)

        offsets = primitives.positions - camera.center
        distances = np.linalg.norm(offsets, axis=1)
        directions = offsets / np.maximum(distances, 1e-12)[:, None]
        basis = sh_basis(directions, cfg.sh_degree)
        raw = np.einsum("nk,nck->nc", basis, primitives.sh) + 0.5
        color_active = (raw > 0.0) & (raw < 1.0)
        colors = np.clip(raw, 0.0, 1.0)
        return Projection(visible=visible, mean2d=mean2d, cov2d=cov2d, conic=conic, depth=z, cam_points=cam,
                          jacobian=J, cam_cov=V, bbox=bbox, directions=directions, distances=distances,
                          basis=basis, colors=colors, color_active=color_active)

    def project_gaussian(self, primitive, camera: Camera) -> Optional[Dict[str, np.ndarray]]:
        """
        Project one primitive.

        Returns:
            dict | None: {"mean2d", "cov2d", "depth"}, or None when culled.
        """
        primitives = GaussianSet.from_primitives([primitive])
        proj = self.project(primitives, self.scene.activate(primitives), camera)
        if not proj.visible[0]:
            return None
        return {"mean2d": proj.mean2d[0], "cov2d": proj.cov2d[0], "depth": float(proj.depth[0])}

    def render_scene(self, scene: SceneModel, camera: Camera, config: Optional[RasterConfig] = None) -> RenderTarget:
        return self.rasterize(scene.combined(), camera, config=config)

    def rasterize(self, primitives: GaussianSet, camera: Camera, features: Optional[np.ndarray] = None,
                  config: Optional[RasterConfig] = None) -> RenderTarget:
        """
        Render primitives into one camera.

        Args:
            primitives (GaussianSet): Primitives to splat (may be empty).
            camera (Camera): Target view.
            features (np.ndarray | None): (N, F) per-primitive channels blended like color;
                defaults to the primitives' semantic features.
            config (RasterConfig | None): Overrides the service configuration.

        Returns:
            RenderTarget: Color, feature, alpha and depth buffers plus contributor records.

        Raises:
            RenderError: If the camera resolution has zero area.
        """
        cfg = config or self.config
        height, width = int(camera.height), int(camera.width)
        if height <= 0 or width <= 0:
            raise RenderError(f"cannot render a zero-area image ({width}x{height})")
        features_in = primitives.features if features is None else np.asarray(features, dtype=np.float64)
        if features_in.shape[0] != len(primitives):
            raise ShapeMismatchError(f"{features_in.shape[0]} feature rows for {len(primitives)} primitives")
        feature_dim = features_in.shape[1]

        activation = self.scene.activate(primitives)
        proj = self.project(primitives, activation, camera, cfg)
        candidates = np.flatnonzero(proj.visible)
        order = candidates[np.lexsort((candidates, proj.depth[candidates]))]
        values = np.hstack([proj.colors, features_in, np.ones((len(primitives), 1)), proj.depth[:, None]])

        tiles = list(self._tile_grid(height, width, cfg.tile_size))
        jobs = (delayed(self._tile_forward)(tile, order, proj, activation.opacities, values, cfg) for tile in tiles)
        results = self._run(jobs, len(tiles))

        channels = np.zeros((height, width, values.shape[1]))
        records = []
        for record, block in results:
            channels[record.y0:record.y1, record.x0:record.x1] = block.reshape(
                record.y1 - record.y0, record.x1 - record.x0, -1)
            records.append(record)
        return RenderTarget(
            color=channels[..., 0:3],
            feature=channels[..., 3:3 + feature_dim],
            alpha=channels[..., 3 + feature_dim],
            depth=channels[..., 4 + feature_dim],
            tiles=records,
            primitives=primitives,
            features_in=features_in,
            activation=activation,
            projection=proj,
            camera=camera,
            config=cfg,
        )

    def rasterize_backward(self, target: RenderTarget, d_color: Optional[np.ndarray] = None,
                           d_feature: Optional[np.ndarray] = None, d_alpha: Optional[np.ndarray] = None,
                           d_depth: Optional[np.ndarray] = None) -> Gradients:
        """
        Chain upstream image gradients back to every primitive attribute.

        Args:
            target (RenderTarget): The forward pass to differentiate.
            d_color (np.ndarray | None): (H, W, 3) gradient on the color buffer.
            d_feature (np.ndarray | None): (H, W, F) gradient on the feature buffer.
            d_alpha (np.ndarray | None): (H, W) gradient on the alpha buffer.
            d_depth (np.ndarray | None): (H, W) gradient on the depth buffer.

        Returns:
            Gradients: Partials for positions, rotations, log-scales, opacity logits, SH and features,
                plus the per-primitive 2D mean-gradient magnitude.

        Raises:
            ShapeMismatchError: If an upstream buffer does not match the render.
        """
        height, width = target.shape
        feature_dim = target.feature.shape[-1]
        upstream = [
            self._upstream(d_color, (height, width, 3), "color"),
            self._upstream(d_feature, (height, width, feature_dim), "feature"),
            self._upstream(d_alpha, (height, width), "alpha")[..., None],
            self._upstream(d_depth, (height, width), "depth")[..., None],
        ]
        g_image = np.concatenate(upstream, axis=-1)

        primitives, proj, cfg = target.primitives, target.projection, target.config
        n = len(primitives)
        values = np.hstack([proj.colors, target.features_in, np.ones((n, 1)), proj.depth[:, None]])
        jobs = (delayed(self._tile_backward)(record, g_image, proj, target.activation.opacities, values, cfg)
                for record in target.tiles)
        results = self._run(jobs, len(target.tiles))

        d_values = np.zeros_like(values)
        d_opacity = np.zeros(n)
        d_mean2d = np.zeros((n, 2))
        d_conic = np.zeros((n, 2, 2))
        for indices, dv, dop, dm, dc in results:
            if indices.size == 0:
                continue
            d_values[indices] += dv
            d_opacity[indices] += dop
            d_mean2d[indices] += dm
            d_conic[indices] += dc

        grads = Gradients.zeros_like(primitives)
        if target.features_in.shape == primitives.features.shape:
            grads.features = d_values[:, 3:3 + feature_dim].copy()
        d_colors = d_values[:, 0:3] * proj.color_active
        d_depth_prim = d_values[:, 4 + feature_dim]

        # conic -> 2D covariance -> camera covariance and projection Jacobian
        C = proj.conic
        d_cov2d = -C @ d_conic @ C
        J, V = proj.jacobian, proj.cam_cov
        d_V = np.swapaxes(J, -1, -2) @ d_cov2d @ J
        d_J = 2.0 * d_cov2d @ J @ V
        d_cam = np.einsum("nij,ni->nj", J, d_mean2d)

        W, K = target.camera.R, target.camera.K
        a, b, f = K[0, 0], K[0, 1], K[1, 1]
        x, y = proj.cam_points[:, 0], proj.cam_points[:, 1]
        z = np.where(proj.visible, proj.depth, 1.0)
        d_cam[:, 0] += d_J[:, 0, 2] * (-a / z ** 2)
        d_cam[:, 1] += d_J[:, 0, 2] * (-b / z ** 2) + d_J[:, 1, 2] * (-f / z ** 2)
        d_cam[:, 2] += (d_J[:, 0, 0] * (-a / z ** 2) + d_J[:, 0, 1] * (-b / z ** 2)
                        + d_J[:, 0, 2] * 2.0 * (a * x + b * y) / z ** 3
                        + d_J[:, 1, 1] * (-f / z ** 2) + d_J[:, 1, 2] * 2.0 * f * y / z ** 3)
        d_cam[:, 2] += d_depth_prim
        d_cam[~proj.visible] = 0.0
        d_positions = d_cam @ W

        # view-dependent color
        grads.sh = d_colors[:, :, None] * proj.basis[:, None, :]
        d_dir = np.einsum("nc,nck,nkj->nj", d_colors, primitives.sh, sh_basis_jacobian(proj.directions, cfg.sh_degree))
        dirs = proj.directions
        d_dir = d_dir - dirs * np.sum(dirs * d_dir, axis=1, keepdims=True)
        d_positions += d_dir / np.maximum(proj.distances, 1e-12)[:, None]
        grads.positions = d_positions

        d_sigma = W.T @ d_V @ W
        grads.rotations, grads.log_scales = self.scene.covariance_backward(primitives, target.activation, d_sigma)
        sigma = target.activation.opacities
        grads.opacity_logits = d_opacity * sigma * (1.0 - sigma)
        grads.mean2d_norm = np.linalg.norm(d_mean2d, axis=1)
        return grads

    def save_render(self, target: RenderTarget, png_path: Path, feature_path: Optional[Path] = None,
                    alpha_path: Optional[Path] = None, depth_path: Optional[Path] = None) -> None:
        """Write the color buffer as 8-bit PNG and any requested buffers as F32M files."""
        write_png_rgb(png_path, target.color)
        if feature_path is not None:
            write_f32m(feature_path, target.feature)
        if alpha_path is not None:
            write_f32m(alpha_path, target.alpha[..., None])
        if depth_path is not None:
            write_f32m(depth_path, target.depth[..., None])
        logger.info(f"Render written to {png_path}")

    @staticmethod
    def _tile_grid(height: int, width: int, tile: int):
        for y0 in range(0, height, tile):
            for x0 in range(0, width, tile):
                yield y0, min(y0 + tile, height), x0, min(x0 + tile, width)

    def _run(self, jobs, count: int) -> list:
        if self.threads == 1 or count < 2:
            return [fn(*args, **kwargs) for fn, args, kwargs in jobs]
        return Parallel(n_jobs=self.threads, prefer="threads")(jobs)

    @staticmethod
    def _upstream(grad: Optional[np.ndarray], shape: Tuple[int, ...], name: str) -> np.ndarray:
        if grad is None:
            return np.zeros(shape)
        grad = np.asarray(grad, dtype=np.float64)
        if grad.shape != shape:
            raise ShapeMismatchError(f"upstream {name} gradient has shape {grad.shape}, expected {shape}")
        return grad

    @staticmethod
    def _tile_pixels(y0: int, y1: int, x0: int, x1: int) -> np.ndarray:
        ys, xs = np.mgrid[y0:y1, x0:x1]
        return np.stack([xs.ravel(), ys.ravel()], axis=-1).astype(np.float64)

    def _tile_blend(self, tile, order, proj: Projection, opacities: np.ndarray, cfg: RasterConfig):
        y0, y1, x0, x1 = tile
        box = proj.bbox[order]
        overlap = (box[:, 1] >= x0) & (box[:, 0] <= x1 - 1) & (box[:, 3] >= y0) & (box[:, 2] <= y1 - 1)
        indices = order[overlap]
        pix = self._tile_pixels(y0, y1, x0, x1)
        d = pix[None, :, :] - proj.mean2d[indices][:, None, :]
        con = proj.conic[indices]
        dx, dy = d[..., 0], d[..., 1]
        power = -0.5 * (con[:, 0, 0, None] * dx * dx + 2.0 * con[:, 0, 1, None] * dx * dy
                        + con[:, 1, 1, None] * dy * dy)
        G = np.exp(power)
        alpha = opacities[indices, None] * G
        one_minus = 1.0 - alpha
        T = np.ones_like(alpha)
        if indices.size > 1:
            T[1:] = np.cumprod(one_minus[:-1], axis=0)
        live = T >= cfg.transmittance_cutoff
        weights = alpha * T * live
        return indices, d, con, G, alpha, one_minus, T, live, weights

    def _tile_forward(self, tile, order, proj, opacities, values, cfg):
        indices, _, _, _, _, _, _, _, weights = self._tile_blend(tile, order, proj, opacities, cfg)
        block = weights.T @ values[indices]
        y0, y1, x0, x1 = tile
        return TileRecord(y0=y0, y1=y1, x0=x0, x1=x1, indices=indices, weights=weights), block

    def _tile_backward(self, record: TileRecord, g_image, proj, opacities, values, cfg):
        tile = (record.y0, record.y1, record.x0, record.x1)
        order = record.indices
        indices, d, con, G, alpha, one_minus, T, live, weights = self._tile_blend(tile, order, proj, opacities, cfg)
        g = g_image[record.y0:record.y1, record.x0:record.x1].reshape(-1, g_image.shape[-1])
        if indices.size == 0:
            return indices, None, None, None, None
        vals = values[indices]
        s = vals @ g.T
        d_vals = weights @ g
        ws = weights * s
        after = np.cumsum(ws[::-1], axis=0)[::-1] - ws
        d_alpha = (T * s - after / np.maximum(one_minus, 1e-12)) * live
        d_opacity = np.sum(d_alpha * G, axis=1)
        d_power = d_alpha * opacities[indices, None] * G
        dx, dy = d[..., 0], d[..., 1]
        cdx = con[:, 0, 0, None] * dx + con[:, 0, 1, None] * dy
        cdy = con[:, 1, 0, None] * dx + con[:, 1, 1, None] * dy
        d_mean = np.stack([np.sum(d_power * cdx, axis=1), np.sum(d_power * cdy, axis=1)], axis=-1)
        d_con = np.empty((indices.size, 2, 2))
        d_con[:, 0, 0] = -0.5 * np.sum(d_power * dx * dx, axis=1)
        d_con[:, 0, 1] = -0.5 * np.sum(d_power * dx * dy, axis=1)
        d_con[:, 1, 0] = d_con[:, 0, 1]
        d_con[:, 1, 1] = -0.5 * np.sum(d_power * dy * dy, axis=1)
        return indices, d_vals, d_opacity, d_mean, d_con
