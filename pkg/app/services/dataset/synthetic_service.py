from pathlib import Path
from typing import Dict, List, Literal, Optional

import numpy as np
import orjson
from pydantic import BaseModel, Field, model_validator

from app.helpers.codec_helpers import atomic_write_bytes, write_embeddings, write_flow, write_label_png, write_png_rgb
from app.helpers.exceptions import PipelineError
from app.helpers.geometry_helpers import (
    SH_COEFFS,
    quaternion_from_euler_degrees,
    quaternion_multiply,
    rgb_to_sh_dc,
    sh_dc_to_rgb,
)
from app.logFile import logger
from app.services.dataset.dataset_service import DatasetManifest, write_camera, write_manifest
from app.services.rasterizer_service import RasterizerService
from app.services.scene_service import FEATURE_DIM, Camera, GaussianSet


class EventSpec(BaseModel):
    """Frames [start, end] during which one instance carries a distinct embedding."""

    instance: int = Field(ge=1)
    start: int = Field(ge=0)
    end: int = Field(ge=0)


class SyntheticSpec(BaseModel):
    views: int = Field(default=4, ge=1)
    frames: int = Field(default=10, ge=1)
    instances: int = Field(default=2, ge=0, le=254)
    width: int = Field(default=128, ge=8)
    height: int = Field(default=128, ge=8)
    motion: Literal["static", "translation", "rotation", "wobble"] = "translation"
    seed: int = 0
    raw_dim: int = Field(default=32, ge=6)
    blobs_per_instance: int = Field(default=60, ge=1)
    background_grid: int = Field(default=24, ge=2)
    permute_labels: bool = False
    event: Optional[EventSpec] = None

    @model_validator(mode="after")
    def check_embedding_room(self) -> "SyntheticSpec":
        needed = self.instances + (1 if self.event else 0)
        if self.raw_dim < needed:
            raise ValueError(f"raw_dim {self.raw_dim} cannot hold {needed} orthogonal embeddings")
        if self.event and (self.event.instance > self.instances or self.event.end < self.event.start):
            raise ValueError("event must name an existing instance and a non-empty frame range")
        return self


def look_at_camera(center: np.ndarray, target: np.ndarray, focal: float, width: int, height: int) -> Camera:
    """Pinhole camera at `center` looking at `target` with world +z up (x right, y down, z forward)."""
    forward = target - center
    forward /= np.linalg.norm(forward)
    right = np.cross(forward, np.array([0.0, 0.0, 1.0]))
    right /= np.linalg.norm(right)
    down = np.cross(forward, right)
    R = np.stack([right, down, forward])
    K = np.array([[focal, 0.0, (width - 1) / 2.0], [0.0, focal, (height - 1) / 2.0], [0.0, 0.0, 1.0]])
    return Camera(K=K, R=R, t=-R @ center, width=width, height=height)


class SyntheticService:
    """
    Generates ground-truth-complete sequences: a textured ground plane and D moving blob clusters
    rendered with the pipeline's own rasterizer.
    """

    PLANE_HALF = 2.0
    TARGET = np.array([0.0, 0.0, 0.25])

    def __init__(self, rasterizer: Optional[RasterizerService] = None):
        self.rasterizer = rasterizer or RasterizerService()

    def build_cameras(self, spec: SyntheticSpec) -> List[Camera]:
        cameras = []
        for v in range(spec.views):
            angle = 2.0 * np.pi * v / spec.views + 0.25
            center = np.array([3.0 * np.cos(angle), 3.0 * np.sin(angle), 2.2])
            cameras.append(look_at_camera(center, self.TARGET, float(spec.width), spec.width, spec.height))
        return cameras

    def build_background(self, spec: SyntheticSpec) -> GaussianSet:
        g = spec.background_grid
        spacing = 2.0 * self.PLANE_HALF / g
        coords = (np.arange(g) + 0.5) * spacing - self.PLANE_HALF
        xs, ys = np.meshgrid(coords, coords, indexing="ij")
        n = g * g
        positions = np.stack([xs.ravel(), ys.ravel(), np.zeros(n)], axis=-1)
        ii, jj = np.meshgrid(np.arange(g), np.arange(g), indexing="ij")
        checker = ((ii.ravel() // 3 + jj.ravel() // 3) % 2).astype(np.float64)
        rgb = np.stack([0.25 + 0.45 * checker, 0.3 + 0.2 * (xs.ravel() / self.PLANE_HALF + 1.0) / 2.0,
                        0.55 - 0.3 * checker], axis=-1)
        sh = np.zeros((n, 3, SH_COEFFS))
        sh[:, :, 0] = rgb_to_sh_dc(rgb)
        return GaussianSet(
            positions=positions,
            rotations=np.tile([1.0, 0.0, 0.0, 0.0], (n, 1)),
            log_scales=np.tile(np.log([0.6 * spacing, 0.6 * spacing, 0.02 * spacing]), (n, 1)),
            opacity_logits=np.full(n, 5.0),
            sh=sh,
            features=np.zeros((n, FEATURE_DIM)),
        )

    def build_instances(self, spec: SyntheticSpec, rng: np.random.Generator):
        parts, labels, centers = [], [], []
        for d in range(1, spec.instances + 1):
            theta = 2.0 * np.pi * (d - 1) / max(spec.instances, 1) + 0.3
            center = np.array([0.8 * np.cos(theta), 0.8 * np.sin(theta), 0.35])
            n = spec.blobs_per_instance
            positions = center + rng.normal(0.0, 0.1, size=(n, 3))
            positions[:, 2] = np.maximum(positions[:, 2], 0.12)
            hue = np.array([np.cos(theta), np.cos(theta + 2.1), np.cos(theta + 4.2)])
            rgb = np.clip(0.5 + 0.4 * hue + rng.normal(0.0, 0.03, size=(n, 3)), 0.05, 0.95)
            sh = np.zeros((n, 3, SH_COEFFS))
            sh[:, :, 0] = rgb_to_sh_dc(rgb)
            parts.append(GaussianSet(
                positions=positions,
                rotations=np.tile([1.0, 0.0, 0.0, 0.0], (n, 1)),
                log_scales=np.full((n, 3), np.log(0.06)),
                opacity_logits=np.full(n, 4.0),
                sh=sh,
                features=np.zeros((n, FEATURE_DIM)),
            ))
            labels.append(np.full(n, d))
            centers.append(center)
        fg = GaussianSet.empty()
        for part in parts:
            fg = fg.concat(part)
        return fg, (np.concatenate(labels) if labels else np.zeros(0, dtype=np.int64)), np.array(centers)

    def move(self, spec: SyntheticSpec, fg0: GaussianSet, labels: np.ndarray, centers: np.ndarray, t: int,
             motion_params: Dict[str, np.ndarray]) -> GaussianSet:
        """Ground-truth foreground state at frame t."""
        fg = fg0.copy()
        if spec.motion == "translation":
            fg.positions = fg0.positions + t * motion_params["velocity"][labels - 1]
        elif spec.motion == "rotation":
            for d in range(1, spec.instances + 1):
                idx = labels == d
                angle = float(motion_params["omega"][d - 1]) * t
                q = quaternion_from_euler_degrees(np.array([0.0, 0.0, angle]))
                c, s = np.cos(np.radians(angle)), np.sin(np.radians(angle))
                Rz = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
                fg.positions[idx] = (fg0.positions[idx] - centers[d - 1]) @ Rz.T + centers[d - 1]
                fg.rotations[idx] = quaternion_multiply(np.broadcast_to(q, (int(idx.sum()), 4)), fg0.rotations[idx])
        elif spec.motion == "wobble":
            phase = 2.0 * np.pi * t / 8.0 + motion_params["phase"]
            fg.positions = fg0.positions + motion_params["amplitude"] * np.sin(phase)[:, None]
        return fg

    def gen_synthetic(self, spec: SyntheticSpec, out_dir: Path) -> Path:
        """
        Write a dataset directory and its ground-truth sidecar.

        Args:
            spec (SyntheticSpec): Scene size, motion model and seed.
            out_dir (Path): Destination directory (created).

        Returns:
            Path: The manifest file.
        """
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        rng = np.random.default_rng(spec.seed)
        cameras = self.build_cameras(spec)
        bg = self.build_background(spec)
        fg0, labels, centers = self.build_instances(spec, rng)
        D = spec.instances
        motion_params = {
            "velocity": np.stack([0.04 * np.array([np.cos(a), np.sin(a), 0.0])
                                  for a in rng.uniform(0, 2 * np.pi, size=D)]) if D else np.zeros((0, 3)),
            "omega": rng.choice([-8.0, 8.0], size=D),
            "phase": rng.uniform(0, 2 * np.pi, size=len(fg0)),
            "amplitude": rng.normal(0.0, 0.02, size=(len(fg0), 3)),
        }
        basis, _ = np.linalg.qr(rng.normal(size=(spec.raw_dim, spec.raw_dim)))
        permutations = [np.arange(D + 1) for _ in range(spec.views)]
        if spec.permute_labels:
            for v in range(spec.views):
                permutations[v] = np.concatenate([[0], 1 + rng.permutation(D)])

        manifest = DatasetManifest(
            name=f"synthetic-{spec.motion}-{spec.seed}",
            views=spec.views, frames=spec.frames, instances=D, width=spec.width, height=spec.height,
            raw_dim=spec.raw_dim,
            cameras=[f"cameras/cam_{v:02d}.json" for v in range(spec.views)],
            canonical_template="canonical/v{view:02d}.png",
            scene_bounds=[[-self.PLANE_HALF, -self.PLANE_HALF, -0.1], [self.PLANE_HALF, self.PLANE_HALF, 1.0]],
            sparse_points="points3d.json",
            ground_truth="ground_truth.json",
        )
        for v, camera in enumerate(cameras):
            write_camera(out_dir / manifest.cameras[v], camera)

        point_rows = rng.choice(len(bg), size=min(len(bg), 400), replace=False)
        points = {"positions": bg.positions[np.sort(point_rows)] + rng.normal(0, 0.01, size=(point_rows.size, 3)),
                  "colors": np.clip(sh_dc_to_rgb(bg.sh[np.sort(point_rows), :, 0]), 0, 1)}
        atomic_write_bytes(out_dir / "points3d.json", orjson.dumps(points, option=orjson.OPT_SERIALIZE_NUMPY))

        all_labels = np.concatenate([np.zeros(len(bg), dtype=np.int64), labels]).astype(np.int64)
        prev_fg, prev_targets = None, None
        trajectory, blob_positions = [], []
        for t in range(spec.frames):
            fg = self.move(spec, fg0, labels, centers, t, motion_params)
            scene = bg.concat(fg)
            targets = []
            for v, camera in enumerate(cameras):
                target = self.rasterizer.rasterize(scene, camera)
                targets.append(target)
                label_map = self.mask_from_render(target, all_labels, D)
                write_png_rgb(out_dir / manifest.image_template.format(view=v, frame=t), target.color)
                write_label_png(out_dir / manifest.mask_template.format(view=v, frame=t), permutations[v][label_map])
                if t == 0:
                    write_label_png(out_dir / manifest.canonical_template.format(view=v, frame=0), label_map)
                if t > 0:
                    flow = self.flow_from_motion(prev_targets[v], camera, bg.concat(prev_fg), scene)
                    write_flow(out_dir / manifest.flow_template.format(view=v, frame=t), flow)
            write_embeddings(out_dir / manifest.embedding_template.format(view=0, frame=t),
                             self.embeddings_at(spec, basis, t))
            trajectory.append([fg.positions[labels == d].mean(axis=0) for d in range(1, D + 1)])
            blob_positions.append(fg.positions)
            prev_fg, prev_targets = fg, targets
            logger.info(f"Generated frame {t + 1}/{spec.frames}")

        sidecar = {
            "spec": spec.model_dump(),
            "centroids": np.array(trajectory).reshape(spec.frames, D, 3),
            "blob_positions": np.array(blob_positions),
            "blob_labels": labels,
            "permutations": np.array(permutations),
            "embedding_basis": basis[:, :D + 1].T,
        }
        atomic_write_bytes(out_dir / "ground_truth.json",
                           orjson.dumps(sidecar, option=orjson.OPT_SERIALIZE_NUMPY | orjson.OPT_SORT_KEYS))
        write_manifest(out_dir, manifest)
        logger.info(f"Synthetic dataset written to {out_dir}")
        return out_dir / "manifest.json"

    def mask_from_render(self, target, labels: np.ndarray, n_instances: int) -> np.ndarray:
        """Per-pixel argmax of the blend weight accumulated per label (ties to the lower label)."""
        weights = target.label_weights(labels, n_instances + 1)
        return np.argmax(weights, axis=-1).astype(np.int64)

    def flow_from_motion(self, prev_target, camera: Camera, prev_scene: GaussianSet,
                         scene: GaussianSet) -> np.ndarray:
        """Projected displacement of the dominant contributor of every pixel in the previous frame."""
        owner = prev_target.dominant_contributor()
        uv_prev, _ = camera.project(prev_scene.positions)
        uv_now, _ = camera.project(scene.positions)
        displacement = uv_now - uv_prev
        flow = np.zeros(owner.shape + (2,))
        hit = owner >= 0
        flow[hit] = displacement[owner[hit]]
        return flow

    @staticmethod
    def embeddings_at(spec: SyntheticSpec, basis: np.ndarray, t: int) -> np.ndarray:
        vectors = basis[:, :spec.instances].T.copy()
        if spec.event and spec.event.start <= t <= spec.event.end:
            vectors[spec.event.instance - 1] = basis[:, spec.instances]
        return vectors
