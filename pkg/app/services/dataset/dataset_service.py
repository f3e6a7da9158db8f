import threading
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np
import orjson
from PIL import Image
from pydantic import BaseModel, Field, ValidationError, model_validator

from app.helpers.codec_helpers import (
    atomic_write_bytes,
    read_embeddings,
    read_flow,
    read_label_png,
    read_png_rgb,
)
from app.helpers.exceptions import DatasetError, PipelineError
from app.logFile import logger
from app.services.neural_heads_service import LinearAutoencoder
from app.services.scene_service import Camera, CameraRig, FrameBundle

MANIFEST_NAME = "manifest.json"


class DatasetManifest(BaseModel):
    """
    On-disk description of a multi-view sequence. Every path is relative to the manifest directory.

    Templates are `str.format` patterns over `view` and `frame`.
    """

    name: str = "dataset"
    views: int = Field(ge=1)
    frames: int = Field(ge=1)
    instances: int = Field(ge=0, le=254)
    width: int = Field(ge=1)
    height: int = Field(ge=1)
    raw_dim: int = Field(ge=1)
    cameras: List[str]
    image_template: str = "images/v{view:02d}_t{frame:04d}.png"
    mask_template: str = "masks/v{view:02d}_t{frame:04d}.png"
    aligned_mask_template: Optional[str] = None
    canonical_template: Optional[str] = None
    flow_template: str = "flows/v{view:02d}_t{frame:04d}.f32m"
    embedding_template: str = "embeddings/t{frame:04d}.emb"
    compressed_template: Optional[str] = None
    autoencoder: Optional[str] = None
    scene_bounds: Optional[List[List[float]]] = None
    sparse_points: Optional[str] = None
    ground_truth: Optional[str] = None

    @model_validator(mode="after")
    def check_counts(self) -> "DatasetManifest":
        if len(self.cameras) != self.views:
            raise ValueError(f"manifest lists {len(self.cameras)} camera files for {self.views} views")
        if self.scene_bounds is not None and (len(self.scene_bounds) != 2 or any(len(b) != 3 for b in self.scene_bounds)):
            raise ValueError("scene_bounds must be [[xmin, ymin, zmin], [xmax, ymax, zmax]]")
        return self


class Dataset:
    """
    Validated handle over a dataset directory; frames are read lazily on request.

    Attributes:
        root (Path): Directory holding the manifest.
        manifest (DatasetManifest): Parsed manifest.
        rig (CameraRig): The calibrated cameras.
    """

    def __init__(self, root: Path, manifest: DatasetManifest, rig: CameraRig):
        self.root = Path(root)
        self.manifest = manifest
        self.rig = rig
        self._frame_cache: Dict[int, FrameBundle] = {}
        self._cache_lock = threading.Lock()

    @property
    def V(self) -> int:
        return self.manifest.views

    @property
    def T(self) -> int:
        return self.manifest.frames

    @property
    def D(self) -> int:
        return self.manifest.instances

    @property
    def R(self) -> int:
        return self.manifest.raw_dim

    def path(self, template: str, view: int = 0, frame: int = 0) -> Path:
        return self.root / template.format(view=view, frame=frame)

    def image(self, view: int, frame: int) -> np.ndarray:
        return read_png_rgb(self.path(self.manifest.image_template, view, frame))

    def raw_mask(self, view: int, frame: int) -> np.ndarray:
        return read_label_png(self.path(self.manifest.mask_template, view, frame))

    def mask(self, view: int, frame: int) -> np.ndarray:
        """Canonical-id label map; the aligned copy when alignment has been run."""
        template = self.manifest.aligned_mask_template or self.manifest.mask_template
        return read_label_png(self.path(template, view, frame))

    def canonical_mask(self, view: int) -> np.ndarray:
        if self.manifest.canonical_template:
            return read_label_png(self.path(self.manifest.canonical_template, view, 0))
        return self.raw_mask(0, 0)

    def flow(self, view: int, frame: int) -> Optional[np.ndarray]:
        if frame == 0:
            return None
        return read_flow(self.path(self.manifest.flow_template, view, frame)).astype(np.float64)

    def embeddings(self, frame: int) -> np.ndarray:
        return read_embeddings(self.path(self.manifest.embedding_template, 0, frame)).astype(np.float64)

    def compressed(self, frame: int) -> Optional[np.ndarray]:
        if not self.manifest.compressed_template:
            return None
        return read_embeddings(self.path(self.manifest.compressed_template, 0, frame)).astype(np.float64)

    def autoencoder(self) -> Optional[LinearAutoencoder]:
        if not self.manifest.autoencoder:
            return None
        path = self.root / self.manifest.autoencoder
        try:
            return LinearAutoencoder.from_bytes(path.read_bytes())
        except (OSError, orjson.JSONDecodeError, KeyError) as e:
            raise DatasetError(f"cannot read autoencoder: {e}", path=str(path), rule="autoencoder")

    def frame(self, t: int) -> FrameBundle:
        """All views of frame t."""
        if not 0 <= t < self.T:
            raise DatasetError(f"frame {t} outside 0..{self.T - 1}", path=str(self.root), rule="frame_range")
        with self._cache_lock:
            bundle = self._frame_cache.get(t)
        if bundle is not None:
            return bundle
        bundle = FrameBundle(
            frame=t,
            images=[self.image(v, t) for v in range(self.V)],
            masks=[self.mask(v, t) for v in range(self.V)],
            flows=None if t == 0 else [self.flow(v, t) for v in range(self.V)],
            instance_embeddings=self.embeddings(t),
            compressed_embeddings=self.compressed(t),
        )
        # at most four frames stay cached
        with self._cache_lock:
            if t not in self._frame_cache and len(self._frame_cache) >= 4:
                self._frame_cache.pop(next(iter(self._frame_cache)))
            self._frame_cache[t] = bundle
        return bundle

    def bounds(self) -> Tuple[np.ndarray, np.ndarray]:
        """Axis-aligned scene box; falls back to the box spanned by the camera centres."""
        if self.manifest.scene_bounds is not None:
            lo, hi = self.manifest.scene_bounds
            return np.asarray(lo, dtype=np.float64), np.asarray(hi, dtype=np.float64)
        centers = np.array([c.center for c in self.rig])
        mid = centers.mean(axis=0)
        half = np.maximum(np.abs(centers - mid).max(axis=0), 1e-3) * 0.5
        return mid - half, mid + half

    @property
    def scene_extent(self) -> float:
        lo, hi = self.bounds()
        return float(np.linalg.norm(hi - lo))

    def sparse_points(self) -> Optional[Dict[str, np.ndarray]]:
        if not self.manifest.sparse_points:
            return None
        path = self.root / self.manifest.sparse_points
        try:
            raw = orjson.loads(path.read_bytes())
        except (OSError, orjson.JSONDecodeError) as e:
            raise DatasetError(f"cannot read sparse points: {e}", path=str(path), rule="sparse_points")
        points = {"positions": np.asarray(raw["positions"], dtype=np.float64)}
        if "colors" in raw:
            points["colors"] = np.asarray(raw["colors"], dtype=np.float64)
        return points

    def update_manifest(self, **fields) -> None:
        """Rewrite the manifest with some fields replaced."""
        self.manifest = self.manifest.model_copy(update=fields)
        write_manifest(self.root, self.manifest)
        with self._cache_lock:
            self._frame_cache.clear()


def write_manifest(root: Path, manifest: DatasetManifest) -> None:
    data = orjson.dumps(manifest.model_dump(exclude_none=True), option=orjson.OPT_INDENT_2 | orjson.OPT_SORT_KEYS)
    atomic_write_bytes(Path(root) / MANIFEST_NAME, data)


def write_camera(path: Path, camera: Camera) -> None:
    atomic_write_bytes(path, orjson.dumps(camera.to_dict(), option=orjson.OPT_INDENT_2 | orjson.OPT_SORT_KEYS))


def read_camera(path: Path) -> Camera:
    """
    Raises:
        DatasetError: If the file is missing, malformed or holds an invalid camera.
    """
    try:
        camera = Camera.from_dict(orjson.loads(Path(path).read_bytes()))
    except (OSError, orjson.JSONDecodeError, KeyError, TypeError, ValueError) as e:
        raise DatasetError(f"cannot read camera: {e}", path=str(path), rule="camera_format")
    try:
        camera.validate(str(path))
    except PipelineError as e:
        raise DatasetError(e.detail, path=str(path), rule="camera_valid")
    return camera


class DatasetService:
    """
    Loads and validates dataset directories.
    """

    def load_dataset(self, manifest_path: Path, validate: bool = True) -> Dataset:
        """
        Parse a manifest and validate every referenced file.

        Args:
            manifest_path (Path): The manifest file, or the directory that holds it.
            validate (bool): Run the eager checks (resolutions, label ranges, flow shapes, embeddings).

        Returns:
            Dataset: A handle with lazy per-frame loading.

        Raises:
            DatasetError: On the first violation, naming the file and the broken rule.
        """
        manifest_path = Path(manifest_path)
        if manifest_path.is_dir():
            manifest_path = manifest_path / MANIFEST_NAME
        try:
            raw = orjson.loads(manifest_path.read_bytes())
        except OSError as e:
            raise DatasetError(f"cannot read manifest: {e}", path=str(manifest_path), rule="exists")
        except orjson.JSONDecodeError as e:
            raise DatasetError(f"manifest is not valid JSON: {e}", path=str(manifest_path), rule="json")
        try:
            manifest = DatasetManifest.model_validate(raw)
        except ValidationError as e:
            raise DatasetError(f"invalid manifest: {e.errors()[0]['msg']}", path=str(manifest_path), rule="schema")

        root = manifest_path.parent
        rig = CameraRig([read_camera(root / name) for name in manifest.cameras])
        dataset = Dataset(root, manifest, rig)
        if validate:
            self.validate(dataset)
        logger.info(f"Loaded dataset '{manifest.name}': {dataset.V} views, {dataset.T} frames, "
                    f"{dataset.D} instances")
        return dataset

    def validate(self, dataset: Dataset) -> None:
        m = dataset.manifest
        expected = (m.height, m.width)
        for v, camera in enumerate(dataset.rig):
            if (camera.height, camera.width) != expected:
                raise DatasetError(f"camera resolution {camera.width}x{camera.height} differs from "
                                   f"{m.width}x{m.height}", path=str(dataset.root / m.cameras[v]), rule="resolution")
        for t in range(dataset.T):
            for v in range(dataset.V):
                image_path = dataset.path(m.image_template, v, t)
                self._check_image(image_path, expected)
                templates = [m.mask_template] + ([m.aligned_mask_template] if m.aligned_mask_template else [])
                for template in templates:
                    mask_path = dataset.path(template, v, t)
                    labels = read_label_png(mask_path)
                    if labels.shape != expected:
                        raise DatasetError(f"mask is {labels.shape[1]}x{labels.shape[0]}, expected "
                                           f"{m.width}x{m.height}", path=str(mask_path), rule="resolution")
                    if labels.size and labels.max() > m.instances:
                        raise DatasetError(f"mask label {int(labels.max())} exceeds D={m.instances}",
                                           path=str(mask_path), rule="label_range")
                if t > 0:
                    flow_path = dataset.path(m.flow_template, v, t)
                    flow = read_flow(flow_path)
                    if flow.shape[:2] != expected:
                        raise DatasetError(f"flow is {flow.shape[1]}x{flow.shape[0]}, expected "
                                           f"{m.width}x{m.height}", path=str(flow_path), rule="resolution")
            emb_path = dataset.path(m.embedding_template, 0, t)
            emb = read_embeddings(emb_path)
            if emb.shape != (m.instances, m.raw_dim) and not (m.instances == 0 and emb.shape[0] == 0):
                raise DatasetError(f"embeddings have shape {emb.shape}, expected ({m.instances}, {m.raw_dim})",
                                   path=str(emb_path), rule="embedding_shape")
            if m.compressed_template:
                code_path = dataset.path(m.compressed_template, 0, t)
                codes = read_embeddings(code_path)
                if codes.shape[0] != m.instances:
                    raise DatasetError(f"{codes.shape[0]} compressed embeddings for {m.instances} instances",
                                       path=str(code_path), rule="embedding_shape")

    @staticmethod
    def _check_image(path: Path, expected: Tuple[int, int]) -> None:
        try:
            with Image.open(path) as img:
                size = img.size
        except OSError as e:
            raise DatasetError(f"cannot read image: {e}", path=str(path), rule="exists")
        if (size[1], size[0]) != expected:
            raise DatasetError(f"image is {size[0]}x{size[1]}, expected {expected[1]}x{expected[0]}",
                               path=str(path), rule="resolution")
