import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import orjson
from sklearn.neighbors import NearestNeighbors

from app.helpers.codec_helpers import atomic_write_bytes
from app.helpers.exceptions import CheckpointError, InvalidPrimitiveError, PipelineError, ShapeMismatchError
from app.helpers.geometry_helpers import (
    SH_COEFFS,
    covariance_from_scale_rotation,
    normalization_backward,
    normalize_quaternions,
    quaternion_to_rotation,
    rotation_grad_to_quaternion,
    sigmoid,
)
from app.logFile import logger

FEATURE_DIM = 8
CHECKPOINT_MAGIC = b"G4D1"
BACKGROUND_CHECKPOINT = "background.g4d"
RECORD_FLOATS = 3 + 4 + 3 + 1 + 3 * SH_COEFFS + FEATURE_DIM
GAUSSIAN_ATTRIBUTES = ("positions", "rotations", "log_scales", "opacity_logits", "sh", "features")
APPEARANCE_ATTRIBUTES = ("sh", "opacity_logits")


@dataclass
class GaussianPrimitive:
    """A single anisotropic Gaussian with appearance and semantic attributes."""

    position: np.ndarray
    rotation: np.ndarray
    log_scale: np.ndarray
    opacity_logit: float
    sh_coeffs: np.ndarray
    semantic_feature: np.ndarray


@dataclass
class GaussianSet:
    """
    Structure-of-arrays storage for a list of GaussianPrimitive.

    Attributes:
        positions (np.ndarray): (N, 3) world positions.
        rotations (np.ndarray): (N, 4) unit quaternions, scalar first.
        log_scales (np.ndarray): (N, 3) log of the per-axis scale.
        opacity_logits (np.ndarray): (N,) opacity before the sigmoid.
        sh (np.ndarray): (N, 3, 16) spherical-harmonics coefficients per color channel.
        features (np.ndarray): (N, F) semantic features, F = 8 for scene layers.
    """

    positions: np.ndarray
    rotations: np.ndarray
    log_scales: np.ndarray
    opacity_logits: np.ndarray
    sh: np.ndarray
    features: np.ndarray

    @classmethod
    def empty(cls, feature_dim: int = FEATURE_DIM) -> "GaussianSet":
        return cls(
            positions=np.zeros((0, 3)),
            rotations=np.zeros((0, 4)),
            log_scales=np.zeros((0, 3)),
            opacity_logits=np.zeros((0,)),
            sh=np.zeros((0, 3, SH_COEFFS)),
            features=np.zeros((0, feature_dim)),
        )

    @classmethod
    def from_primitives(cls, primitives: Sequence[GaussianPrimitive]) -> "GaussianSet":
        if not primitives:
            return cls.empty()
        return cls(
            positions=np.array([p.position for p in primitives], dtype=np.float64),
            rotations=np.array([p.rotation for p in primitives], dtype=np.float64),
            log_scales=np.array([p.log_scale for p in primitives], dtype=np.float64),
            opacity_logits=np.array([p.opacity_logit for p in primitives], dtype=np.float64),
            sh=np.array([np.reshape(p.sh_coeffs, (3, SH_COEFFS)) for p in primitives], dtype=np.float64),
            features=np.array([p.semantic_feature for p in primitives], dtype=np.float64),
        )

    def __len__(self) -> int:
        return int(self.positions.shape[0])

    def primitive(self, index: int) -> GaussianPrimitive:
        return GaussianPrimitive(
            position=self.positions[index].copy(),
            rotation=self.rotations[index].copy(),
            log_scale=self.log_scales[index].copy(),
            opacity_logit=float(self.opacity_logits[index]),
            sh_coeffs=self.sh[index].copy(),
            semantic_feature=self.features[index].copy(),
        )

    def primitives(self) -> List[GaussianPrimitive]:
        return [self.primitive(i) for i in range(len(self))]

    def copy(self) -> "GaussianSet":
        return GaussianSet(**{name: getattr(self, name).copy() for name in GAUSSIAN_ATTRIBUTES})

    def subset(self, index) -> "GaussianSet":
        return GaussianSet(**{name: getattr(self, name)[index].copy() for name in GAUSSIAN_ATTRIBUTES})

    def concat(self, other: "GaussianSet") -> "GaussianSet":
        return GaussianSet(**{
            name: np.concatenate([getattr(self, name), getattr(other, name)], axis=0)
            for name in GAUSSIAN_ATTRIBUTES
        })

    def arrays(self) -> Dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in GAUSSIAN_ATTRIBUTES}

    @property
    def feature_dim(self) -> int:
        return int(self.features.shape[1])


@dataclass
class Camera:
    """Calibrated pinhole camera; world-to-camera is x_cam = R x_world + t."""

    K: np.ndarray
    R: np.ndarray
    t: np.ndarray
    width: int
    height: int

    @property
    def center(self) -> np.ndarray:
        return -self.R.T @ self.t

    @property
    def projection(self) -> np.ndarray:
        return self.K @ np.hstack([self.R, self.t[:, None]])

    def project(self, points: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        """
        Returns:
            tuple: (uv (N, 2) pixel coordinates, depth (N,) camera-space z).
        """
        cam = points @ self.R.T + self.t
        z = cam[:, 2]
        safe = np.where(np.abs(z) < 1e-12, 1e-12, z)
        u = self.K[0, 0] * cam[:, 0] / safe + self.K[0, 1] * cam[:, 1] / safe + self.K[0, 2]
        v = self.K[1, 1] * cam[:, 1] / safe + self.K[1, 2]
        return np.stack([u, v], axis=-1), z

    def validate(self, label: str = "camera") -> None:
        if self.K.shape != (3, 3) or self.R.shape != (3, 3) or self.t.shape != (3,):
            raise PipelineError(f"{label}: K and R must be 3x3 and t a 3-vector")
        if abs(self.K[1, 0]) > 0 or abs(self.K[2, 0]) > 0 or abs(self.K[2, 1]) > 0:
            raise PipelineError(f"{label}: intrinsics must be upper-triangular")
        if self.K[0, 0] <= 0 or self.K[1, 1] <= 0:
            raise PipelineError(f"{label}: focal lengths must be positive")
        if not np.allclose(self.R @ self.R.T, np.eye(3), atol=1e-6):
            raise PipelineError(f"{label}: rotation is not orthonormal")
        if self.width <= 0 or self.height <= 0:
            raise PipelineError(f"{label}: resolution must be positive")

    def to_dict(self) -> Dict:
        return {"K": self.K.tolist(), "R": self.R.tolist(), "t": self.t.tolist(),
                "width": int(self.width), "height": int(self.height)}

    @classmethod
    def from_dict(cls, data: Dict) -> "Camera":
        return cls(K=np.asarray(data["K"], dtype=np.float64), R=np.asarray(data["R"], dtype=np.float64),
                   t=np.asarray(data["t"], dtype=np.float64), width=int(data["width"]),
                   height=int(data["height"]))


@dataclass
class CameraRig:
    cameras: List[Camera]

    def __len__(self) -> int:
        return len(self.cameras)

    def __getitem__(self, index: int) -> Camera:
        return self.cameras[index]

    def __iter__(self):
        return iter(self.cameras)

    def validate(self) -> None:
        for v, camera in enumerate(self.cameras):
            camera.validate(f"camera {v}")


@dataclass
class FrameBundle:
    """
    Everything observed at one frame t.

    Attributes:
        frame (int): Frame index t.
        images (list): V (H, W, 3) color images in [0, 1].
        masks (list): V (H, W) integer label maps with values in {0..D}.
        flows (list | None): V (H, W, 2) displacements from t-1 to t; None at t = 0.
        instance_embeddings (np.ndarray): (D, R) raw embeddings for ids 1..D.
        compressed_embeddings (np.ndarray | None): (D, 6) autoencoder codes.
    """

    frame: int
    images: List[np.ndarray]
    masks: List[np.ndarray]
    flows: Optional[List[np.ndarray]]
    instance_embeddings: np.ndarray
    compressed_embeddings: Optional[np.ndarray] = None

    @property
    def n_instances(self) -> int:
        return int(self.instance_embeddings.shape[0])


@dataclass
class SceneModel:
    """
    Background layer plus the foreground layer of the current frame.

    Attributes:
        bg (GaussianSet): Background primitives.
        fg (GaussianSet): Foreground primitives at `frame_index`.
        bg_reference (dict): Snapshot {"sh", "opacity_logits"} of bg appearance after pretraining.
        frame_index (int): The frame this state belongs to.
    """

    bg: GaussianSet
    fg: GaussianSet
    bg_reference: Dict[str, np.ndarray] = field(default_factory=dict)
    frame_index: int = 0

    def combined(self) -> GaussianSet:
        return self.bg.concat(self.fg)

    def snapshot_background(self) -> None:
        self.bg_reference = {name: getattr(self.bg, name).copy() for name in APPEARANCE_ATTRIBUTES}

    def copy(self) -> "SceneModel":
        return SceneModel(bg=self.bg.copy(), fg=self.fg.copy(),
                          bg_reference={k: v.copy() for k, v in self.bg_reference.items()},
                          frame_index=self.frame_index)

    def check(self) -> None:
        if self.bg_reference:
            for name, ref in self.bg_reference.items():
                if ref.shape[0] != len(self.bg):
                    raise PipelineError(f"background reference '{name}' has {ref.shape[0]} entries "
                                        f"for {len(self.bg)} background primitives")


@dataclass
class Activation:
    """Activated quantities of a GaussianSet."""

    scales: np.ndarray
    opacities: np.ndarray
    unit_rotations: np.ndarray
    rotation_matrices: np.ndarray
    covariances: np.ndarray


class SceneService:
    """
    Parameter activations, neighbourhood queries and checkpoint persistence for Gaussian scenes.
    """

    def activate(self, primitives: GaussianSet) -> Activation:
        """
        Map stored parameters to scale, opacity and covariance.

        Args:
            primitives (GaussianSet): The primitives to activate.

        Returns:
            Activation: scale = exp(log_scale), opacity = sigmoid(logit),
                covariance = R(q) diag(s^2) R(q)^T.

        Raises:
            InvalidPrimitiveError: If any parameter is non-finite, naming the first offending index.
        """
        self.check_finite(primitives)
        unit_q = normalize_quaternions(primitives.rotations)
        R = quaternion_to_rotation(unit_q)
        scales = np.exp(primitives.log_scales)
        covariances = covariance_from_scale_rotation(scales, R)
        return Activation(scales=scales, opacities=sigmoid(primitives.opacity_logits), unit_rotations=unit_q,
                          rotation_matrices=R, covariances=covariances)

    def activate_one(self, primitive: GaussianPrimitive) -> Dict[str, np.ndarray]:
        act = self.activate(GaussianSet.from_primitives([primitive]))
        return {"scale": act.scales[0], "opacity": float(act.opacities[0]), "covariance": act.covariances[0]}

    @staticmethod
    def check_finite(primitives: GaussianSet) -> None:
        bad = np.zeros(len(primitives), dtype=bool)
        for name in GAUSSIAN_ATTRIBUTES:
            values = getattr(primitives, name).reshape(len(primitives), -1)
            bad |= ~np.all(np.isfinite(values), axis=1)
        if np.any(bad):
            index = int(np.flatnonzero(bad)[0])
            raise InvalidPrimitiveError(f"primitive {index} has a non-finite parameter", index=index)

    @staticmethod
    def covariance_backward(primitives: GaussianSet, activation: Activation,
                            d_cov: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        """
        Chain a gradient on the covariances back to the raw quaternions and log-scales.

        Args:
            primitives (GaussianSet): Primitives the activation was computed from.
            activation (Activation): Output of `activate`.
            d_cov (np.ndarray): (N, 3, 3) gradient on the covariances.

        Returns:
            tuple: (d_rotations (N, 4), d_log_scales (N, 3)).
        """
        d_cov = 0.5 * (d_cov + np.swapaxes(d_cov, -1, -2))
        R = activation.rotation_matrices
        s = activation.scales
        M = R * s[:, None, :]
        d_M = 2.0 * d_cov @ M
        d_s = np.einsum("nij,nij->nj", d_M, R)
        d_R = d_M * s[:, None, :]
        d_unit = rotation_grad_to_quaternion(activation.unit_rotations, d_R)
        d_q = normalization_backward(primitives.rotations, d_unit)
        return d_q, d_s * s

    def knn_neighbors(self, points: np.ndarray, k: int) -> np.ndarray:
        """
        k nearest neighbours of every point, excluding the point itself.

        Args:
            points (np.ndarray): (N, 3) positions.
            k (int): Neighbours per point.

        Returns:
            np.ndarray: (N, k) indices sorted by ascending distance, ties broken by ascending index.

        Raises:
            PipelineError: If k >= N.
        """
        points = np.asarray(points, dtype=np.float64)
        n = points.shape[0]
        if k < 1 or k >= n:
            raise PipelineError(f"knn_neighbors needs 1 <= k < number of points, got k={k} for {n} points")
        slack = min(n, k + 1 + 8)
        nn = NearestNeighbors(n_neighbors=slack, algorithm="auto").fit(points)
        _, candidates = nn.kneighbors(points)
        result = np.empty((n, k), dtype=np.int64)
        for i in range(n):
            row = candidates[i][candidates[i] != i]
            d2 = np.sum((points[row] - points[i]) ** 2, axis=1)
            order = np.lexsort((row, d2))
            row, d2 = row[order], d2[order]
            # a tie straddling the candidate window needs the full row
            if slack < n and d2[-1] <= d2[k - 1]:
                row = np.delete(np.arange(n), i)
                d2 = np.sum((points[row] - points[i]) ** 2, axis=1)
                order = np.lexsort((row, d2))
                row = row[order]
            result[i] = row[:k]
        return result

    def save_checkpoint(self, path: Path, scene: SceneModel, sections: Optional[Dict[str, bytes]] = None,
                        meta: Optional[Dict] = None) -> None:
        """
        Write the scene as a "G4D1" container (atomic temp file + rename).

        Layout, little-endian: magic "G4D1"; header {count u32, has_feature u8, frame_index i32,
        bg_count u32}; `count` fixed records (p 3f32, q 4f32, log_scale 3f32, opacity_logit f32,
        sh 48f32, f 8f32; f omitted when has_feature is 0), background first; then a u32 section
        count and named sections {name_len u16, name, payload_len u64, payload}.

        Args:
            path (Path): Destination file.
            scene (SceneModel): The scene to persist.
            sections (dict | None): Extra named binary payloads (head parameters).
            meta (dict | None): JSON-serialisable metadata stored in the "meta" section.
        """
        scene.check()
        combined = scene.combined()
        has_feature = combined.feature_dim == FEATURE_DIM
        parts = [CHECKPOINT_MAGIC,
                 struct.pack("<IBiI", len(combined), 1 if has_feature else 0, int(scene.frame_index), len(scene.bg))]
        columns = [combined.positions, combined.rotations, combined.log_scales, combined.opacity_logits[:, None],
                   combined.sh.reshape(len(combined), -1)]
        if has_feature:
            columns.append(combined.features)
        parts.append(np.ascontiguousarray(np.hstack(columns), dtype="<f4").tobytes())

        all_sections = dict(sections or {})
        if scene.bg_reference:
            ref = np.hstack([scene.bg_reference["sh"].reshape(len(scene.bg), -1),
                             scene.bg_reference["opacity_logits"][:, None]])
            all_sections["bg_reference"] = np.ascontiguousarray(ref, dtype="<f4").tobytes()
        all_sections["meta"] = orjson.dumps(meta or {}, option=orjson.OPT_SORT_KEYS | orjson.OPT_SERIALIZE_NUMPY)
        parts.append(struct.pack("<I", len(all_sections)))
        for name in sorted(all_sections):
            encoded = name.encode("ascii")
            payload = all_sections[name]
            parts.append(struct.pack("<H", len(encoded)) + encoded + struct.pack("<Q", len(payload)))
            parts.append(payload)
        atomic_write_bytes(path, b"".join(parts))
        logger.info(f"Checkpoint written to {path} ({len(scene.bg)} bg + {len(scene.fg)} fg primitives)")

    def load_checkpoint(self, path: Path) -> Tuple[SceneModel, Dict[str, bytes], Dict]:
        """
        Read a "G4D1" container.

        Returns:
            tuple: (scene, named sections, metadata dict).

        Raises:
            CheckpointError: If the file is missing, truncated or not a G4D1 container.
        """
        try:
            data = Path(path).read_bytes()
        except OSError as e:
            raise CheckpointError(f"cannot read checkpoint {path}: {e}")
        if data[:4] != CHECKPOINT_MAGIC:
            raise CheckpointError(f"{path} is not a G4D1 checkpoint")
        try:
            count, has_feature, frame_index, bg_count = struct.unpack_from("<IBiI", data, 4)
            offset = 4 + struct.calcsize("<IBiI")
            width = RECORD_FLOATS if has_feature else RECORD_FLOATS - FEATURE_DIM
            records = np.frombuffer(data, dtype="<f4", count=count * width, offset=offset)
            records = records.reshape(count, width).astype(np.float64)
            offset += 4 * count * width
            (n_sections,) = struct.unpack_from("<I", data, offset)
            offset += 4
            sections = {}
            for _ in range(n_sections):
                (name_len,) = struct.unpack_from("<H", data, offset)
                offset += 2
                name = data[offset:offset + name_len].decode("ascii")
                offset += name_len
                (payload_len,) = struct.unpack_from("<Q", data, offset)
                offset += 8
                sections[name] = data[offset:offset + payload_len]
                if len(sections[name]) != payload_len:
                    raise CheckpointError(f"section '{name}' of {path} is truncated")
                offset += payload_len
        except (struct.error, ValueError) as e:
            raise CheckpointError(f"checkpoint {path} is truncated: {e}")

        features = records[:, 59:59 + FEATURE_DIM] if has_feature else np.zeros((count, FEATURE_DIM))
        combined = GaussianSet(
            positions=records[:, 0:3].copy(),
            rotations=records[:, 3:7].copy(),
            log_scales=records[:, 7:10].copy(),
            opacity_logits=records[:, 10].copy(),
            sh=records[:, 11:59].reshape(count, 3, SH_COEFFS).copy(),
            features=features.copy(),
        )
        scene = SceneModel(bg=combined.subset(slice(0, bg_count)), fg=combined.subset(slice(bg_count, count)),
                           frame_index=frame_index)
        if "bg_reference" in sections:
            ref = np.frombuffer(sections.pop("bg_reference"), dtype="<f4").reshape(bg_count, -1).astype(np.float64)
            scene.bg_reference = {"sh": ref[:, :3 * SH_COEFFS].reshape(bg_count, 3, SH_COEFFS).copy(),
                                  "opacity_logits": ref[:, 3 * SH_COEFFS].copy()}
        meta = orjson.loads(sections.pop("meta")) if "meta" in sections else {}
        return scene, sections, meta


def check_same_length(a: GaussianSet, b: GaussianSet, what: str) -> None:
    if len(a) != len(b):
        raise ShapeMismatchError(f"{what}: {len(a)} primitives vs {len(b)}")
