import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from joblib import Parallel, delayed

from app.helpers.config_helpers import RasterConfig
from app.helpers.exceptions import QueryError
from app.logFile import logger
from app.services.neural_heads_service import NeuralHeadsService, SemanticHeads
from app.services.rasterizer_service import RasterizerService, RenderTarget
from app.services.scene_service import Camera, SceneModel, SceneService

ALPHA_EPS = 1e-3


@dataclass
class IdentityResult:
    """Outcome of an identity query; `instance` is None when no instance scores above 0."""

    instance: Optional[int]
    scores: Dict[int, float] = field(default_factory=dict)

    @property
    def matched(self) -> bool:
        return self.instance is not None


@dataclass
class SegmentResult:
    frames: List[int]
    scores: List[float]
    threshold: float
    intervals: List[Tuple[int, int]]


@dataclass
class InstanceRender:
    target: Optional[RenderTarget]
    selected: np.ndarray
    audit_ok: bool


class QueryService:
    """
    Open-vocabulary querying over rendered semantic features.

    The semantic head maps alpha-normalized features to compressed codes, the
    autoencoder decoder lifts them to the raw embedding space, and relevance is the
    cosine similarity with the supplied query vector.
    """

    def __init__(self, rasterizer: Optional[RasterizerService] = None, heads: Optional[NeuralHeadsService] = None,
                 scene: Optional[SceneService] = None, threads: int = 1):
        self.rasterizer = rasterizer or RasterizerService()
        self.heads = heads or NeuralHeadsService()
        self.scene = scene or self.rasterizer.scene
        self.threads = max(1, int(threads))

    @staticmethod
    def check_query(query: np.ndarray, heads: SemanticHeads) -> np.ndarray:
        """
        Raises:
            QueryError: If the heads carry no autoencoder, the dimension is wrong or the vector is zero.
        """
        if heads.autoencoder is None:
            raise QueryError("the checkpoint carries no autoencoder; run compress-emb before training")
        query = np.asarray(query, dtype=np.float64).reshape(-1)
        if query.size != heads.autoencoder.raw_dim:
            raise QueryError(f"query has dimension {query.size}, embeddings have {heads.autoencoder.raw_dim}")
        norm = float(np.linalg.norm(query))
        if norm == 0.0 or not math.isfinite(norm):
            raise QueryError("query vector has zero or non-finite norm")
        return query

    def relevance_map(self, feature: np.ndarray, alpha: np.ndarray, heads: SemanticHeads,
                      query: np.ndarray) -> np.ndarray:
        """
        Per-pixel cosine relevance of the decoded feature map to the query.

        Args:
            feature (np.ndarray): (H, W, F) rendered feature map.
            alpha (np.ndarray): (H, W) accumulated opacity.
            heads (SemanticHeads): Semantic head and autoencoder.
            query (np.ndarray): Raw-dimension query vector.

        Returns:
            np.ndarray: (H, W) relevance in [-1, 1]; pixels with alpha <= 1e-3 score -1.

        Raises:
            QueryError: On a zero query or a dimension mismatch.
        """
        query = self.check_query(query, heads)
        codes, _, _, covered = self.heads.decode_pixels(heads.semantic, feature, alpha, ALPHA_EPS)
        height, width = alpha.shape
        decoded = heads.autoencoder.decode(codes.reshape(-1, codes.shape[-1]))
        norms = np.linalg.norm(decoded, axis=1)
        cosine = (decoded @ query) / (np.maximum(norms, 1e-12) * np.linalg.norm(query))
        cosine = np.clip(cosine, -1.0, 1.0).reshape(height, width)
        return np.where(covered, cosine, -1.0)

    def pixel_labels(self, target: RenderTarget, heads: SemanticHeads) -> np.ndarray:
        logits, _, _, covered = self.heads.decode_pixels(heads.classifier, target.feature, target.alpha, ALPHA_EPS)
        labels = np.argmax(logits, axis=-1)
        labels[~covered] = 0
        return labels

    def identity_query(self, scene: SceneModel, heads: SemanticHeads, cameras: Sequence[Camera],
                       query: np.ndarray, config: Optional[RasterConfig] = None) -> IdentityResult:
        """
        Resolve which instance a query refers to at frame 0.

        Each instance's score is its mean pixel relevance over the pixels the classifier assigns
        to it, averaged over the views where it is visible. Ties go to the lower id.
        """
        query = self.check_query(query, heads)
        n_ids = heads.n_classes - 1
        per_view: Dict[int, List[float]] = {d: [] for d in range(1, n_ids + 1)}
        for camera in cameras:
            target = self.rasterizer.render_scene(scene, camera, config)
            relevance = self.relevance_map(target.feature, target.alpha, heads, query)
            labels = self.pixel_labels(target, heads)
            for d in per_view:
                pixels = labels == d
                if np.any(pixels):
                    per_view[d].append(float(relevance[pixels].mean()))
        scores = {d: float(np.mean(v)) for d, v in per_view.items() if v}
        best, best_score = None, 0.0
        for d in sorted(scores):
            if scores[d] > best_score:
                best, best_score = d, scores[d]
        if best is None:
            logger.warning("Identity query: no instance has positive relevance")
        else:
            logger.info(f"Identity query resolved to instance {best} (score {best_score:.4f})")
        return IdentityResult(instance=best, scores=scores)

    def instance_mask(self, scene: SceneModel, heads: SemanticHeads, instance: int) -> np.ndarray:
        """Boolean selection of the fg primitives whose classifier argmax equals `instance`."""
        if len(scene.fg) == 0:
            return np.zeros(0, dtype=bool)
        labels = np.argmax(self.heads.classify(heads.classifier, scene.fg.features), axis=1)
        return labels == instance

    def render_instance(self, scene: SceneModel, heads: SemanticHeads, camera: Camera, instance: int,
                        config: Optional[RasterConfig] = None) -> InstanceRender:
        """
        Render only the fg primitives classified as `instance`, background excluded.

        The contributor audit checks every primitive that reached a pixel classifies as `instance`.
        """
        selected = self.instance_mask(scene, heads, instance)
        if not np.any(selected):
            return InstanceRender(target=None, selected=selected, audit_ok=True)
        subset = scene.fg.subset(np.flatnonzero(selected))
        target = self.rasterizer.rasterize(subset, camera, config=config)
        contributors = target.contributor_set()
        if contributors.size:
            labels = np.argmax(self.heads.classify(heads.classifier, subset.features[contributors]), axis=1)
            audit_ok = bool(np.all(labels == instance))
        else:
            audit_ok = True
        if not audit_ok:
            logger.error(f"Instance render of {instance} has contributors from other instances")
        return InstanceRender(target=target, selected=selected, audit_ok=audit_ok)

    def frame_score(self, scene: SceneModel, heads: SemanticHeads, cameras: Sequence[Camera], instance: int,
                    query: np.ndarray, config: Optional[RasterConfig] = None) -> float:
        """Mean relevance over the covered pixels of the instance-only renders; NaN if nothing is covered."""
        values = []
        for camera in cameras:
            render = self.render_instance(scene, heads, camera, instance, config)
            if render.target is None:
                return math.nan
            relevance = self.relevance_map(render.target.feature, render.target.alpha, heads, query)
            covered = render.target.alpha > ALPHA_EPS
            values.append(relevance[covered])
        pooled = np.concatenate(values) if values else np.zeros(0)
        return float(pooled.mean()) if pooled.size else math.nan

    @staticmethod
    def intervals_above(scores: Sequence[float], frames: Optional[Sequence[int]] = None) -> Tuple[float, List[Tuple[int, int]]]:
        """
        Threshold at the mean score and return the maximal runs of frames at or above it.

        NaN scores are excluded from the mean and never selected.

        Returns:
            tuple: (threshold, [(first_frame, last_frame), ...]).
        """
        scores = np.asarray(scores, dtype=np.float64)
        frames = list(range(scores.size)) if frames is None else list(frames)
        finite = np.isfinite(scores)
        if not np.any(finite):
            return math.nan, []
        threshold = float(scores[finite].mean())
        above = finite & (scores >= threshold)
        intervals, start = [], None
        for i, flag in enumerate(above):
            if flag and start is None:
                start = i
            if not flag and start is not None:
                intervals.append((frames[start], frames[i - 1]))
                start = None
        if start is not None:
            intervals.append((frames[start], frames[-1]))
        return threshold, intervals

    def segment_query(self, checkpoints: Sequence[Path], instance: int, query: np.ndarray,
                      cameras: Sequence[Camera], config: Optional[RasterConfig] = None) -> SegmentResult:
        """
        Score every frame checkpoint for the instance and select the frames above the mean score.

        Frames are scored in parallel on a thread pool; results keep checkpoint order.
        """

        def score(path: Path) -> Tuple[int, float]:
            scene, sections, _ = self.scene.load_checkpoint(path)
            heads = SemanticHeads.from_sections(sections)
            if heads is None:
                raise QueryError(f"checkpoint {path} carries no semantic heads")
            return scene.frame_index, self.frame_score(scene, heads, cameras, instance, query, config)

        results = Parallel(n_jobs=self.threads, prefer="threads")(delayed(score)(p) for p in checkpoints)
        results = sorted(results)
        frames = [t for t, _ in results]
        scores = [s for _, s in results]
        threshold, intervals = self.intervals_above(scores, frames)
        if not intervals:
            logger.warning(f"Segment query: instance {instance} absent from every frame")
        return SegmentResult(frames=frames, scores=scores, threshold=threshold, intervals=intervals)
