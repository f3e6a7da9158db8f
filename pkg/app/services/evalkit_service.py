import math
from pathlib import Path
from typing import Dict, Optional, Sequence, Tuple

import numpy as np
import orjson
import pandas as pd
from joblib import Parallel, delayed

from app.helpers.config_helpers import RasterConfig
from app.helpers.exceptions import PipelineError, ShapeMismatchError
from app.logFile import logger
from app.services.losses.photometric_loss_service import PhotometricLossService
from app.services.neural_heads_service import NeuralHeadsService, SemanticHeads
from app.services.rasterizer_service import RasterizerService, RenderTarget
from app.services.scene_service import BACKGROUND_CHECKPOINT, Camera, SceneModel, SceneService

EXACT = "exact"
METRIC_COLUMNS = ["psnr", "ssim", "mIoU", "Recall", "F1"]


def format_psnr(value: float):
    """PSNR for reports: identical images are reported as the string "exact"."""
    return EXACT if math.isinf(value) else float(value)


def convert_to_native(value):
    """
    Converts NumPy scalars, infinities and NaNs into JSON-friendly Python values.

    Returns:
        object: The same structure with native floats/ints, "exact" for +inf and None for NaN.
    """
    if isinstance(value, dict):
        return {str(k): convert_to_native(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [convert_to_native(v) for v in value]
    if isinstance(value, np.ndarray):
        return convert_to_native(value.tolist())
    if isinstance(value, (np.integer,)):
        return int(value)
    if isinstance(value, (float, np.floating)):
        value = float(value)
        if math.isnan(value):
            return None
        if math.isinf(value):
            return EXACT if value > 0 else None
        return value
    return value


class EvalkitService:
    """
    Image and segmentation metrics plus the checkpoint-directory evaluation behind `eval`.

    Segmentation metrics are computed per instance, averaged over the instances present
    in a frame, then averaged over frames.
    """

    def __init__(self, rasterizer: Optional[RasterizerService] = None, heads: Optional[NeuralHeadsService] = None,
                 photometric: Optional[PhotometricLossService] = None, scene: Optional[SceneService] = None):
        self.rasterizer = rasterizer or RasterizerService()
        self.heads = heads or NeuralHeadsService()
        self.photometric = photometric or PhotometricLossService()
        self.scene = scene or self.rasterizer.scene

    @staticmethod
    def psnr(a: np.ndarray, b: np.ndarray) -> float:
        """
        10·log10(1 / MSE) for images in [0, 1].

        Returns:
            float: Decibels; `math.inf` when the images are identical.

        Raises:
            ShapeMismatchError: If the shapes differ.
        """
        a = np.asarray(a, dtype=np.float64)
        b = np.asarray(b, dtype=np.float64)
        if a.shape != b.shape:
            raise ShapeMismatchError(f"psnr inputs have shapes {a.shape} and {b.shape}")
        mse = float(np.mean((a - b) ** 2))
        if mse == 0.0:
            return math.inf
        return 10.0 * math.log10(1.0 / mse)

    def ssim(self, a: np.ndarray, b: np.ndarray) -> float:
        return self.photometric.ssim(a, b)

    @staticmethod
    def instance_scores(pred: np.ndarray, gt: np.ndarray, n_instances: int) -> Dict[int, Tuple[float, float, float]]:
        """
        IoU, recall and F1 of each instance present in `pred` or `gt`.

        Returns:
            dict: instance id -> (iou, recall, f1).
        """
        pred = np.asarray(pred)
        gt = np.asarray(gt)
        if pred.shape != gt.shape:
            raise ShapeMismatchError(f"label maps have shapes {pred.shape} and {gt.shape}")
        scores = {}
        for d in range(1, n_instances + 1):
            p = pred == d
            g = gt == d
            n_p, n_g = int(np.count_nonzero(p)), int(np.count_nonzero(g))
            if n_p == 0 and n_g == 0:
                continue
            inter = int(np.count_nonzero(p & g))
            union = n_p + n_g - inter
            recall = inter / n_g if n_g else 0.0
            precision = inter / n_p if n_p else 0.0
            f1 = 2 * precision * recall / (precision + recall) if precision + recall > 0 else 0.0
            scores[d] = (inter / union, recall, f1)
        return scores

    def seg_metrics(self, pred_masks: Sequence[np.ndarray], gt_masks: Sequence[np.ndarray],
                    n_instances: int) -> Dict[str, float]:
        """
        Mean IoU, recall and F1 over a list of frames.

        Args:
            pred_masks (Sequence[np.ndarray]): Predicted label maps, one per frame.
            gt_masks (Sequence[np.ndarray]): Ground-truth label maps.
            n_instances (int): D; labels above D are ignored.

        Returns:
            dict: {"mIoU", "Recall", "F1"}; NaN when no frame contains any instance.
        """
        if len(pred_masks) != len(gt_masks):
            raise ShapeMismatchError(f"{len(pred_masks)} predicted masks for {len(gt_masks)} ground-truth masks")
        per_frame = []
        for pred, gt in zip(pred_masks, gt_masks):
            scores = self.instance_scores(pred, gt, n_instances)
            if scores:
                per_frame.append(np.mean(np.array(list(scores.values())), axis=0))
        if not per_frame:
            return {"mIoU": math.nan, "Recall": math.nan, "F1": math.nan}
        miou, recall, f1 = np.mean(np.array(per_frame), axis=0)
        return {"mIoU": float(miou), "Recall": float(recall), "F1": float(f1)}

    def predicted_labels(self, target: RenderTarget, heads: SemanticHeads, eps: float = 1e-3) -> np.ndarray:
        """Per-pixel classifier argmax of the alpha-normalized feature map; uncovered pixels get 0."""
        logits, _, _, covered = self.heads.decode_pixels(heads.classifier, target.feature, target.alpha, eps)
        labels = np.argmax(logits, axis=-1)
        labels[~covered] = 0
        return labels

    def view_metrics(self, scene: SceneModel, heads: Optional[SemanticHeads], camera: Camera, image: np.ndarray,
                     mask: np.ndarray, n_instances: int, config: Optional[RasterConfig] = None) -> Dict[str, float]:
        config = config or self.rasterizer.config
        target = self.rasterizer.render_scene(scene, camera, config)
        row = {"psnr": self.psnr(target.color, image), "ssim": self.ssim(target.color, image)}
        if heads is not None:
            labels = self.predicted_labels(target, heads, config.alpha_norm_eps)
            row.update(self.seg_metrics([labels], [mask], n_instances))
        return row

    def frame_metrics(self, scene: SceneModel, heads: Optional[SemanticHeads], dataset, t: int,
                      views: Sequence[int], config: Optional[RasterConfig] = None) -> Dict[str, float]:
        """Mean PSNR (and mIoU when heads exist) of frame t over the given views."""
        bundle = dataset.frame(t)
        rows = [self.view_metrics(scene, heads, dataset.rig[v], bundle.images[v], bundle.masks[v], dataset.D, config)
                for v in views]
        table = pd.DataFrame(rows)
        out = {"psnr": float(table["psnr"].mean())}
        if "mIoU" in table:
            out["miou"] = float(table["mIoU"].mean())
        return out

    def instance_centroids(self, scene: SceneModel, heads: SemanticHeads, n_instances: int) -> np.ndarray:
        """(D, 3) mean position of the fg primitives classified as each instance; NaN rows for empty ones."""
        centroids = np.full((n_instances, 3), np.nan)
        if len(scene.fg) == 0:
            return centroids
        labels = np.argmax(self.heads.classify(heads.classifier, scene.fg.features), axis=1)
        for d in range(1, n_instances + 1):
            members = labels == d
            if np.any(members):
                centroids[d - 1] = scene.fg.positions[members].mean(axis=0)
        return centroids

    def evaluate_run(self, dataset, checkpoints_dir: Path, views: Optional[Sequence[int]] = None,
                     threads: int = 1) -> Dict:
        """
        Evaluate every `frame_XXXX.g4d` checkpoint of a directory against the dataset.

        A directory holding only `background.g4d` is scored with `evaluate_background`.

        Args:
            dataset (Dataset): The sequence the checkpoints were trained on.
            checkpoints_dir (Path): Directory of per-frame checkpoints.
            views (Sequence[int] | None): Views to score; all views by default.
            threads (int): Frames evaluated in parallel.

        Returns:
            dict: {"table" (per frame and view DataFrame), "frames" (per-frame means),
            "summary" (sequence means), "tracking" (centroid errors or None)}.

        Raises:
            PipelineError: If the directory holds no checkpoint.
        """
        checkpoints_dir = Path(checkpoints_dir)
        paths = sorted(checkpoints_dir.glob("frame_*.g4d"))
        if not paths:
            background = checkpoints_dir / BACKGROUND_CHECKPOINT
            if background.exists():
                return self.evaluate_background(dataset, background, views, threads)
            raise PipelineError(f"no frame or background checkpoints in {checkpoints_dir}")
        views = list(range(dataset.V)) if views is None else list(views)
        logger.info(f"Evaluating {len(paths)} checkpoints on {len(views)} views")

        def evaluate(path: Path):
            scene, sections, _ = self.scene.load_checkpoint(path)
            heads = SemanticHeads.from_sections(sections)
            t = scene.frame_index
            bundle = dataset.frame(t)
            rows = []
            for v in views:
                row = self.view_metrics(scene, heads, dataset.rig[v], bundle.images[v], bundle.masks[v], dataset.D)
                rows.append({"frame": t, "view": v, **row})
            centroids = self.instance_centroids(scene, heads, dataset.D) if heads is not None else None
            return rows, t, centroids

        results = Parallel(n_jobs=threads, prefer="threads")(delayed(evaluate)(p) for p in paths)
        table = pd.DataFrame([row for rows, _, _ in results for row in rows])
        table = table.sort_values(["frame", "view"], kind="stable").reset_index(drop=True)
        columns = [c for c in METRIC_COLUMNS if c in table]
        frames = table.groupby("frame")[columns].mean().reset_index()
        summary = {c: float(table[c].mean()) for c in columns}
        tracking = self._tracking_errors(dataset, {t: c for _, t, c in results if c is not None})
        if tracking is not None:
            summary["centroid_error"] = tracking["max_relative_error"]
        return {"table": table, "frames": frames, "summary": summary, "tracking": tracking}

    def masked_psnr(self, a: np.ndarray, b: np.ndarray, select: np.ndarray) -> float:
        """PSNR over the selected pixels; NaN when nothing is selected."""
        if not np.any(select):
            return math.nan
        return self.psnr(np.asarray(a)[select], np.asarray(b)[select])

    def evaluate_background(self, dataset, path: Path, views: Optional[Sequence[int]] = None,
                            threads: int = 1) -> Dict:
        """
        Score a background-only checkpoint on the background pixels (label 0) of every frame.

        Returns:
            dict: Same keys as `evaluate_run`, with PSNR and SSIM columns only and no tracking.
        """
        scene, _, _ = self.scene.load_checkpoint(path)
        views = list(range(dataset.V)) if views is None else list(views)
        logger.info(f"Evaluating background checkpoint {path} on {dataset.T} frames and {len(views)} views")
        colors = {v: self.rasterizer.render_scene(scene, dataset.rig[v]).color for v in views}

        def evaluate(t: int):
            bundle = dataset.frame(t)
            rows = []
            for v in views:
                select = bundle.masks[v] == 0
                rows.append({"frame": t, "view": v,
                             "psnr": self.masked_psnr(colors[v], bundle.images[v], select),
                             "ssim": self.photometric.ssim(colors[v], bundle.images[v], select)})
            return rows

        results = Parallel(n_jobs=threads, prefer="threads")(delayed(evaluate)(t) for t in range(dataset.T))
        table = pd.DataFrame([row for rows in results for row in rows])
        table = table.sort_values(["frame", "view"], kind="stable").reset_index(drop=True)
        frames = table.groupby("frame")[["psnr", "ssim"]].mean().reset_index()
        summary = {c: float(table[c].mean()) for c in ("psnr", "ssim")}
        return {"table": table, "frames": frames, "summary": summary, "tracking": None}

    @staticmethod
    def _tracking_errors(dataset, centroids: Dict[int, np.ndarray]) -> Optional[Dict]:
        if not centroids or not dataset.manifest.ground_truth:
            return None
        try:
            truth = orjson.loads((dataset.root / dataset.manifest.ground_truth).read_bytes())
        except (OSError, orjson.JSONDecodeError):
            logger.warning("Ground-truth sidecar unreadable, skipping centroid tracking errors")
            return None
        true_centroids = np.asarray(truth.get("centroids", []), dtype=np.float64)
        if true_centroids.ndim != 3:
            return None
        lo, hi = dataset.bounds()
        diagonal = float(np.linalg.norm(hi - lo))
        per_frame = {}
        for t, estimate in sorted(centroids.items()):
            if t >= true_centroids.shape[0]:
                continue
            error = np.linalg.norm(estimate - true_centroids[t], axis=1) / diagonal
            per_frame[t] = error.tolist()
        finite = [e for errors in per_frame.values() for e in errors if np.isfinite(e)]
        return {"diagonal": diagonal, "relative_errors": per_frame,
                "max_relative_error": float(max(finite)) if finite else math.nan}

    @staticmethod
    def metrics_json(result: Dict) -> bytes:
        payload = {
            "summary": result["summary"],
            "frames": result["frames"].to_dict(orient="records"),
            "views": result["table"].to_dict(orient="records"),
            "tracking": result["tracking"],
        }
        return orjson.dumps(convert_to_native(payload), option=orjson.OPT_INDENT_2 | orjson.OPT_SORT_KEYS)
