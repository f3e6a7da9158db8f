from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from tqdm import tqdm

from app.helpers.config_helpers import LossWeights, Settings, TrainConfig
from app.helpers.exceptions import DatasetError, PipelineError, TrainingAbort
from app.helpers.geometry_helpers import SH_COEFFS, inverse_sigmoid, rgb_to_sh_dc
from app.logFile import TrainingLogWriter, logger
from app.services.dataset.dataset_service import Dataset
from app.services.evalkit_service import EvalkitService
from app.services.flow_warp_service import FlowWarpService
from app.services.losses.geometric_loss_service import GeometricLossService
from app.services.losses.photometric_loss_service import PhotometricLossService
from app.services.losses.semantic_loss_service import SemanticLossService
from app.services.mask_geometry_service import MaskGeometryService
from app.services.neural_heads_service import NeuralHeadsService, SemanticHeads, softmax
from app.services.rasterizer_service import RasterizerService
from app.services.scene_service import FEATURE_DIM, GAUSSIAN_ATTRIBUTES, GaussianSet, SceneModel, SceneService
from app.services.trainer.densify_service import DensifyService, DensifyStats
from app.services.trainer.optimizer_service import AdamState, OptimizerService

STAGE_IDS = {"background": 1, "first_frame": 2, "refine": 3, "frame": 4}


@dataclass
class StagePlan:
    """
    What one optimization schedule trains and which energies it evaluates.

    Attributes:
        bg_mode (str): "all", "appearance" (SH + opacity) or "frozen".
        fg_mode (str): "all", "motion" (positions + rotations) or "frozen".
        densify (tuple): Layers densified during the schedule.
        budget (int | None): Total modifications allowed over the schedule; None means per-pass cap only.
    """

    name: str
    frame: int
    iterations: int
    weights: LossWeights
    frames: Sequence[int]
    bg_mode: str = "all"
    fg_mode: str = "all"
    train_classifier: bool = False
    train_semantic: bool = False
    mask_color_to_bg: bool = False
    densify: Tuple[str, ...] = ()
    densify_cap: float = 1.0
    budget: Optional[int] = None


@dataclass
class StageReferences:
    """Frozen quantities the regularizers compare against."""

    fg_prev: Optional[Dict[str, np.ndarray]] = None
    arap_positions: Optional[np.ndarray] = None
    arap_rotations: Optional[np.ndarray] = None
    neighbors: Optional[np.ndarray] = None
    arap_weights: Optional[np.ndarray] = None
    sdfs: Optional[List[Dict[int, np.ndarray]]] = None


@dataclass
class StageResult:
    history: List[Dict[str, float]] = field(default_factory=list)
    densify_modified: int = 0
    densify_reference: int = 0


class TrainerService:
    """
    The four optimization schedules: background pretraining, first-frame initialization,
    per-frame motion refinement and per-frame joint training, plus the `track` driver.
    """

    def __init__(self, scene: Optional[SceneService] = None, rasterizer: Optional[RasterizerService] = None,
                 heads: Optional[NeuralHeadsService] = None, photometric: Optional[PhotometricLossService] = None,
                 semantic: Optional[SemanticLossService] = None, geometric: Optional[GeometricLossService] = None,
                 mask_geometry: Optional[MaskGeometryService] = None, evalkit: Optional[EvalkitService] = None):
        self.scene = scene or SceneService()
        self.rasterizer = rasterizer or RasterizerService(self.scene)
        self.heads = heads or NeuralHeadsService()
        self.photometric = photometric or PhotometricLossService()
        self.semantic = semantic or SemanticLossService(self.heads, self.scene)
        self.geometric = geometric or GeometricLossService()
        self.mask_geometry = mask_geometry or MaskGeometryService()
        self.evalkit = evalkit or EvalkitService(self.rasterizer, self.heads, self.photometric)
        self.show_progress = Settings().progress

    # seeding

    def seed_background(self, dataset: Dataset, config: TrainConfig, rng: np.random.Generator) -> GaussianSet:
        """Background primitives from the dataset's sparse points, or uniformly inside the scene box."""
        points = dataset.sparse_points()
        if points is not None:
            positions = points["positions"]
            colors = points.get("colors")
        else:
            lo, hi = dataset.bounds()
            positions = rng.uniform(lo, hi, size=(config.seeding.bg_random_count, 3))
            colors = None
        if colors is None:
            colors = self._sample_colors(dataset, positions)
        return self._new_primitives(positions, colors, config, rng)

    def seed_foreground(self, dataset: Dataset, config: TrainConfig, rng: np.random.Generator) -> GaussianSet:
        """
        Foreground primitives inside every instance silhouette of frame 0.

        The silhouette centroids of each instance are triangulated to a depth; mask pixels of the
        views with the largest silhouettes are back-projected at that depth.

        Raises:
            PipelineError: If an instance has no mask pixel in any view.
        """
        bundle = dataset.frame(0)
        cameras = dataset.rig.cameras
        warp = FlowWarpService(config.warp)
        positions, colors = [], []
        for d in range(1, dataset.D + 1):
            areas = np.array([np.count_nonzero(m == d) for m in bundle.masks])
            if not np.any(areas):
                raise PipelineError(f"instance {d} has no mask pixels in any view of frame 0", instance=d)
            observations = []
            for v in np.flatnonzero(areas):
                rows, cols = np.nonzero(bundle.masks[v] == d)
                observations.append((cameras[v], np.array([cols.mean(), rows.mean()])))
            result = warp.triangulate(observations)
            if result.degenerate:
                lo, hi = dataset.bounds()
                anchor = (lo + hi) / 2.0
                logger.warning(f"Instance {d}: centroid triangulation degenerate, seeding at the scene centre")
            else:
                anchor = result.point
            views = np.argsort(-areas, kind="stable")[:config.seeding.fg_seed_views]
            views = [v for v in views if areas[v] > 0]
            per_view = max(1, config.seeding.fg_points_per_instance // len(views))
            for v in views:
                camera = cameras[v]
                depth = float((camera.R @ anchor + camera.t)[2])
                rows, cols = np.nonzero(bundle.masks[v] == d)
                pick = rng.choice(rows.size, size=min(per_view, rows.size), replace=False)
                pix = np.stack([cols[pick], rows[pick], np.ones(pick.size)], axis=-1).astype(np.float64)
                rays = pix @ np.linalg.inv(camera.K).T
                extent = np.sqrt(areas[v]) / camera.K[0, 0] * depth
                depths = depth + rng.normal(0.0, 0.15 * extent, size=pick.size)
                cam_points = rays * depths[:, None]
                positions.append((cam_points - camera.t) @ camera.R)
                colors.append(bundle.images[v][rows[pick], cols[pick]])
        if not positions:
            return GaussianSet.empty()
        return self._new_primitives(np.concatenate(positions), np.concatenate(colors), config, rng)

    def _new_primitives(self, positions: np.ndarray, colors: np.ndarray, config: TrainConfig,
                        rng: np.random.Generator) -> GaussianSet:
        n = positions.shape[0]
        if n > 3:
            neighbors = self.scene.knn_neighbors(positions, min(3, n - 1))
            spacing = np.linalg.norm(positions[neighbors] - positions[:, None, :], axis=-1).mean(axis=1)
        else:
            spacing = np.full(n, 0.05)
        spacing = np.maximum(spacing, 1e-4) * config.seeding.initial_scale_factor
        sh = np.zeros((n, 3, SH_COEFFS))
        sh[:, :, 0] = rgb_to_sh_dc(np.clip(colors, 0.0, 1.0))
        return GaussianSet(
            positions=positions.astype(np.float64),
            rotations=np.tile([1.0, 0.0, 0.0, 0.0], (n, 1)),
            log_scales=np.repeat(np.log(spacing)[:, None], 3, axis=1),
            opacity_logits=np.full(n, float(inverse_sigmoid(np.array(0.1)))),
            sh=sh,
            features=rng.normal(0.0, 0.1, size=(n, FEATURE_DIM)),
        )

    def _sample_colors(self, dataset: Dataset, positions: np.ndarray) -> np.ndarray:
        camera = dataset.rig[0]
        image = dataset.image(0, 0)
        uv, depth = camera.project(positions)
        cols = np.clip(np.rint(uv[:, 0]).astype(np.int64), 0, camera.width - 1)
        rows = np.clip(np.rint(uv[:, 1]).astype(np.int64), 0, camera.height - 1)
        colors = image[rows, cols]
        colors[depth <= 0] = 0.5
        return colors

    # schedules

    def init_background(self, dataset: Dataset, config: TrainConfig,
                        log: Optional[TrainingLogWriter] = None) -> SceneModel:
        """
        Pretrain the background layer on background pixels of uniformly sampled (view, frame) pairs.

        Returns:
            SceneModel: Background primitives with their appearance snapshot and an empty foreground.

        Raises:
            DatasetError: If no mask of the dataset has a background pixel.
        """
        self._check_background_pixels(dataset)
        rng = self._rng(config, "background", 0)
        bg = self.seed_background(dataset, config, rng)
        scene = SceneModel(bg=bg, fg=GaussianSet.empty(), frame_index=0)
        logger.info(f"Background stage: {len(bg)} seeded primitives, {config.iterations.bg} iterations")
        plan = StagePlan(name="background", frame=0, iterations=config.iterations.bg, weights=config.background,
                         frames=list(range(dataset.T)), bg_mode="all", fg_mode="frozen", mask_color_to_bg=True,
                         densify=("bg",), densify_cap=config.densify.init_cap)
        self._run_stage(plan, scene, None, dataset, config, StageReferences(), rng, log)
        scene.snapshot_background()
        logger.info(f"Background stage finished with {len(scene.bg)} primitives")
        return scene

    def init_first_frame(self, dataset: Dataset, scene: SceneModel, config: TrainConfig,
                         log: Optional[TrainingLogWriter] = None) -> Tuple[SceneModel, SemanticHeads]:
        """
        Seed the foreground of frame 0 and jointly train both layers and both heads.

        Returns:
            tuple: (scene at frame 0, trained heads).
        """
        rng = self._rng(config, "first_frame", 0)
        semantic_on = config.ablation.semantic_features
        bundle = dataset.frame(0)
        if semantic_on and dataset.D > 0 and bundle.compressed_embeddings is None:
            raise DatasetError("compressed embeddings are missing; run compress-emb first",
                               path=str(dataset.root), rule="compressed_embeddings")
        scene = scene.copy()
        scene.fg = self.seed_foreground(dataset, config, rng)
        scene.frame_index = 0
        if not scene.bg_reference:
            scene.snapshot_background()
        heads = self.heads.init_heads(FEATURE_DIM, dataset.D + 1, rng)
        heads.autoencoder = dataset.autoencoder()
        weights = config.first_frame if semantic_on else self._without_semantics(config.first_frame)
        logger.info(f"First-frame stage: {len(scene.fg)} foreground primitives, {config.iterations.first} iterations")
        plan = StagePlan(name="first_frame", frame=0, iterations=config.iterations.first, weights=weights,
                         frames=[0], bg_mode="all", fg_mode="all", train_classifier=semantic_on,
                         train_semantic=semantic_on, densify=("fg",), densify_cap=config.densify.init_cap)
        self._run_stage(plan, scene, heads, dataset, config, StageReferences(), rng, log)
        logger.info(f"First-frame stage finished with {len(scene.fg)} foreground primitives")
        return scene, heads

    def refine_motion(self, scene: SceneModel, dataset: Dataset, t: int, config: TrainConfig,
                      refs: StageReferences, log: Optional[TrainingLogWriter] = None) -> SceneModel:
        """Optimize only foreground positions and rotations under the smoothness and color terms."""
        rng = self._rng(config, "refine", t)
        plan = StagePlan(name="refine", frame=t, iterations=config.iterations.refine, weights=config.refine,
                         frames=[t], bg_mode="frozen", fg_mode="motion")
        self._run_stage(plan, scene, None, dataset, config, refs, rng, log)
        return scene

    def train_frame(self, scene: SceneModel, heads: SemanticHeads, dataset: Dataset, t: int, config: TrainConfig,
                    refs: StageReferences, log: Optional[TrainingLogWriter] = None) -> Dict[str, float]:
        """
        Joint per-frame training: foreground (all attributes), background appearance and the semantic head.

        Returns:
            dict: Densification bookkeeping of the frame.

        Raises:
            TrainingAbort: If a gradient becomes non-finite.
        """
        rng = self._rng(config, "frame", t)
        semantic_on = config.ablation.semantic_features
        weights = config.frame if semantic_on else self._without_semantics(config.frame)
        if semantic_on and weights.sdf > 0 and refs.sdfs is None:
            bundle = dataset.frame(t)
            refs.sdfs = [self.mask_geometry.instance_sdfs(mask, dataset.D) for mask in bundle.masks]
        n0 = len(scene.fg)
        budget = max(0, int(np.ceil(config.densify.cap * n0)) - 1)
        plan = StagePlan(name="frame", frame=t, iterations=config.iterations.frame, weights=weights, frames=[t],
                         bg_mode="appearance", fg_mode="all", train_classifier=False, train_semantic=semantic_on,
                         densify=("fg",), densify_cap=config.densify.cap, budget=budget)
        result = self._run_stage(plan, scene, heads, dataset, config, refs, rng, log)
        fraction = result.densify_modified / n0 if n0 else 0.0
        if n0 and fraction >= config.densify.cap and config.densify.cap > 0:
            raise TrainingAbort(f"frame {t} modified {result.densify_modified} of {n0} foreground primitives")
        return {"densify_modified": float(result.densify_modified), "densify_fraction": fraction}

    def track_frame(self, dataset: Dataset, prev: SceneModel, heads: SemanticHeads, t: int, config: TrainConfig,
                    log: Optional[TrainingLogWriter] = None) -> Tuple[SceneModel, Dict[str, float]]:
        """Warp, refine and train frame t starting from the frame t-1 state."""
        bundle = dataset.frame(t)
        cameras = dataset.rig.cameras
        fg = prev.fg.copy()
        metrics: Dict[str, float] = {}
        if config.ablation.explicit_warping and len(fg):
            prev_targets = [self.rasterizer.rasterize(prev.combined(), cam, config=config.raster) for cam in cameras]
            warp = FlowWarpService(config.warp, self.rasterizer.threads)
            report = warp.warp_foreground(prev.fg, cameras, bundle.flows, prev_targets, fg_offset=len(prev.bg))
            fg.positions = report.positions
            metrics["warp_fallbacks"] = float(report.fallbacks)
        scene = SceneModel(bg=prev.bg.copy(), fg=fg, bg_reference={k: v.copy() for k, v in prev.bg_reference.items()},
                           frame_index=t)
        refs = StageReferences(fg_prev={k: v.copy() for k, v in prev.fg.arrays().items()})
        self._set_arap_reference(refs, prev.fg.positions, prev.fg.rotations, config.knn_k)
        if config.ablation.motion_refinement:
            self.refine_motion(scene, dataset, t, config, refs, log)
        if config.ablation.training_stage:
            metrics.update(self.train_frame(scene, heads, dataset, t, config, refs, log))
        metrics.update(self.evalkit.frame_metrics(scene, heads, dataset, t, self.eval_views(dataset, config),
                                                  config.raster))
        logger.info(f"Frame {t}: " + ", ".join(f"{k}={v:.4f}" for k, v in sorted(metrics.items())))
        return scene, metrics

    def track(self, dataset: Dataset, config: TrainConfig, start: int, end: int, out_dir: Path) -> List[Dict]:
        """
        Track frames start..end, one checkpoint per frame; frames whose checkpoint exists are skipped.

        Args:
            dataset (Dataset): The sequence.
            config (TrainConfig): Training configuration.
            start (int): First frame to track (frame 0 comes from init-frame).
            end (int): Last frame, inclusive.
            out_dir (Path): Directory holding `frame_XXXX.g4d` checkpoints and logs.

        Returns:
            list: Metrics record per tracked frame.
        """
        out_dir = Path(out_dir)
        start = max(start, 1)
        if end >= dataset.T:
            raise PipelineError(f"frame range ends at {end} but the dataset has {dataset.T} frames")
        records = []
        with TrainingLogWriter(out_dir / "train_log.jsonl", config.log_every) as log:
            for t in range(start, end + 1):
                path = checkpoint_path(out_dir, t)
                if path.exists():
                    logger.info(f"Frame {t} already tracked, resuming after it")
                    continue
                prev_path = checkpoint_path(out_dir, t - 1)
                if not prev_path.exists():
                    raise PipelineError(f"missing checkpoint for frame {t - 1}: {prev_path}")
                prev, sections, meta = self.scene.load_checkpoint(prev_path)
                heads = SemanticHeads.from_sections(sections)
                if heads is None:
                    raise PipelineError(f"checkpoint {prev_path} carries no semantic heads")
                scene, metrics = self.track_frame(dataset, prev, heads, t, config, log)
                self.save(path, scene, heads, dataset, stage="frame", metrics=metrics)
                records.append({"frame": t, **metrics})
        return records

    def save(self, path: Path, scene: SceneModel, heads: Optional[SemanticHeads], dataset: Dataset, stage: str,
             metrics: Optional[Dict[str, float]] = None) -> None:
        meta = {"stage": stage, "frame": scene.frame_index, "n_instances": dataset.D, "raw_dim": dataset.R,
                "scene_extent": dataset.scene_extent, "metrics": metrics or {},
                "cameras": [camera.to_dict() for camera in dataset.rig]}
        self.scene.save_checkpoint(path, scene, heads.to_sections() if heads else None, meta)

    # internals

    def _run_stage(self, plan: StagePlan, scene: SceneModel, heads: Optional[SemanticHeads], dataset: Dataset,
                   config: TrainConfig, refs: StageReferences, rng: np.random.Generator,
                   log: Optional[TrainingLogWriter]) -> StageResult:
        optimizer = OptimizerService(config.adam)
        densifier = DensifyService(config.densify, self.scene)
        state = AdamState()
        result = StageResult(densify_reference=len(scene.fg))
        remaining = plan.budget
        views = self._train_views(dataset, config)
        extent = dataset.scene_extent
        size_threshold = config.size_threshold_fraction * extent
        stats = {"bg": DensifyStats.zeros(len(scene.bg)), "fg": DensifyStats.zeros(len(scene.fg))}

        iterator = range(plan.iterations)
        if self.show_progress and plan.iterations > 0:
            iterator = tqdm(iterator, desc=f"{plan.name} t={plan.frame}", leave=False)
        for it in iterator:
            v = int(rng.choice(views))
            t = int(rng.choice(plan.frames))
            terms, grads, head_grads, target = self._evaluate(plan, scene, heads, dataset, v, t, config, refs,
                                                              rng, size_threshold)
            self._check_finite(plan, scene, grads, it)

            lr_pos = optimizer.position_lr(config.lr, it, plan.iterations, extent)
            params, grad_table, lr = {}, {}, {}
            for layer, mode in (("bg", plan.bg_mode), ("fg", plan.fg_mode)):
                names = self._trainable(mode)
                layer_set = getattr(scene, layer)
                rates = optimizer.gaussian_lr(config.lr, f"{layer}.", lr_pos)
                for name in names:
                    params[f"{layer}.{name}"] = getattr(layer_set, name)
                    grad_table[f"{layer}.{name}"] = grads[layer][name]
                    lr[f"{layer}.{name}"] = rates[f"{layer}.{name}"]
            for prefix, mlp, enabled in (("cls.", heads.classifier if heads else None, plan.train_classifier),
                                         ("sem.", heads.semantic if heads else None, plan.train_semantic)):
                if not enabled or mlp is None:
                    continue
                for name, array in mlp.arrays().items():
                    params[prefix + name] = array
                    grad_table[prefix + name] = head_grads.get(prefix + name, np.zeros_like(array))
                    lr[prefix + name] = config.lr.heads
            optimizer.adam_step(params, grad_table, state, lr)
            if heads is not None:
                heads.classifier.touch()
                heads.semantic.touch()

            footprint = (2.0 * config.raster.radius_sigma
                         * np.sqrt(np.maximum(target.projection.cov2d[:, 0, 0], target.projection.cov2d[:, 1, 1]))
                         / max(target.camera.width, target.camera.height))
            n_bg = len(scene.bg)
            visible = target.projection.visible
            if "bg" in plan.densify:
                stats["bg"].accumulate(grads["mean2d_norm"][:n_bg], visible[:n_bg], footprint[:n_bg])
            if "fg" in plan.densify:
                stats["fg"].accumulate(grads["mean2d_norm"][n_bg:], visible[n_bg:], footprint[n_bg:])

            if (it + 1) % config.densify.interval == 0 and it + 1 < plan.iterations:
                for layer in plan.densify:
                    modified = self._densify_layer(layer, scene, stats, densifier, state, refs, extent, rng,
                                                   plan.densify_cap, remaining, config)
                    result.densify_modified += modified
                    if remaining is not None:
                        remaining -= modified
                    stats[layer] = DensifyStats.zeros(len(getattr(scene, layer)))

            total = self.total_energy(terms, plan.weights)
            record = {"total": total, **terms}
            result.history.append(record)
            if log is not None:
                log.write(plan.name, plan.frame, it, record)
        return result

    def _densify_layer(self, layer: str, scene: SceneModel, stats, densifier: DensifyService, state: AdamState,
                       refs: StageReferences, extent: float, rng: np.random.Generator, cap: float,
                       remaining: Optional[int], config: TrainConfig) -> int:
        primitives = getattr(scene, layer)
        budget = None
        if remaining is not None:
            budget = min(int(np.floor(cap * len(primitives) + 1e-9)), max(0, remaining))
        updated, report = densifier.densify_prune(primitives, stats[layer], extent, rng, cap=cap, budget=budget)
        if report.modified == 0:
            return 0
        setattr(scene, layer, updated)
        state.remap(f"{layer}.", report.keep, report.parents.size)
        if layer == "fg":
            index = np.concatenate([report.keep, report.parents])
            if refs.fg_prev is not None:
                refs.fg_prev = {k: v[index] for k, v in refs.fg_prev.items()}
            if refs.arap_positions is not None:
                self._set_arap_reference(refs, refs.arap_positions[index], refs.arap_rotations[index], config.knn_k)
        return report.modified

    def _set_arap_reference(self, refs: StageReferences, positions: np.ndarray, rotations: np.ndarray,
                            k: int) -> None:
        refs.arap_positions = positions.copy()
        refs.arap_rotations = rotations.copy()
        if positions.shape[0] > k:
            refs.neighbors = self.scene.knn_neighbors(positions, k)
            radius = self.geometric.influence_radius(positions, refs.neighbors)
            refs.arap_weights = self.geometric.arap_weights(positions, refs.neighbors, radius)
        else:
            refs.neighbors = None
            refs.arap_weights = None

    def _evaluate(self, plan: StagePlan, scene: SceneModel, heads: Optional[SemanticHeads], dataset: Dataset,
                  v: int, t: int, config: TrainConfig, refs: StageReferences, rng: np.random.Generator,
                  size_threshold: float):
        """Energy terms and gradients of one iteration."""
        weights = plan.weights
        bundle = dataset.frame(t)
        camera = dataset.rig[v]
        image, labels = bundle.images[v], bundle.masks[v]
        combined = scene.combined()
        n_bg = len(scene.bg)
        target = self.rasterizer.rasterize(combined, camera, config=config.raster)

        terms: Dict[str, float] = {}
        color_mask = labels == 0 if plan.mask_color_to_bg else None
        color = self.photometric.color_loss(target.color, image, color_mask, weights.dssim_mix)
        terms["color"] = color.value
        d_color = color.grad * weights.color
        d_feature = np.zeros_like(target.feature)
        d_alpha = np.zeros_like(target.alpha)
        head_grads: Dict[str, np.ndarray] = {}

        if heads is not None and (weights.id > 0 or weights.emb > 0):
            pixel_terms, d_feature, d_alpha, head_grads = self._pixel_semantic_terms(
                target, heads, labels, bundle.compressed_embeddings, weights, config.raster.alpha_norm_eps)
            terms.update(pixel_terms)

        raster = self.rasterizer.rasterize_backward(target, d_color, d_feature, d_alpha)
        grads = {
            "bg": {name: getattr(raster, name)[:n_bg].copy() for name in GAUSSIAN_ATTRIBUTES},
            "fg": {name: getattr(raster, name)[n_bg:].copy() for name in GAUSSIAN_ATTRIBUTES},
            "mean2d_norm": raster.mean2d_norm,
        }

        if weights.iso > 0 or weights.size > 0:
            for layer in ("bg", "fg"):
                if len(getattr(scene, layer)) == 0 or self._trainable(plan.bg_mode if layer == "bg" else plan.fg_mode) == ():
                    continue
                shape = self.geometric.iso_size_losses(getattr(scene, layer).log_scales, size_threshold)
                terms["iso"] = terms.get("iso", 0.0) + shape["iso"]
                terms["size"] = terms.get("size", 0.0) + shape["size"]
                grads[layer]["log_scales"] += weights.iso * shape["iso_grad"] + weights.size * shape["size_grad"]

        fg = scene.fg
        if heads is not None and weights.kl3d > 0 and len(fg) > config.knn_k:
            kl = self.semantic.kl3d_loss(fg.features, fg.positions, heads.classifier, config.kl_sample_count,
                                         config.knn_k, rng)
            terms["kl3d"] = kl["value"]
            grads["fg"]["features"] += weights.kl3d * kl["features"]
            if plan.train_classifier:
                for name, g in kl["classifier"].items():
                    head_grads["cls." + name] = head_grads.get("cls." + name, 0.0) + weights.kl3d * g

        if weights.smooth > 0 and refs.neighbors is not None:
            arap = self.geometric.arap_loss(fg.positions, fg.rotations, refs.arap_positions, refs.arap_rotations,
                                            refs.neighbors, 1.0, weights=refs.arap_weights)
            terms["smooth"] = arap["value"]
            grads["fg"]["positions"] += weights.smooth * arap["positions"]
            grads["fg"]["rotations"] += weights.smooth * arap["rotations"]

        if heads is not None and weights.sdf > 0 and refs.sdfs is not None and len(fg):
            c = np.argmax(self.heads.classify(heads.classifier, fg.features), axis=1)
            sdf = self.geometric.sdf_loss(fg.positions, c, refs.sdfs, dataset.rig.cameras, skip_missing=True)
            terms["sdf"] = sdf["value"]
            grads["fg"]["positions"] += weights.sdf * sdf["positions"]

        if weights.temp_bg > 0 and scene.bg_reference:
            temp_bg = self.geometric.temporal_losses(
                {"sh": scene.bg.sh, "opacity_logits": scene.bg.opacity_logits}, scene.bg_reference)
            terms["temp_bg"] = temp_bg["value"]
            for name, g in temp_bg["grads"].items():
                grads["bg"][name] += weights.temp_bg * g

        if weights.temp > 0 and refs.fg_prev is not None:
            temp = self.geometric.temporal_losses(fg.arrays(), refs.fg_prev)
            terms["temp"] = temp["value"]
            for name, g in temp["grads"].items():
                grads["fg"][name] += weights.temp * g
        return terms, grads, head_grads, target

    def _pixel_semantic_terms(self, target, heads: SemanticHeads, labels: np.ndarray,
                              codes: Optional[np.ndarray], weights: LossWeights, eps: float):
        height, width = target.alpha.shape
        normalized, covered = self.heads.alpha_normalize(target.feature, target.alpha, eps)
        rows = normalized.reshape(-1, normalized.shape[-1])
        d_rows = np.zeros_like(rows)
        terms, head_grads = {}, {}
        if weights.id > 0:
            logits, cache = self.heads.mlp_forward(heads.classifier, rows)
            probs = softmax(logits).reshape(height, width, -1)
            result = self.semantic.id_loss(probs, labels, valid=covered)
            terms["id"] = result.value
            param_grads, d_in = self.heads.mlp_backward(heads.classifier, cache,
                                                        weights.id * result.grad.reshape(rows.shape[0], -1))
            head_grads.update({"cls." + k: g for k, g in param_grads.items()})
            d_rows += d_in
        if weights.emb > 0 and codes is not None and codes.shape[0] > 0:
            out, cache = self.heads.mlp_forward(heads.semantic, rows)
            valid = (labels >= 1) & covered
            supervision = np.zeros((height, width, codes.shape[1]))
            supervision[valid] = codes[labels[valid] - 1]
            result = self.semantic.emb_loss(out.reshape(height, width, -1), supervision, valid)
            terms["emb"] = result.value
            param_grads, d_in = self.heads.mlp_backward(heads.semantic, cache,
                                                        weights.emb * result.grad.reshape(rows.shape[0], -1))
            head_grads.update({"sem." + k: g for k, g in param_grads.items()})
            d_rows += d_in
        d_feature, d_alpha = self.heads.alpha_normalize_backward(d_rows.reshape(normalized.shape), target.feature,
                                                                 target.alpha, covered)
        return terms, d_feature, d_alpha, head_grads

    @staticmethod
    def total_energy(terms: Dict[str, float], weights: LossWeights) -> float:
        """Weighted sum of the evaluated terms; the color term carries `weights.color`."""
        return float(sum(getattr(weights, name) * value for name, value in terms.items()))

    @staticmethod
    def _trainable(mode: str) -> Tuple[str, ...]:
        if mode == "all":
            return GAUSSIAN_ATTRIBUTES
        if mode == "appearance":
            return ("sh", "opacity_logits")
        if mode == "motion":
            return ("positions", "rotations")
        return ()

    @staticmethod
    def _without_semantics(weights: LossWeights) -> LossWeights:
        return weights.model_copy(update={"id": 0.0, "emb": 0.0, "kl3d": 0.0, "sdf": 0.0})

    def _check_finite(self, plan: StagePlan, scene: SceneModel, grads, iteration: int) -> None:
        for layer in ("bg", "fg"):
            for name, g in grads[layer].items():
                bad = ~np.all(np.isfinite(g.reshape(g.shape[0], -1)), axis=1) if g.size else np.zeros(0, bool)
                if np.any(bad):
                    index = int(np.flatnonzero(bad)[0])
                    primitive = getattr(scene, layer).primitive(index)
                    dump = {"stage": plan.name, "frame": plan.frame, "iteration": iteration, "layer": layer,
                            "attribute": name, "index": index,
                            "position": primitive.position.tolist(), "log_scale": primitive.log_scale.tolist(),
                            "opacity_logit": primitive.opacity_logit}
                    logger.error(f"Non-finite gradient, aborting frame: {dump}")
                    raise TrainingAbort(f"non-finite {name} gradient on {layer} primitive {index} "
                                        f"at iteration {iteration} of stage {plan.name}", dump=dump)

    def _check_background_pixels(self, dataset: Dataset) -> None:
        for t in range(dataset.T):
            for v in range(dataset.V):
                if np.any(dataset.mask(v, t) == 0):
                    return
        raise DatasetError("no background pixels in any mask", path=str(dataset.root), rule="background_pixels")

    @staticmethod
    def _train_views(dataset: Dataset, config: TrainConfig) -> List[int]:
        views = [v for v in range(dataset.V) if v not in config.held_out_views]
        if not views:
            raise PipelineError("every view is held out; nothing to train on")
        return views

    @staticmethod
    def eval_views(dataset: Dataset, config: TrainConfig) -> List[int]:
        held = [v for v in config.held_out_views if v < dataset.V]
        return held or list(range(dataset.V))

    @staticmethod
    def _rng(config: TrainConfig, stage: str, frame: int) -> np.random.Generator:
        return np.random.default_rng([config.seed, STAGE_IDS[stage], frame])


def checkpoint_path(out_dir: Path, frame: int) -> Path:
    return Path(out_dir) / f"frame_{frame:04d}.g4d"
