from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from app.helpers.config_helpers import DensifyConfig
from app.logFile import logger
from app.services.scene_service import GaussianSet, SceneService


@dataclass
class DensifyStats:
    """
    Running densification statistics of one primitive set.

    Attributes:
        grad_sum (np.ndarray): Sum of 2D mean-gradient magnitudes over the views a primitive was visible in.
        count (np.ndarray): Number of such views.
        max_footprint (np.ndarray): Largest projected 3-sigma extent seen, as a fraction of the image size.
    """

    grad_sum: np.ndarray
    count: np.ndarray
    max_footprint: np.ndarray

    @classmethod
    def zeros(cls, n: int) -> "DensifyStats":
        return cls(np.zeros(n), np.zeros(n), np.zeros(n))

    def accumulate(self, mean2d_norm: np.ndarray, visible: np.ndarray, footprint: np.ndarray) -> None:
        self.grad_sum[visible] += mean2d_norm[visible]
        self.count[visible] += 1
        self.max_footprint[visible] = np.maximum(self.max_footprint[visible], footprint[visible])

    @property
    def mean_grad(self) -> np.ndarray:
        return np.where(self.count > 0, self.grad_sum / np.maximum(self.count, 1), 0.0)


@dataclass
class DensifyReport:
    """
    What one densification pass did.

    New primitives are `primitives.subset(keep)` followed by the children; `parents[i]`
    is the pre-pass index the i-th child was derived from.
    """

    keep: np.ndarray
    parents: np.ndarray
    cloned: int = 0
    split: int = 0
    pruned: int = 0
    candidates: int = 0
    clone_rows: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))

    @property
    def modified(self) -> int:
        return self.cloned + self.split + self.pruned


class DensifyService:
    """
    Clone, split and prune under a modification budget.

    Candidates are ranked before the budget is applied: pruning of transparent primitives
    first (lowest opacity first), then growth by descending mean 2D gradient, then pruning
    of oversized footprints.
    """

    def __init__(self, config: Optional[DensifyConfig] = None, scene: Optional[SceneService] = None):
        self.config = config or DensifyConfig()
        self.scene = scene or SceneService()

    def densify_prune(self, primitives: GaussianSet, stats: DensifyStats, scene_extent: float,
                      rng: np.random.Generator, cap: Optional[float] = None,
                      budget: Optional[int] = None) -> tuple:
        """
        Apply one densification pass.

        Args:
            primitives (GaussianSet): Current primitives.
            stats (DensifyStats): Statistics accumulated since the previous pass.
            scene_extent (float): Scene size used by the clone/split decision.
            rng (np.random.Generator): Jitter and split sampling.
            cap (float | None): Fraction of primitives that may be modified; defaults to the config cap.
            budget (int | None): Absolute modification budget overriding `cap`.

        Returns:
            tuple: (new GaussianSet, DensifyReport).
        """
        cfg = self.config
        n = len(primitives)
        if n == 0:
            return primitives.copy(), DensifyReport(keep=np.zeros(0, dtype=np.int64), parents=np.zeros(0, dtype=np.int64))
        if budget is None:
            budget = int(np.floor((cfg.cap if cap is None else cap) * n + 1e-9))
        budget = max(0, budget)

        act = self.scene.activate(primitives)
        opacity = act.opacities
        max_scale = act.scales.max(axis=1)
        grad = stats.mean_grad

        transparent = np.flatnonzero(opacity < cfg.min_opacity)
        transparent = transparent[np.lexsort((transparent, opacity[transparent]))]
        growing = np.flatnonzero((grad > cfg.grad_threshold) & (opacity >= cfg.min_opacity))
        growing = growing[np.lexsort((growing, -grad[growing]))]
        oversized = np.flatnonzero((stats.max_footprint > cfg.max_screen_fraction) & (opacity >= cfg.min_opacity)
                                   & ~np.isin(np.arange(n), growing))
        oversized = oversized[np.lexsort((oversized, -stats.max_footprint[oversized]))]

        ranked = [(int(i), "prune") for i in transparent] + [(int(i), "grow") for i in growing] \
            + [(int(i), "prune") for i in oversized]
        chosen = ranked[:budget]
        prune = np.array([i for i, kind in chosen if kind == "prune"], dtype=np.int64)
        grow = np.array([i for i, kind in chosen if kind == "grow"], dtype=np.int64)
        dense_limit = cfg.percent_dense * scene_extent
        clone = grow[max_scale[grow] <= dense_limit] if grow.size else grow
        split = grow[max_scale[grow] > dense_limit] if grow.size else grow

        children, parents = [], []
        if clone.size:
            child = primitives.subset(clone)
            offsets = rng.normal(size=(clone.size, 3)) * act.scales[clone] * cfg.clone_jitter
            child.positions = child.positions + np.einsum("nij,nj->ni", act.rotation_matrices[clone], offsets)
            children.append(child)
            parents.append(clone)
        if split.size:
            for _ in range(2):
                child = primitives.subset(split)
                samples = rng.normal(size=(split.size, 3)) * act.scales[split]
                child.positions = child.positions + np.einsum("nij,nj->ni", act.rotation_matrices[split], samples)
                child.log_scales = child.log_scales - np.log(cfg.split_scale_divisor)
                children.append(child)
                parents.append(split)

        removed = np.zeros(n, dtype=bool)
        removed[prune] = True
        removed[split] = True
        keep = np.flatnonzero(~removed)
        result = primitives.subset(keep)
        for child in children:
            result = result.concat(child)
        report = DensifyReport(
            keep=keep,
            parents=np.concatenate(parents) if parents else np.zeros(0, dtype=np.int64),
            cloned=int(clone.size),
            split=int(split.size),
            pruned=int(prune.size),
            candidates=len(ranked),
            clone_rows=np.arange(keep.size, keep.size + clone.size),
        )
        if report.modified:
            logger.debug(f"Densify: {report.cloned} cloned, {report.split} split, {report.pruned} pruned "
                         f"({len(ranked)} candidates, budget {budget})")
        return result, report
