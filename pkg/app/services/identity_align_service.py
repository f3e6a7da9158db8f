from dataclasses import dataclass, field
from typing import Dict, List, Sequence, Tuple

import numpy as np

from app.helpers.exceptions import ShapeMismatchError
from app.logFile import logger
from app.services.mask_geometry_service import MaskGeometryService


@dataclass
class IdMapping:
    """
    Per-view label -> canonical label assignment.

    Attributes:
        mapping (dict): view label -> canonical label; background 0 -> 0 is implicit.
        unmatched_view (list): View labels left without a canonical partner.
        unmatched_canonical (list): Canonical labels left without a view partner.
        scores (dict): view label -> IoU of the accepted pair.
    """

    mapping: Dict[int, int] = field(default_factory=dict)
    unmatched_view: List[int] = field(default_factory=list)
    unmatched_canonical: List[int] = field(default_factory=list)
    scores: Dict[int, float] = field(default_factory=dict)

    def inverse(self) -> "IdMapping":
        return IdMapping(mapping={c: v for v, c in self.mapping.items()},
                         unmatched_view=list(self.unmatched_canonical),
                         unmatched_canonical=list(self.unmatched_view),
                         scores={self.mapping[v]: s for v, s in self.scores.items()})


class IdentityAlignService:
    """
    Gives every view the canonical instance ids.

    First-frame masks of each view are matched against the canonical mask by greedy
    maximum IoU, then the resulting lookup is applied to every frame of that view.
    """

    def __init__(self, geometry: MaskGeometryService = None, iou_floor: float = 0.1):
        self.geometry = geometry or MaskGeometryService()
        self.iou_floor = iou_floor

    def iou(self, a: np.ndarray, b: np.ndarray) -> float:
        return self.geometry.mask_iou(a, b)

    def match_canonical_to_view(self, canonical_mask: np.ndarray, view_mask: np.ndarray) -> IdMapping:
        """
        Greedy one-to-one assignment of view labels to canonical labels.

        The unmatched (canonical, view) pair with the highest IoU above the floor is accepted
        repeatedly; ties go to the lower canonical label, then the lower view label.

        Args:
            canonical_mask (np.ndarray): (H, W) canonical label map.
            view_mask (np.ndarray): (H, W) first-frame label map of one view.

        Returns:
            IdMapping: The accepted pairs and the labels left unmatched on either side.

        Raises:
            ShapeMismatchError: If the resolutions differ.
        """
        if canonical_mask.shape != view_mask.shape:
            raise ShapeMismatchError(f"canonical mask {canonical_mask.shape} and view mask {view_mask.shape} differ")
        n_c = int(canonical_mask.max(initial=0))
        n_v = int(view_mask.max(initial=0))
        ious = self.geometry.label_iou_matrix(canonical_mask, view_mask, n_c, n_v)
        canon_labels = [c for c in range(1, n_c + 1) if np.any(canonical_mask == c)]
        view_labels = [v for v in range(1, n_v + 1) if np.any(view_mask == v)]

        pairs = [(-ious[c, v], c, v) for c in canon_labels for v in view_labels if ious[c, v] > self.iou_floor]
        pairs.sort()
        result = IdMapping()
        used_c, used_v = set(), set()
        for neg_iou, c, v in pairs:
            if c in used_c or v in used_v:
                continue
            used_c.add(c)
            used_v.add(v)
            result.mapping[v] = c
            result.scores[v] = -neg_iou
        result.unmatched_view = [v for v in view_labels if v not in used_v]
        result.unmatched_canonical = [c for c in canon_labels if c not in used_c]
        if result.unmatched_view:
            logger.warning(f"View labels without a canonical match: {result.unmatched_view}")
        return result

    def propagate_ids(self, mapping: IdMapping, masks: Sequence[np.ndarray]) -> Tuple[List[np.ndarray], int]:
        """
        Rewrite every frame of one view into canonical ids.

        Args:
            mapping (IdMapping): The view's assignment.
            masks (Sequence[np.ndarray]): Label maps of that view, one per frame.

        Returns:
            tuple: (relabeled masks, number of pixels whose label had no match and became 0).
        """
        size = max([int(m.max(initial=0)) for m in masks] + list(mapping.mapping.keys()) + [0]) + 1
        lookup = np.zeros(size, dtype=np.int64)
        matched = np.zeros(size, dtype=bool)
        matched[0] = True
        for v, c in mapping.mapping.items():
            lookup[v] = c
            matched[v] = True
        relabeled, dropped = [], 0
        for mask in masks:
            labels = np.asarray(mask, dtype=np.int64)
            dropped += int(np.count_nonzero(~matched[labels]))
            relabeled.append(lookup[labels].astype(mask.dtype if mask.dtype.kind in "iu" else np.int64))
        if dropped:
            logger.warning(f"{dropped} pixels carried unmatched labels and were set to background")
        return relabeled, dropped

    def align_views(self, canonical_masks,
                    sequences: Sequence[Sequence[np.ndarray]]) -> Tuple[List[IdMapping], List[List[np.ndarray]], int]:
        """
        Align every view independently against the canonical mask.

        Args:
            canonical_masks (np.ndarray | Sequence[np.ndarray]): Canonical first-frame labeling, either
                shared by every view or one per view.
            sequences (Sequence): Per view, the list of per-frame label maps.

        Returns:
            tuple: (mappings per view, relabeled sequences per view, total dropped pixels).
        """
        if isinstance(canonical_masks, np.ndarray) and canonical_masks.ndim == 2:
            canonical_masks = [canonical_masks] * len(sequences)
        if len(canonical_masks) != len(sequences):
            raise ShapeMismatchError(f"{len(canonical_masks)} canonical masks for {len(sequences)} views")
        mappings, aligned, dropped = [], [], 0
        for v, frames in enumerate(sequences):
            mapping = self.match_canonical_to_view(canonical_masks[v], frames[0])
            relabeled, lost = self.propagate_ids(mapping, frames)
            logger.info(f"View {v}: mapped {len(mapping.mapping)} labels, {len(mapping.unmatched_view)} unmatched")
            mappings.append(mapping)
            aligned.append(relabeled)
            dropped += lost
        return mappings, aligned, dropped
