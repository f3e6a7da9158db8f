from typing import Dict, Optional

import numpy as np

from app.helpers.exceptions import MaskError, ShapeMismatchError
from app.logFile import logger


class MaskGeometryService:
    """
    Signed distance fields of instance silhouettes and mask overlap measures.

    Distances are exact Euclidean distances between pixel centres, computed with
    the separable lower-envelope-of-parabolas transform (rows first, then columns).
    """

    @staticmethod
    def _envelope_1d(f: np.ndarray) -> np.ndarray:
        """Squared distance transform of one sampled function; `inf` marks non-sites."""
        n = f.shape[0]
        d = np.full(n, np.inf)
        sites = np.isfinite(f)
        if not np.any(sites):
            return d
        v = np.zeros(n, dtype=np.int64)
        z = np.zeros(n + 1)
        k = 0
        first = int(np.flatnonzero(sites)[0])
        v[0] = first
        z[0], z[1] = -np.inf, np.inf
        for q in range(first + 1, n):
            if not sites[q]:
                continue
            s = ((f[q] + q * q) - (f[v[k]] + v[k] * v[k])) / (2.0 * (q - v[k]))
            while s <= z[k]:
                k -= 1
                s = ((f[q] + q * q) - (f[v[k]] + v[k] * v[k])) / (2.0 * (q - v[k]))
            k += 1
            v[k] = q
            z[k] = s
            z[k + 1] = np.inf
        k = 0
        for q in range(n):
            while z[k + 1] < q:
                k += 1
            d[q] = (q - v[k]) ** 2 + f[v[k]]
        return d

    def squared_distance_to(self, sites: np.ndarray) -> np.ndarray:
        """
        Squared Euclidean distance from every pixel to the nearest `True` pixel.

        Args:
            sites (np.ndarray): (H, W) boolean map.

        Returns:
            np.ndarray: (H, W) float squared distances (integers); `inf` everywhere when no site exists.
        """
        sites = np.asarray(sites, dtype=bool)
        grid = np.where(sites, 0.0, np.inf)
        rows = np.empty_like(grid)
        for r in range(grid.shape[0]):
            rows[r] = self._envelope_1d(grid[r])
        out = np.empty_like(grid)
        for c in range(grid.shape[1]):
            out[:, c] = self._envelope_1d(rows[:, c])
        return out

    def signed_distance_field(self, mask: np.ndarray, instance_id: Optional[int] = None) -> np.ndarray:
        """
        Signed distance to the silhouette boundary, in pixels.

        Outside pixels hold the distance to the nearest mask pixel (> 0); inside pixels hold
        minus the distance to the nearest non-mask pixel (<= 0). A full-frame mask has no
        boundary and yields the unsigned interior distance, `inf` everywhere.

        Args:
            mask (np.ndarray): (H, W) binary silhouette.
            instance_id (int | None): Used in diagnostics only.

        Returns:
            np.ndarray: (H, W) float64 field.

        Raises:
            MaskError: If the mask is empty.
        """
        mask = np.asarray(mask, dtype=bool)
        if not np.any(mask):
            raise MaskError(f"instance {instance_id} has an empty mask", instance=instance_id)
        if np.all(mask):
            logger.warning(f"Mask of instance {instance_id} covers the full frame; returning the unsigned distance")
            return np.sqrt(self.squared_distance_to(~mask))
        outside = np.sqrt(self.squared_distance_to(mask))
        inside = np.sqrt(self.squared_distance_to(~mask))
        return np.where(mask, -inside, outside)

    def instance_sdfs(self, labels: np.ndarray, n_instances: int) -> Dict[int, np.ndarray]:
        """
        SDF of every instance present in a label map.

        Returns:
            dict: instance id -> (H, W) field; instances absent from the map or covering all of it
            are omitted.
        """
        out = {}
        for d in range(1, n_instances + 1):
            silhouette = labels == d
            if np.all(silhouette):
                logger.warning(f"Instance {d} covers the full frame; no SDF for this view")
                continue
            if np.any(silhouette):
                out[d] = self.signed_distance_field(silhouette, d)
        return out

    @staticmethod
    def mask_iou(a: np.ndarray, b: np.ndarray) -> float:
        """
        Intersection over union of two binary maps; 1 when both are empty.

        Raises:
            ShapeMismatchError: If the resolutions differ.
        """
        a = np.asarray(a, dtype=bool)
        b = np.asarray(b, dtype=bool)
        if a.shape != b.shape:
            raise ShapeMismatchError(f"mask resolutions differ: {a.shape} vs {b.shape}")
        union = np.count_nonzero(a | b)
        if union == 0:
            return 1.0
        return np.count_nonzero(a & b) / union

    @staticmethod
    def label_iou_matrix(a: np.ndarray, b: np.ndarray, n_a: int, n_b: int) -> np.ndarray:
        """
        IoU between every pair of labels of two label maps.

        Returns:
            np.ndarray: (n_a + 1, n_b + 1) matrix indexed by label; row/column 0 is background.
        """
        a = np.asarray(a, dtype=np.int64).ravel()
        b = np.asarray(b, dtype=np.int64).ravel()
        inter = np.bincount(a * (n_b + 1) + b, minlength=(n_a + 1) * (n_b + 1)).reshape(n_a + 1, n_b + 1)
        area_a = inter.sum(axis=1)
        area_b = inter.sum(axis=0)
        union = area_a[:, None] + area_b[None, :] - inter
        with np.errstate(invalid="ignore", divide="ignore"):
            return np.where(union > 0, inter / np.maximum(union, 1), 0.0)
