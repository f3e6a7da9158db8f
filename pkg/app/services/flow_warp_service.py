from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np
from joblib import Parallel, delayed

from app.helpers.config_helpers import WarpConfig
from app.logFile import logger
from app.services.rasterizer_service import RenderTarget
from app.services.scene_service import Camera, GaussianSet


@dataclass
class Triangulation:
    """Result of a multi-view DLT solve; `point` is None when the system is degenerate."""

    point: Optional[np.ndarray]
    residual: float
    degenerate: bool


@dataclass
class WarpReport:
    positions: np.ndarray
    warped: int = 0
    fallback_degenerate: int = 0
    fallback_residual: int = 0
    fallback_views: int = 0
    views_used: List[int] = field(default_factory=list)

    @property
    def fallbacks(self) -> int:
        return self.fallback_degenerate + self.fallback_residual + self.fallback_views


class FlowWarpService:
    """
    Explicit warping of foreground primitives between consecutive frames.

    Each visible primitive is projected into the previous frame's views, displaced by
    the optical flow sampled at its projected mean, and re-triangulated from the
    displaced observations.
    """

    def __init__(self, config: Optional[WarpConfig] = None, threads: int = 1):
        self.config = config or WarpConfig()
        self.threads = max(1, int(threads))

    @staticmethod
    def sample_flow_batch(flow: np.ndarray, uv: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        """
        Bilinear lookup of a displacement field at sub-pixel locations.

        Args:
            flow (np.ndarray): (H, W, 2) field, pixel centres at integer coordinates.
            uv (np.ndarray): (N, 2) query points as (x, y).

        Returns:
            tuple: ((N, 2) displacements, (N,) flag set where the point had to be clamped into the image).
        """
        height, width = flow.shape[:2]
        uv = np.asarray(uv, dtype=np.float64).reshape(-1, 2)
        x = np.clip(uv[:, 0], 0.0, width - 1)
        y = np.clip(uv[:, 1], 0.0, height - 1)
        clamped = (x != uv[:, 0]) | (y != uv[:, 1])
        x0 = np.minimum(np.floor(x).astype(np.int64), max(width - 2, 0))
        y0 = np.minimum(np.floor(y).astype(np.int64), max(height - 2, 0))
        x1 = np.minimum(x0 + 1, width - 1)
        y1 = np.minimum(y0 + 1, height - 1)
        fx = (x - x0)[:, None]
        fy = (y - y0)[:, None]
        top = flow[y0, x0] * (1.0 - fx) + flow[y0, x1] * fx
        bottom = flow[y1, x0] * (1.0 - fx) + flow[y1, x1] * fx
        return top * (1.0 - fy) + bottom * fy, clamped

    def sample_flow(self, flow: np.ndarray, uv) -> Tuple[np.ndarray, bool]:
        values, clamped = self.sample_flow_batch(flow, np.asarray(uv, dtype=np.float64)[None, :])
        return values[0], bool(clamped[0])

    @staticmethod
    def degenerate_spectrum(s: np.ndarray, tol: float) -> bool:
        """
        Whether the singular values of the stacked system leave the solution undetermined.

        Degenerate when the two smallest values differ by less than `tol` relative to the
        second smallest, or when that value vanishes against the largest (rank below 3,
        coincident rays).
        """
        if s.shape[0] < 4:
            return True
        if s[-2] <= tol * s[0]:
            return True
        return bool(s[-2] - s[-1] < tol * s[-2])

    def triangulate(self, observations: Sequence[Tuple[Camera, np.ndarray]]) -> Triangulation:
        """
        Linear multi-view triangulation.

        Two rows per view, x'(P3 X) - (P1 X) and y'(P3 X) - (P2 X), are stacked into a
        2V x 4 system whose smallest right singular vector is the homogeneous solution.

        Args:
            observations (Sequence): (camera, (x', y')) pairs.

        Returns:
            Triangulation: Euclidean point and RMS reprojection residual in pixels, or a
                degenerate result for fewer than two views, near-parallel rays or a point at infinity.
        """
        if len(observations) < 2:
            return Triangulation(point=None, residual=np.inf, degenerate=True)
        rows = []
        for camera, uv in observations:
            P = camera.projection
            rows.append(uv[0] * P[2] - P[0])
            rows.append(uv[1] * P[2] - P[1])
        A = np.asarray(rows)
        _, s, vt = np.linalg.svd(A)
        if self.degenerate_spectrum(s, self.config.degenerate_rel_tol):
            return Triangulation(point=None, residual=np.inf, degenerate=True)
        X = vt[-1]
        if abs(X[3]) < 1e-12 * np.linalg.norm(X):
            return Triangulation(point=None, residual=np.inf, degenerate=True)
        point = X[:3] / X[3]
        errors = []
        for camera, uv in observations:
            projected, _ = camera.project(point[None, :])
            errors.append(np.sum((projected[0] - np.asarray(uv)) ** 2))
        return Triangulation(point=point, residual=float(np.sqrt(np.mean(errors))), degenerate=False)

    def warp_foreground(self, fg: GaussianSet, cameras: Sequence[Camera], flows: Sequence[np.ndarray],
                        prev_targets: Sequence[RenderTarget], fg_offset: int = 0) -> WarpReport:
        """
        Initialize frame-t positions of the foreground from frame t-1.

        Args:
            fg (GaussianSet): Foreground primitives at t-1.
            cameras (Sequence[Camera]): All views.
            flows (Sequence[np.ndarray]): Per view, (H, W, 2) flow from t-1 to t.
            prev_targets (Sequence[RenderTarget]): Frame t-1 renders of the full scene, for visibility.
            fg_offset (int): Index of the first foreground primitive inside those renders.

        Returns:
            WarpReport: New positions (N, 3) plus per-cause fallback counts. Every other attribute
                is left to the caller, unchanged.
        """
        n = len(fg)
        V = len(cameras)
        uv_new = np.full((V, n, 2), np.nan)
        usable = np.zeros((V, n), dtype=bool)
        clamped_total = 0
        for v, camera in enumerate(cameras):
            if n == 0:
                break
            uv, depth = camera.project(fg.positions)
            weights = prev_targets[v].weight_at_projection()[fg_offset:fg_offset + n]
            inside = ((depth > 0) & (uv[:, 0] >= 0) & (uv[:, 0] <= camera.width - 1)
                      & (uv[:, 1] >= 0) & (uv[:, 1] <= camera.height - 1))
            visible = inside & (weights > self.config.visibility_threshold)
            displacement, clamped = self.sample_flow_batch(flows[v], uv)
            clamped_total += int(np.count_nonzero(clamped & visible))
            finite = np.all(np.isfinite(displacement), axis=1)
            usable[v] = visible & finite
            uv_new[v] = uv + displacement
        if clamped_total:
            logger.warning(f"{clamped_total} flow samples were clamped into the image")

        chunks = np.array_split(np.arange(n), max(1, min(self.threads * 4, n)))
        jobs = (delayed(self._warp_chunk)(chunk, fg.positions, cameras, uv_new, usable) for chunk in chunks)
        if self.threads == 1 or len(chunks) < 2:
            results = [fn(*args, **kwargs) for fn, args, kwargs in jobs]
        else:
            results = Parallel(n_jobs=self.threads, prefer="threads")(jobs)

        report = WarpReport(positions=fg.positions.copy(),
                            views_used=[int(c) for c in np.count_nonzero(usable, axis=1)])
        for chunk, points, causes in results:
            report.positions[chunk] = points
            report.warped += int(np.count_nonzero(causes == 0))
            report.fallback_views += int(np.count_nonzero(causes == 1))
            report.fallback_degenerate += int(np.count_nonzero(causes == 2))
            report.fallback_residual += int(np.count_nonzero(causes == 3))
        logger.info(f"Warped {report.warped}/{n} foreground primitives "
                    f"(fallbacks: {report.fallback_views} views, {report.fallback_degenerate} degenerate, "
                    f"{report.fallback_residual} residual)")
        return report

    def _warp_chunk(self, chunk, positions, cameras, uv_new, usable):
        points = positions[chunk].copy()
        causes = np.zeros(chunk.shape[0], dtype=np.int64)
        for row, i in enumerate(chunk):
            views = np.flatnonzero(usable[:, i])
            if views.size < 2:
                causes[row] = 1
                continue
            result = self.triangulate([(cameras[v], uv_new[v, i]) for v in views])
            if result.degenerate:
                causes[row] = 2
            elif result.residual > self.config.residual_gate_px:
                causes[row] = 3
            else:
                points[row] = result.point
        return chunk, points, causes
