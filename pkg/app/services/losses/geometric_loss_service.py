from typing import Dict, Mapping, Optional, Sequence

import numpy as np

from app.helpers.exceptions import LossInputError
from app.helpers.geometry_helpers import (
    normalization_backward,
    normalize_quaternions,
    quaternion_conjugate,
    quaternion_multiply,
    quaternion_multiply_backward,
    quaternion_to_rotation,
    rotation_grad_to_quaternion,
)
from app.logFile import logger
from app.services.scene_service import Camera


class GeometricLossService:
    """
    Shape regularizers, local rigidity, silhouette and temporal-coherence energies.
    """

    @staticmethod
    def iso_size_losses(log_scales: np.ndarray, size_threshold: float) -> Dict:
        """
        Anisotropy and size penalties on the primitive scales.

        The isotropy term is the mean over primitives of the mean |s / mean(s) - 1|; the size term is the mean of
        max(0, max(s) - threshold)^2.

        Returns:
            dict: {"iso", "size", "iso_grad", "size_grad"} with (N, 3) gradients on the log-scales.
        """
        n = log_scales.shape[0]
        if n == 0:
            zero = np.zeros_like(log_scales)
            return {"iso": 0.0, "size": 0.0, "iso_grad": zero, "size_grad": zero.copy()}
        s = np.exp(log_scales)
        m = s.mean(axis=1, keepdims=True)
        r = s / m - 1.0
        sign = np.sign(r)
        iso = float(np.mean(np.abs(r)))
        d_s = (sign / m - np.sum(sign * s, axis=1, keepdims=True) / (3.0 * m ** 2)) / (3.0 * n)
        iso_grad = d_s * s

        top = np.argmax(s, axis=1)
        s_max = s[np.arange(n), top]
        hinge = np.maximum(0.0, s_max - size_threshold)
        size = float(np.mean(hinge ** 2))
        size_grad = np.zeros_like(log_scales)
        size_grad[np.arange(n), top] = 2.0 * hinge * s_max / n
        return {"iso": iso, "size": size, "iso_grad": iso_grad, "size_grad": size_grad}

    @staticmethod
    def influence_radius(positions: np.ndarray, neighbors: np.ndarray) -> float:
        """Mean distance from each primitive to its k nearest neighbours."""
        if positions.shape[0] == 0:
            return 1.0
        d = np.linalg.norm(positions[neighbors] - positions[:, None, :], axis=-1)
        radius = float(np.mean(d))
        return radius if radius > 0 else 1.0

    @staticmethod
    def arap_weights(prev_positions: np.ndarray, neighbors: np.ndarray, radius: float) -> np.ndarray:
        d2 = np.sum((prev_positions[neighbors] - prev_positions[:, None, :]) ** 2, axis=-1)
        return np.exp(-d2 / radius ** 2)

    def arap_loss(self, positions: np.ndarray, rotations: np.ndarray, prev_positions: np.ndarray,
                  prev_rotations: np.ndarray, neighbors: np.ndarray, radius: float,
                  weights: Optional[np.ndarray] = None) -> Dict:
        """
        As-rigid-as-possible energy between frame t-1 and frame t.

        Sum over i and k in N(i) of w_ik || R(q_i,t * q_i,t-1^-1)(p_k,t-1 - p_i,t-1) - (p_k,t - p_i,t) ||^2,
        with w_ik = exp(-||p_i,t-1 - p_k,t-1||^2 / l^2) frozen at t-1.

        Returns:
            dict: {"value", "positions" (N, 3) gradient, "rotations" (N, 4) gradient on raw quaternions}.
        """
        n = positions.shape[0]
        if n == 0:
            return {"value": 0.0, "positions": np.zeros_like(positions), "rotations": np.zeros_like(rotations)}
        if weights is None:
            weights = self.arap_weights(prev_positions, neighbors, radius)
        q_t = normalize_quaternions(rotations)
        q_prev_inv = quaternion_conjugate(normalize_quaternions(prev_rotations))
        q_rel = quaternion_multiply(q_t, q_prev_inv)
        R_rel = quaternion_to_rotation(q_rel)

        e_prev = prev_positions[neighbors] - prev_positions[:, None, :]
        e_now = positions[neighbors] - positions[:, None, :]
        residual = np.einsum("nij,nkj->nki", R_rel, e_prev) - e_now
        value = float(np.sum(weights[..., None] * residual ** 2))

        g = 2.0 * weights[..., None] * residual
        d_positions = np.zeros_like(positions)
        d_positions += np.sum(g, axis=1)
        np.add.at(d_positions, neighbors.ravel(), -g.reshape(-1, 3))
        d_R = np.einsum("nki,nkj->nij", g, e_prev)
        d_rel = rotation_grad_to_quaternion(q_rel, d_R)
        d_unit, _ = quaternion_multiply_backward(q_t, q_prev_inv, d_rel)
        d_rotations = normalization_backward(rotations, d_unit)
        return {"value": value, "positions": d_positions, "rotations": d_rotations}

    @staticmethod
    def _bilinear_with_grad(field: np.ndarray, uv: np.ndarray):
        height, width = field.shape
        x = np.clip(uv[:, 0], 0.0, width - 1)
        y = np.clip(uv[:, 1], 0.0, height - 1)
        inside_x = (uv[:, 0] >= 0) & (uv[:, 0] <= width - 1)
        inside_y = (uv[:, 1] >= 0) & (uv[:, 1] <= height - 1)
        x0 = np.minimum(np.floor(x).astype(np.int64), max(width - 2, 0))
        y0 = np.minimum(np.floor(y).astype(np.int64), max(height - 2, 0))
        x1 = np.minimum(x0 + 1, width - 1)
        y1 = np.minimum(y0 + 1, height - 1)
        fx, fy = x - x0, y - y0
        f00, f01 = field[y0, x0], field[y0, x1]
        f10, f11 = field[y1, x0], field[y1, x1]
        value = (f00 * (1 - fx) + f01 * fx) * (1 - fy) + (f10 * (1 - fx) + f11 * fx) * fy
        d_x = ((f01 - f00) * (1 - fy) + (f11 - f10) * fy) * inside_x
        d_y = ((f10 - f00) * (1 - fx) + (f11 - f01) * fx) * inside_y
        return value, np.stack([d_x, d_y], axis=-1)

    def sdf_loss(self, positions: np.ndarray, labels: np.ndarray,
                 sdfs: Sequence[Mapping[int, np.ndarray]], cameras: Sequence[Camera],
                 skip_missing: bool = False) -> Dict:
        """
        Silhouette energy: sum over views and primitives of max(0, Phi_v,c_i(pi_v(p_i)))^2.

        Args:
            positions (np.ndarray): (N, 3) foreground positions.
            labels (np.ndarray): (N,) classifier argmax per primitive; 0 contributes nothing.
            sdfs (Sequence[Mapping]): Per view, instance id -> (H, W) signed distance field.
            cameras (Sequence[Camera]): Views matching `sdfs`.
            skip_missing (bool): Ignore instances absent from a view instead of raising.

        Returns:
            dict: {"value", "positions" (N, 3) gradient}.

        Raises:
            LossInputError: If a view lacks the SDF of an instance some primitive is assigned to.
        """
        value = 0.0
        grad = np.zeros_like(positions)
        for v, camera in enumerate(cameras):
            cam = positions @ camera.R.T + camera.t
            z = cam[:, 2]
            front = z > 1e-9
            zs = np.where(front, z, 1.0)
            a, b, f = camera.K[0, 0], camera.K[0, 1], camera.K[1, 1]
            uv = np.stack([(a * cam[:, 0] + b * cam[:, 1]) / zs + camera.K[0, 2],
                           f * cam[:, 1] / zs + camera.K[1, 2]], axis=-1)
            for d in np.unique(labels[labels > 0]):
                if int(d) not in sdfs[v]:
                    if skip_missing:
                        continue
                    raise LossInputError(f"missing SDF for instance {int(d)} in view {v}")
                idx = np.flatnonzero((labels == d) & front)
                if idx.size == 0:
                    continue
                phi, d_phi = self._bilinear_with_grad(sdfs[v][int(d)], uv[idx])
                hinge = np.maximum(0.0, phi)
                value += float(np.sum(hinge ** 2))
                d_uv = (2.0 * hinge)[:, None] * d_phi
                x, y, zz = cam[idx, 0], cam[idx, 1], zs[idx]
                d_cam = np.stack([
                    d_uv[:, 0] * a / zz,
                    d_uv[:, 0] * b / zz + d_uv[:, 1] * f / zz,
                    -d_uv[:, 0] * (a * x + b * y) / zz ** 2 - d_uv[:, 1] * f * y / zz ** 2,
                ], axis=-1)
                grad[idx] += d_cam @ camera.R
        return {"value": value, "positions": grad}

    @staticmethod
    def temporal_losses(current: Mapping[str, np.ndarray], reference: Mapping[str, np.ndarray]) -> Dict:
        """
        Sum of squared attribute drift divided by the primitive count.

        Args:
            current (Mapping): attribute name -> (N, ...) array at frame t.
            reference (Mapping): Same names at the reference state.

        Returns:
            dict: {"value", "grads": name -> 2 (a - a_ref) / N}.

        Raises:
            LossInputError: If the primitive counts disagree.
        """
        grads = {}
        value = 0.0
        for name, ref in reference.items():
            cur = current[name]
            if cur.shape != ref.shape:
                raise LossInputError(f"temporal reference for '{name}' has shape {ref.shape}, current {cur.shape}")
            n = max(cur.shape[0], 1)
            diff = cur - ref
            value += float(np.sum(diff ** 2)) / n
            grads[name] = 2.0 * diff / n
        if not reference:
            logger.debug("Temporal loss called without reference attributes")
        return {"value": value, "grads": grads}
