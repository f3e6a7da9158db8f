from dataclasses import dataclass, field
from typing import Dict, Mapping, Optional

import numpy as np

from app.helpers.config_helpers import AdamConfig, LearningRates
from app.helpers.geometry_helpers import normalize_quaternions
from app.services.scene_service import GaussianSet


@dataclass
class AdamState:
    """First and second moments per named parameter plus the shared step counter."""

    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0

    def ensure(self, name: str, like: np.ndarray) -> None:
        if name not in self.m or self.m[name].shape != like.shape:
            self.m[name] = np.zeros_like(like)
            self.v[name] = np.zeros_like(like)

    def remap(self, prefix: str, keep: np.ndarray, n_new: int) -> None:
        """Keep the moments of surviving rows and give appended rows zero moments."""
        for name in list(self.m):
            if not name.startswith(prefix):
                continue
            for table in (self.m, self.v):
                kept = table[name][keep]
                table[name] = np.concatenate([kept, np.zeros((n_new,) + kept.shape[1:])], axis=0)


class OptimizerService:
    """Adam updates over named parameter arrays with a per-attribute learning-rate table."""

    def __init__(self, config: Optional[AdamConfig] = None):
        self.config = config or AdamConfig()

    def adam_step(self, params: Mapping[str, np.ndarray], grads: Mapping[str, np.ndarray], state: AdamState,
                  lr: Mapping[str, float]) -> Dict[str, np.ndarray]:
        """
        One Adam step, in place.

        Parameters without a gradient entry are left untouched. Arrays whose name ends in
        "rotations" are renormalized to unit quaternions after the update.

        Args:
            params (Mapping): name -> parameter array (updated in place).
            grads (Mapping): name -> gradient of the same shape.
            state (AdamState): Moments and step counter (updated).
            lr (Mapping): name -> learning rate.

        Returns:
            dict: The updated parameter arrays.
        """
        cfg = self.config
        state.step += 1
        bias1 = 1.0 - cfg.beta1 ** state.step
        bias2 = 1.0 - cfg.beta2 ** state.step
        for name, grad in grads.items():
            if name not in params:
                continue
            value = params[name]
            state.ensure(name, value)
            state.m[name] = cfg.beta1 * state.m[name] + (1.0 - cfg.beta1) * grad
            state.v[name] = cfg.beta2 * state.v[name] + (1.0 - cfg.beta2) * grad * grad
            m_hat = state.m[name] / bias1
            v_hat = state.v[name] / bias2
            value -= lr.get(name, 0.0) * m_hat / (np.sqrt(v_hat) + cfg.eps)
            if name.endswith("rotations") and value.size:
                value[...] = normalize_quaternions(value)
        return dict(params)

    @staticmethod
    def position_lr(rates: LearningRates, iteration: int, total: int, spatial_scale: float = 1.0) -> float:
        """Exponential decay from the initial position rate to `position_final_factor` of it over `total` steps."""
        progress = 0.0 if total <= 1 else min(max(iteration / (total - 1), 0.0), 1.0)
        return rates.position * spatial_scale * rates.position_final_factor ** progress

    @staticmethod
    def gaussian_lr(rates: LearningRates, prefix: str, position_lr: float) -> Dict[str, float]:
        return {
            f"{prefix}positions": position_lr,
            f"{prefix}rotations": rates.rotation,
            f"{prefix}log_scales": rates.scale,
            f"{prefix}opacity_logits": rates.opacity,
            f"{prefix}sh": rates.sh,
            f"{prefix}features": rates.feature,
        }

    @staticmethod
    def gaussian_params(primitives: GaussianSet, prefix: str) -> Dict[str, np.ndarray]:
        return {f"{prefix}{name}": value for name, value in primitives.arrays().items()}
