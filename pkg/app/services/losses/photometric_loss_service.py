from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.ndimage import correlate

from app.helpers.exceptions import ShapeMismatchError
from app.logFile import logger

SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2


@dataclass
class LossResult:
    """An energy value and its gradient with respect to the term's direct input."""

    value: float
    grad: Optional[np.ndarray] = None


def gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    """Normalized 2D Gaussian window."""
    coords = np.arange(size, dtype=np.float64) - size // 2
    g = np.exp(-(coords ** 2) / (2.0 * sigma ** 2))
    g /= g.sum()
    return np.outer(g, g)


class PhotometricLossService:
    """
    L1 + D-SSIM color energy with analytic pixel gradients.

    The SSIM statistics use an 11x11 Gaussian window (sigma 1.5) with zero padding,
    applied per channel with `scipy.ndimage.correlate`.
    """

    def __init__(self, window_size: int = 11, sigma: float = 1.5):
        self.window = gaussian_window(window_size, sigma)[:, :, None]

    def _filter(self, image: np.ndarray) -> np.ndarray:
        return correlate(image, self.window, mode="constant", cval=0.0)

    def _as_hwc(self, image: np.ndarray) -> np.ndarray:
        image = np.asarray(image, dtype=np.float64)
        return image[..., None] if image.ndim == 2 else image

    def ssim_map(self, x: np.ndarray, y: np.ndarray) -> np.ndarray:
        """Per-pixel, per-channel SSIM of `x` against `y`."""
        x, y = self._as_hwc(x), self._as_hwc(y)
        mu_x, mu_y = self._filter(x), self._filter(y)
        e_xx, e_yy, e_xy = self._filter(x * x), self._filter(y * y), self._filter(x * y)
        a1 = 2.0 * mu_x * mu_y + SSIM_C1
        a2 = 2.0 * (e_xy - mu_x * mu_y) + SSIM_C2
        b1 = mu_x ** 2 + mu_y ** 2 + SSIM_C1
        b2 = (e_xx - mu_x ** 2) + (e_yy - mu_y ** 2) + SSIM_C2
        return (a1 * a2) / (b1 * b2)

    def ssim(self, x: np.ndarray, y: np.ndarray, mask: Optional[np.ndarray] = None) -> float:
        """Mean SSIM over the selected pixels and all channels."""
        smap = self.ssim_map(x, y)
        if mask is None:
            return float(np.mean(smap))
        mask = np.asarray(mask, dtype=bool)
        return float(np.mean(smap[mask])) if np.any(mask) else 1.0

    def ssim_with_grad(self, x: np.ndarray, y: np.ndarray, weights: np.ndarray):
        """
        Weighted SSIM sum and its gradient with respect to `x`.

        Args:
            x (np.ndarray): (H, W, C) rendered image.
            y (np.ndarray): (H, W, C) reference image.
            weights (np.ndarray): (H, W, C) weight of each SSIM-map entry.

        Returns:
            tuple: (sum of weights * SSIM map, (H, W, C) gradient).
        """
        mu_x, mu_y = self._filter(x), self._filter(y)
        e_xx, e_yy, e_xy = self._filter(x * x), self._filter(y * y), self._filter(x * y)
        a1 = 2.0 * mu_x * mu_y + SSIM_C1
        a2 = 2.0 * (e_xy - mu_x * mu_y) + SSIM_C2
        b1 = mu_x ** 2 + mu_y ** 2 + SSIM_C1
        b2 = (e_xx - mu_x ** 2) + (e_yy - mu_y ** 2) + SSIM_C2
        denom = b1 * b2
        smap = a1 * a2 / denom
        d_mu = (2.0 * mu_y * a2 - 2.0 * mu_y * a1) / denom - smap * (2.0 * mu_x / b1 - 2.0 * mu_x / b2)
        d_exx = -smap / b2
        d_exy = 2.0 * a1 / denom
        # the window is symmetric, so the adjoint of the zero-padded correlation is itself
        grad = (self._filter(weights * d_mu) + 2.0 * x * self._filter(weights * d_exx)
                + y * self._filter(weights * d_exy))
        return float(np.sum(weights * smap)), grad

    def color_loss(self, rendered: np.ndarray, target: np.ndarray, mask: Optional[np.ndarray] = None,
                   dssim_mix: float = 0.2) -> LossResult:
        """
        (1 - mix) * L1 + mix * (1 - SSIM) / 2 over the selected pixels.

        Args:
            rendered (np.ndarray): (H, W, C) rendered color.
            target (np.ndarray): (H, W, C) ground truth.
            mask (np.ndarray | None): (H, W) selection; loss and gradient are zero elsewhere.
            dssim_mix (float): Weight of the D-SSIM part.

        Returns:
            LossResult: Value and (H, W, C) gradient with respect to `rendered`.

        Raises:
            ShapeMismatchError: If the images differ in shape.
        """
        rendered, target = self._as_hwc(rendered), self._as_hwc(target)
        if rendered.shape != target.shape:
            raise ShapeMismatchError(f"rendered {rendered.shape} and target {target.shape} differ")
        channels = rendered.shape[-1]
        if mask is None:
            select = np.ones(rendered.shape, dtype=bool)
        else:
            mask = np.asarray(mask, dtype=bool)
            if mask.shape != rendered.shape[:2]:
                raise ShapeMismatchError(f"mask {mask.shape} does not match image {rendered.shape[:2]}")
            select = np.repeat(mask[..., None], channels, axis=-1)
        count = int(np.count_nonzero(select))
        if count == 0:
            logger.warning("Color loss has an empty pixel selection; returning zero")
            return LossResult(0.0, np.zeros_like(rendered))

        weights = select / count
        diff = rendered - target
        l1 = float(np.sum(np.abs(diff) * weights))
        grad = (1.0 - dssim_mix) * np.sign(diff) * weights
        value = (1.0 - dssim_mix) * l1
        if dssim_mix > 0:
            # unselected pixels take the target value so SSIM windows see no rendered data there
            composite = np.where(select, rendered, target)
            ssim_mean, ssim_grad = self.ssim_with_grad(composite, target, weights.astype(np.float64))
            value += dssim_mix * (1.0 - ssim_mean) / 2.0
            grad = grad - dssim_mix * np.where(select, ssim_grad, 0.0) / 2.0
        return LossResult(value, grad)
