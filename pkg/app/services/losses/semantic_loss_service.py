from typing import Dict, Optional

import numpy as np

from app.helpers.exceptions import LossInputError, ShapeMismatchError
from app.logFile import logger
from app.services.losses.photometric_loss_service import LossResult
from app.services.neural_heads_service import MlpParams, NeuralHeadsService, softmax, softmax_backward
from app.services.scene_service import SceneService

KL_CLAMP = 1e-8


def kl_divergence(p: np.ndarray, q: np.ndarray) -> np.ndarray:
    """Row-wise KL(p || q) in nats with both distributions clamped to [1e-8, 1]."""
    pc = np.clip(p, KL_CLAMP, 1.0)
    qc = np.clip(q, KL_CLAMP, 1.0)
    return np.sum(pc * (np.log(pc) - np.log(qc)), axis=-1)


class SemanticLossService:
    """
    Instance-identity, embedding and 3D-consistency energies.
    """

    def __init__(self, heads: Optional[NeuralHeadsService] = None, scene: Optional[SceneService] = None):
        self.heads = heads or NeuralHeadsService()
        self.scene = scene or SceneService()

    def id_loss(self, probs: np.ndarray, labels: np.ndarray, valid: Optional[np.ndarray] = None) -> LossResult:
        """
        Mean cross-entropy between predicted instance distributions and label maps.

        Args:
            probs (np.ndarray): (H, W, D + 1) per-pixel softmax output.
            labels (np.ndarray): (H, W) integer labels in 0..D.
            valid (np.ndarray | None): (H, W) pixels that take part; all pixels by default.

        Returns:
            LossResult: Value and (H, W, D + 1) gradient on the logits, (P - y) / count.

        Raises:
            LossInputError: If a label exceeds D or the rows of `probs` do not sum to 1.
        """
        n_classes = probs.shape[-1]
        labels = np.asarray(labels, dtype=np.int64)
        if labels.shape != probs.shape[:-1]:
            raise ShapeMismatchError(f"labels {labels.shape} do not match predictions {probs.shape[:-1]}")
        if labels.size and (labels.max() >= n_classes or labels.min() < 0):
            raise LossInputError(f"label {int(labels.max())} is outside 0..{n_classes - 1}")
        if not np.allclose(np.sum(probs, axis=-1), 1.0, atol=1e-5):
            raise LossInputError("instance probabilities do not sum to 1")
        select = np.ones(labels.shape, dtype=bool) if valid is None else np.asarray(valid, dtype=bool)
        count = int(np.count_nonzero(select))
        if count == 0:
            logger.warning("Identity loss has no valid pixels; returning zero")
            return LossResult(0.0, np.zeros_like(probs))
        onehot = np.eye(n_classes)[labels]
        picked = np.take_along_axis(probs, labels[..., None], axis=-1)[..., 0]
        value = float(-np.sum(np.log(np.clip(picked[select], 1e-12, 1.0))) / count)
        grad = (probs - onehot) * select[..., None] / count
        return LossResult(value, grad)

    def emb_loss(self, predicted: np.ndarray, target: np.ndarray, valid: np.ndarray) -> LossResult:
        """
        Mean absolute error over valid pixels and embedding components.

        Args:
            predicted (np.ndarray): (H, W, C) decoded embeddings.
            target (np.ndarray): (H, W, C) supervision.
            valid (np.ndarray): (H, W) pixels whose instance label is at least 1.

        Returns:
            LossResult: Value and (H, W, C) gradient sign(diff) / count on valid pixels.
        """
        if predicted.shape != target.shape:
            raise ShapeMismatchError(f"predicted {predicted.shape} and target {target.shape} embeddings differ")
        select = np.asarray(valid, dtype=bool)
        count = int(np.count_nonzero(select)) * predicted.shape[-1]
        if count == 0:
            return LossResult(0.0, np.zeros_like(predicted))
        diff = (predicted - target) * select[..., None]
        return LossResult(float(np.sum(np.abs(diff)) / count), np.sign(diff) / count)

    def kl3d_from_probs(self, probs: np.ndarray, sample: np.ndarray,
                        neighbors: np.ndarray) -> LossResult:
        """
        Mean neighbour KL divergence for a fixed sample and neighbourhood.

        Args:
            probs (np.ndarray): (N, D + 1) per-primitive distributions.
            sample (np.ndarray): (S,) sampled primitive indices.
            neighbors (np.ndarray): (N, k) neighbour indices of every primitive.

        Returns:
            LossResult: Value and (N, D + 1) gradient on `probs`.
        """
        k = neighbors.shape[1]
        p_i = probs[sample][:, None, :]
        p_j = probs[neighbors[sample]]
        pc_i = np.clip(p_i, KL_CLAMP, 1.0)
        pc_j = np.clip(p_j, KL_CLAMP, 1.0)
        norm = sample.shape[0] * k
        value = float(np.sum(pc_i * (np.log(pc_i) - np.log(pc_j))) / norm)
        live_i = (p_i > KL_CLAMP) & (p_i < 1.0)
        live_j = (p_j > KL_CLAMP) & (p_j < 1.0)
        d_i = (np.log(pc_i) - np.log(pc_j) + 1.0) * live_i / norm
        d_j = -(pc_i / pc_j) * live_j / norm
        grad = np.zeros_like(probs)
        np.add.at(grad, sample, d_i.sum(axis=1))
        np.add.at(grad, neighbors[sample].ravel(), d_j.reshape(-1, probs.shape[1]))
        return LossResult(value, grad)

    def kl3d_loss(self, features: np.ndarray, positions: np.ndarray, classifier: MlpParams, sample_count: int,
                  k: int, rng: np.random.Generator, neighbors: Optional[np.ndarray] = None,
                  sample: Optional[np.ndarray] = None) -> Dict:
        """
        3D semantic consistency between sampled foreground primitives and their nearest neighbours.

        Args:
            features (np.ndarray): (N, F) foreground semantic features.
            positions (np.ndarray): (N, 3) foreground positions.
            classifier (MlpParams): Shared instance classifier.
            sample_count (int): |S|; clamped to N.
            k (int): Neighbours per sample.
            rng (np.random.Generator): Draws the sample.
            neighbors (np.ndarray | None): Precomputed (N, k) neighbours.
            sample (np.ndarray | None): Fixed sample, mainly for testing.

        Returns:
            dict: {"value", "features" (N, F) gradient, "classifier" parameter gradients}.

        Raises:
            LossInputError: If there are fewer than k + 1 primitives.
        """
        n = features.shape[0]
        if n < k + 1:
            raise LossInputError(f"3D consistency needs at least {k + 1} foreground primitives, got {n}")
        if neighbors is None:
            neighbors = self.scene.knn_neighbors(positions, k)
        if sample is None:
            sample = np.sort(rng.choice(n, size=min(sample_count, n), replace=False))
        logits, cache = self.heads.mlp_forward(classifier, features)
        probs = softmax(logits)
        result = self.kl3d_from_probs(probs, sample, neighbors)
        d_logits = softmax_backward(probs, result.grad)
        param_grads, d_features = self.heads.mlp_backward(classifier, cache, d_logits)
        return {"value": result.value, "features": d_features, "classifier": param_grads}
