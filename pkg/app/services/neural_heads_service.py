from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import orjson
from sklearn.decomposition import PCA

from app.helpers.config_helpers import HeadConfig
from app.helpers.exceptions import HeadError
from app.logFile import logger

LINEAR = "linear"
LEAKY_RELU = "leaky_relu"


@dataclass
class MlpParams:
    """
    Weights of a small fully-connected network.

    Attributes:
        weights (list): (in, out) matrices, one per layer.
        biases (list): (out,) vectors, one per layer.
        activations (list): Activation tag per layer ("leaky_relu" or "linear").
        leaky_slope (float): Negative slope of the leaky rectifier.
        version (int): Bumped on every in-place update; caches remember it.
    """

    weights: List[np.ndarray]
    biases: List[np.ndarray]
    activations: List[str]
    leaky_slope: float = 0.01
    version: int = 0

    @property
    def input_dim(self) -> int:
        return int(self.weights[0].shape[0])

    @property
    def output_dim(self) -> int:
        return int(self.weights[-1].shape[1])

    def arrays(self) -> Dict[str, np.ndarray]:
        out = {}
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            out[f"w{i}"] = w
            out[f"b{i}"] = b
        return out

    def touch(self) -> None:
        self.version += 1

    def copy(self) -> "MlpParams":
        return MlpParams([w.copy() for w in self.weights], [b.copy() for b in self.biases],
                         list(self.activations), self.leaky_slope, self.version)

    def to_bytes(self) -> bytes:
        return orjson.dumps({"weights": self.weights, "biases": self.biases, "activations": self.activations,
                             "leaky_slope": self.leaky_slope}, option=orjson.OPT_SERIALIZE_NUMPY)

    @classmethod
    def from_bytes(cls, data: bytes) -> "MlpParams":
        raw = orjson.loads(data)
        return cls(weights=[np.asarray(w, dtype=np.float64).reshape(len(w), -1) for w in raw["weights"]],
                   biases=[np.asarray(b, dtype=np.float64) for b in raw["biases"]],
                   activations=list(raw["activations"]), leaky_slope=float(raw["leaky_slope"]))


@dataclass
class MlpCache:
    """Activations retained by a forward pass for the matching backward pass."""

    params_id: int
    version: int
    inputs: List[np.ndarray]
    pre_activations: List[np.ndarray]


@dataclass
class LinearAutoencoder:
    """x -> encoder (code) -> decoder -> x, both maps affine."""

    enc_w: np.ndarray
    enc_b: np.ndarray
    dec_w: np.ndarray
    dec_b: np.ndarray

    @property
    def raw_dim(self) -> int:
        return int(self.enc_w.shape[0])

    @property
    def code_dim(self) -> int:
        return int(self.enc_w.shape[1])

    def encode(self, x: np.ndarray) -> np.ndarray:
        return x @ self.enc_w + self.enc_b

    def decode(self, code: np.ndarray) -> np.ndarray:
        if code.shape[-1] != self.code_dim:
            raise HeadError(f"autoencoder expects {self.code_dim}-dim codes, got {code.shape[-1]}")
        return code @ self.dec_w + self.dec_b

    def arrays(self) -> Dict[str, np.ndarray]:
        return {"enc_w": self.enc_w, "enc_b": self.enc_b, "dec_w": self.dec_w, "dec_b": self.dec_b}

    def to_bytes(self) -> bytes:
        return orjson.dumps(self.arrays(), option=orjson.OPT_SERIALIZE_NUMPY)

    @classmethod
    def from_bytes(cls, data: bytes) -> "LinearAutoencoder":
        raw = orjson.loads(data)
        return cls(**{k: np.asarray(v, dtype=np.float64) for k, v in raw.items()})


@dataclass
class AutoencoderFit:
    autoencoder: LinearAutoencoder
    reconstruction_error: float
    cosine: np.ndarray


@dataclass
class SemanticHeads:
    """
    The decoders trained with the scene.

    Attributes:
        classifier (MlpParams): f or alpha-normalized F -> (D + 1) instance logits.
        semantic (MlpParams): alpha-normalized F -> compressed embedding.
        autoencoder (LinearAutoencoder | None): Raw embedding <-> compressed code.
    """

    classifier: MlpParams
    semantic: MlpParams
    autoencoder: Optional[LinearAutoencoder] = None

    @property
    def n_classes(self) -> int:
        return self.classifier.output_dim

    def to_sections(self) -> Dict[str, bytes]:
        sections = {"head.classifier": self.classifier.to_bytes(), "head.semantic": self.semantic.to_bytes()}
        if self.autoencoder is not None:
            sections["autoencoder"] = self.autoencoder.to_bytes()
        return sections

    @classmethod
    def from_sections(cls, sections: Dict[str, bytes]) -> Optional["SemanticHeads"]:
        if "head.classifier" not in sections or "head.semantic" not in sections:
            return None
        autoencoder = LinearAutoencoder.from_bytes(sections["autoencoder"]) if "autoencoder" in sections else None
        return cls(classifier=MlpParams.from_bytes(sections["head.classifier"]),
                   semantic=MlpParams.from_bytes(sections["head.semantic"]), autoencoder=autoencoder)


def softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - np.max(logits, axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / np.sum(e, axis=-1, keepdims=True)


def softmax_backward(probs: np.ndarray, d_probs: np.ndarray) -> np.ndarray:
    return probs * (d_probs - np.sum(probs * d_probs, axis=-1, keepdims=True))


class NeuralHeadsService:
    """
    Tiny decoders with hand-written forward and backward passes.

    The same classifier parameters decode per-primitive features and
    alpha-normalized feature maps, so both paths share one gradient buffer.
    """

    def __init__(self, config: Optional[HeadConfig] = None):
        self.config = config or HeadConfig()

    def init_mlp(self, input_dim: int, output_dim: int, rng: np.random.Generator,
                 hidden: Optional[Sequence[int]] = None) -> MlpParams:
        """He-style initialization of an `input -> hidden... -> output` network."""
        dims = [input_dim] + list(self.config.hidden if hidden is None else hidden) + [output_dim]
        weights, biases, acts = [], [], []
        for i in range(len(dims) - 1):
            scale = np.sqrt(2.0 / dims[i])
            weights.append(rng.normal(0.0, scale, size=(dims[i], dims[i + 1])))
            biases.append(np.zeros(dims[i + 1]))
            acts.append(LINEAR if i == len(dims) - 2 else LEAKY_RELU)
        return MlpParams(weights, biases, acts, self.config.leaky_slope)

    def init_heads(self, feature_dim: int, n_classes: int, rng: np.random.Generator) -> SemanticHeads:
        return SemanticHeads(classifier=self.init_mlp(feature_dim, n_classes, rng),
                             semantic=self.init_mlp(feature_dim, self.config.code_dim, rng))

    def mlp_forward(self, params: MlpParams, x: np.ndarray) -> Tuple[np.ndarray, MlpCache]:
        """
        Evaluate the network on a batch of rows.

        Args:
            params (MlpParams): Network weights.
            x (np.ndarray): (B, in) inputs.

        Returns:
            tuple: ((B, out) outputs, cache for `mlp_backward`).

        Raises:
            HeadError: If the input width does not match the first layer.
        """
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 2 or x.shape[1] != params.input_dim:
            raise HeadError(f"head expects inputs of width {params.input_dim}, got shape {x.shape}")
        inputs, pre = [], []
        h = x
        for w, b, act in zip(params.weights, params.biases, params.activations):
            inputs.append(h)
            z = h @ w + b
            pre.append(z)
            h = np.where(z > 0, z, params.leaky_slope * z) if act == LEAKY_RELU else z
        return h, MlpCache(params_id=id(params), version=params.version, inputs=inputs, pre_activations=pre)

    def mlp_backward(self, params: MlpParams, cache: MlpCache,
                     upstream: np.ndarray) -> Tuple[Dict[str, np.ndarray], np.ndarray]:
        """
        Backpropagate an output gradient.

        Args:
            params (MlpParams): The weights used in the forward pass.
            cache (MlpCache): Cache returned by that forward pass.
            upstream (np.ndarray): (B, out) gradient on the outputs.

        Returns:
            tuple: ({"w0", "b0", ...} parameter gradients, (B, in) input gradient).

        Raises:
            HeadError: If the cache belongs to other parameters or to an older version of them.
        """
        if cache.params_id != id(params) or cache.version != params.version:
            raise HeadError("stale head cache: parameters changed since the forward pass")
        grads = {}
        g = np.asarray(upstream, dtype=np.float64)
        for i in reversed(range(len(params.weights))):
            if params.activations[i] == LEAKY_RELU:
                g = g * np.where(cache.pre_activations[i] > 0, 1.0, params.leaky_slope)
            grads[f"w{i}"] = cache.inputs[i].T @ g
            grads[f"b{i}"] = np.sum(g, axis=0)
            g = g @ params.weights[i].T
        return grads, g

    def classify(self, params: MlpParams, features: np.ndarray) -> np.ndarray:
        """Softmax class probabilities for each row of `features`."""
        logits, _ = self.mlp_forward(params, features)
        return softmax(logits)

    @staticmethod
    def alpha_normalize(feature: np.ndarray, alpha: np.ndarray, eps: float = 1e-3) -> Tuple[np.ndarray, np.ndarray]:
        """
        F / alpha where alpha > eps, zero elsewhere.

        Returns:
            tuple: (normalized (H, W, F) map, (H, W) boolean coverage mask).
        """
        covered = alpha > eps
        safe = np.where(covered, alpha, 1.0)
        return np.where(covered[..., None], feature / safe[..., None], 0.0), covered

    @staticmethod
    def alpha_normalize_backward(d_normalized: np.ndarray, feature: np.ndarray, alpha: np.ndarray,
                                 covered: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        """
        Returns:
            tuple: (gradient on F, gradient on alpha).
        """
        safe = np.where(covered, alpha, 1.0)
        d_feature = np.where(covered[..., None], d_normalized / safe[..., None], 0.0)
        d_alpha = np.where(covered, -np.sum(d_normalized * feature, axis=-1) / safe ** 2, 0.0)
        return d_feature, d_alpha

    def decode_pixels(self, params: MlpParams, feature: np.ndarray, alpha: np.ndarray,
                      eps: float = 1e-3) -> Tuple[np.ndarray, MlpCache, np.ndarray, np.ndarray]:
        """
        Apply a head to every pixel of an alpha-normalized feature map.

        Returns:
            tuple: ((H, W, out) outputs, cache, normalized map, coverage mask).
        """
        normalized, covered = self.alpha_normalize(feature, alpha, eps)
        height, width, channels = normalized.shape
        out, cache = self.mlp_forward(params, normalized.reshape(-1, channels))
        return out.reshape(height, width, -1), cache, normalized, covered

    def autoencoder_fit(self, raw: np.ndarray, code_dim: int = 6, steps: Optional[int] = None,
                        lr: float = 1e-3, seed: int = 0) -> AutoencoderFit:
        """
        Fit a linear autoencoder to raw embeddings.

        The encoder/decoder pair is warm-started from PCA (the optimum of the linear problem)
        and refined by plain gradient descent on the mean squared reconstruction error.

        Args:
            raw (np.ndarray): (N, R) embeddings.
            code_dim (int): Width of the code.
            steps (int | None): Gradient steps; defaults to the configured count.
            lr (float): Gradient-descent step size.
            seed (int): Seed of the PCA solver.

        Returns:
            AutoencoderFit: Parameters, final mean squared error and per-vector cosine similarity.

        Raises:
            HeadError: If R < code_dim or N < 2.
        """
        raw = np.asarray(raw, dtype=np.float64)
        n, r = raw.shape
        if r < code_dim:
            raise HeadError(f"raw embedding dimension {r} is smaller than the code dimension {code_dim}")
        if n < 2:
            raise HeadError(f"autoencoder needs at least 2 embeddings, got {n}")
        steps = self.config.autoencoder_steps if steps is None else steps

        mean = raw.mean(axis=0)
        components = min(code_dim, n, r)
        pca = PCA(n_components=components, svd_solver="full", random_state=seed).fit(raw)
        basis = np.zeros((code_dim, r))
        basis[:components] = pca.components_
        model = LinearAutoencoder(enc_w=basis.T.copy(), enc_b=-(mean @ basis.T), dec_w=basis.copy(),
                                  dec_b=mean.copy())

        params = model.arrays()
        for _ in range(steps):
            _, grads = self.reconstruction_loss(model, raw)
            for k, g in grads.items():
                params[k] -= lr * g

        recon = model.decode(model.encode(raw))
        error = float(np.mean((recon - raw) ** 2))
        norms = np.linalg.norm(raw, axis=1) * np.linalg.norm(recon, axis=1)
        cosine = np.sum(raw * recon, axis=1) / np.maximum(norms, 1e-12)
        logger.info(f"Autoencoder fitted: {n} embeddings, {r} -> {code_dim}, mse {error:.3e}, "
                    f"min cosine {cosine.min():.4f}")
        return AutoencoderFit(autoencoder=model, reconstruction_error=error, cosine=cosine)

    @staticmethod
    def reconstruction_loss(model: LinearAutoencoder, raw: np.ndarray) -> Tuple[float, Dict[str, np.ndarray]]:
        """
        Mean squared reconstruction error and its parameter gradients.

        Returns:
            tuple: (value, {"enc_w", "enc_b", "dec_w", "dec_b"} gradients).
        """
        code = model.encode(raw)
        recon = model.decode(code)
        diff = recon - raw
        d_recon = 2.0 * diff / raw.size
        d_code = d_recon @ model.dec_w.T
        grads = {"dec_w": code.T @ d_recon, "dec_b": d_recon.sum(axis=0),
                 "enc_w": raw.T @ d_code, "enc_b": d_code.sum(axis=0)}
        return float(np.mean(diff ** 2)), grads
