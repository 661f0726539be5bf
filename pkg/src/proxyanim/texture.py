"""Implicit appearance model: per-vertex feature vectors, sinusoidal feature
encoding, and an MLP decoder with hand-rolled forward and reverse passes.

Encoding layout, frozen: for frequency k = 0..L-1, all d sin(2^k pi f)
channels then all d cos(2^k pi f) channels, so the output has length 2*L*d.
The raw feature vector is not concatenated unless include_input is set.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionMismatch


@dataclass(frozen=True)
class EncodingConfig:
    num_frequencies: int = 10
    include_input: bool = False

    def __post_init__(self):
        if self.num_frequencies < 1:
            raise ValueError("num_frequencies must be >= 1")

    def output_width(self, d: int) -> int:
        w = 2 * self.num_frequencies * d
        if self.include_input:
            w += d
        return w


def positional_encode(f, cfg: EncodingConfig) -> np.ndarray:
    """Encode a feature vector (d,) or batch (N, d) to (..., 2*L*d)."""
    f = np.asarray(f, dtype=float)
    single = f.ndim == 1
    x = np.atleast_2d(f)
    parts = []
    if cfg.include_input:
        parts.append(x)
    for k in range(cfg.num_frequencies):
        arg = (2.0 ** k) * np.pi * x
        parts.append(np.sin(arg))
        parts.append(np.cos(arg))
    out = np.concatenate(parts, axis=1)
    return out[0] if single else out


def encode_jacobian(f, cfg: EncodingConfig) -> np.ndarray:
    """Dense Jacobian d(encoding)/d(f) of shape (output_width, d).

    Only the own-channel entries are nonzero; kept dense for test and
    inspection use. The training path uses encode_backward instead.
    """
    f = np.asarray(f, dtype=float).reshape(-1)
    d = len(f)
    jac = np.zeros((cfg.output_width(d), d))
    row = 0
    if cfg.include_input:
        jac[:d] = np.eye(d)
        row = d
    for k in range(cfg.num_frequencies):
        w = (2.0 ** k) * np.pi
        arg = w * f
        jac[row:row + d][np.arange(d), np.arange(d)] = w * np.cos(arg)
        row += d
        jac[row:row + d][np.arange(d), np.arange(d)] = -w * np.sin(arg)
        row += d
    return jac


def encode_backward(f, grad_encoded, cfg: EncodingConfig) -> np.ndarray:
    """Chain (N, 2*L*d) encoding gradients back to (N, d) feature gradients."""
    f = np.atleast_2d(np.asarray(f, dtype=float))
    g = np.atleast_2d(np.asarray(grad_encoded, dtype=float))
    n, d = f.shape
    grad_f = np.zeros((n, d))
    col = 0
    if cfg.include_input:
        grad_f += g[:, :d]
        col = d
    for k in range(cfg.num_frequencies):
        w = (2.0 ** k) * np.pi
        arg = w * f
        grad_f += g[:, col:col + d] * (w * np.cos(arg))
        col += d
        grad_f += g[:, col:col + d] * (-w * np.sin(arg))
        col += d
    return grad_f


class FeatureField:
    """Optimizable per-vertex texture features, shape (vertex_count, d)."""

    def __init__(self, features: np.ndarray):
        features = np.asarray(features, dtype=float)
        if features.ndim != 2:
            raise ValueError("features must be (vertex_count, d)")
        if not np.all(np.isfinite(features)):
            raise ValueError("non-finite feature values")
        self.features = features

    @property
    def vertex_count(self) -> int:
        return self.features.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    @staticmethod
    def init_random(vertex_count: int, dim: int = 16,
                    rng: np.random.Generator | None = None,
                    init_range: float = 0.01) -> "FeatureField":
        """Uniform init in [-init_range, init_range]; keeps the top encoding
        frequency in a numerically tame regime early in training."""
        rng = rng or np.random.default_rng(0)
        return FeatureField(rng.uniform(-init_range, init_range, size=(vertex_count, dim)))

    def copy(self) -> "FeatureField":
        return FeatureField(self.features.copy())


def _sigmoid(z):
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


class Decoder:
    """Plain MLP: rectifier hidden layers, logistic-squashed 3-channel output."""

    def __init__(self, weights: list[np.ndarray], biases: list[np.ndarray]):
        if len(weights) != len(biases):
            raise ValueError("weights and biases must pair up")
        for i in range(1, len(weights)):
            if weights[i].shape[1] != weights[i - 1].shape[0]:
                raise ValueError("layer dimensions do not chain")
        for w, b in zip(weights, biases):
            if b.shape != (w.shape[0],):
                raise ValueError("bias shape mismatch")
        self.weights = weights
        self.biases = biases

    @property
    def input_width(self) -> int:
        return self.weights[0].shape[1]

    @property
    def output_width(self) -> int:
        return self.weights[-1].shape[0]

    @staticmethod
    def init_random(input_width: int, hidden_width: int = 128, num_layers: int = 8,
                    output_width: int = 3,
                    rng: np.random.Generator | None = None) -> "Decoder":
        """Kaiming-uniform fan-in init; final layer bias zeroed."""
        rng = rng or np.random.default_rng(0)
        dims = [input_width] + [hidden_width] * (num_layers - 1) + [output_width]
        weights, biases = [], []
        for i in range(num_layers):
            fan_in = dims[i]
            bound = np.sqrt(6.0 / fan_in)
            weights.append(rng.uniform(-bound, bound, size=(dims[i + 1], dims[i])))
            bb = 1.0 / np.sqrt(fan_in)
            biases.append(rng.uniform(-bb, bb, size=dims[i + 1]))
        biases[-1] = np.zeros(output_width)
        return Decoder(weights, biases)

    def forward(self, encoded: np.ndarray) -> np.ndarray:
        """Decode a batch (N, input_width) or single vector to colors in (0,1)."""
        x = np.asarray(encoded, dtype=float)
        single = x.ndim == 1
        h = np.atleast_2d(x)
        if h.shape[1] != self.input_width:
            raise DimensionMismatch(
                f"decoder expects width {self.input_width}, got {h.shape[1]}")
        for w, b in zip(self.weights[:-1], self.biases[:-1]):
            h = np.maximum(h @ w.T + b, 0.0)
        out = _sigmoid(h @ self.weights[-1].T + self.biases[-1])
        return out[0] if single else out

    def forward_with_trace(self, encoded: np.ndarray):
        """Forward pass keeping post-activation values for the backward pass."""
        h = np.atleast_2d(np.asarray(encoded, dtype=float))
        if h.shape[1] != self.input_width:
            raise DimensionMismatch(
                f"decoder expects width {self.input_width}, got {h.shape[1]}")
        acts = [h]
        for w, b in zip(self.weights[:-1], self.biases[:-1]):
            h = np.maximum(h @ w.T + b, 0.0)
            acts.append(h)
        out = _sigmoid(h @ self.weights[-1].T + self.biases[-1])
        return out, acts

    def backward(self, encoded: np.ndarray, grad_rgb: np.ndarray):
        """Reverse-mode gradients of the output against parameters and input.

        Returns (grad_weights, grad_biases, grad_encoded); the parameter
        gradients are summed over the batch.
        """
        out, acts = self.forward_with_trace(encoded)
        g = np.atleast_2d(np.asarray(grad_rgb, dtype=float))
        if g.shape != out.shape:
            raise DimensionMismatch("grad_rgb shape does not match decoder output")
        grad_w = [None] * len(self.weights)
        grad_b = [None] * len(self.biases)
        # logistic output layer
        delta = g * out * (1.0 - out)
        grad_w[-1] = delta.T @ acts[-1]
        grad_b[-1] = delta.sum(axis=0)
        upstream = delta @ self.weights[-1]
        for i in range(len(self.weights) - 2, -1, -1):
            delta = upstream * (acts[i + 1] > 0)
            grad_w[i] = delta.T @ acts[i]
            grad_b[i] = delta.sum(axis=0)
            upstream = delta @ self.weights[i]
        grad_encoded = upstream
        if np.asarray(encoded).ndim == 1:
            grad_encoded = grad_encoded[0]
        return grad_w, grad_b, grad_encoded

    def copy(self) -> "Decoder":
        return Decoder([w.copy() for w in self.weights], [b.copy() for b in self.biases])


def decode_color(dec: Decoder, encoded) -> tuple[float, float, float]:
    """Single-vector convenience wrapper around Decoder.forward."""
    rgb = dec.forward(np.asarray(encoded, dtype=float))
    return float(rgb[0]), float(rgb[1]), float(rgb[2])


def decode_backward(dec: Decoder, encoded, grad_rgb):
    return dec.backward(encoded, grad_rgb)


def build_decoder_for(d: int, enc: EncodingConfig | None,
                      rng: np.random.Generator | None = None,
                      hidden_width: int = 128, num_layers: int = 8) -> Decoder:
    """Decoder sized for feature dim d under enc (enc=None means raw features)."""
    width = enc.output_width(d) if enc is not None else d
    return Decoder.init_random(width, hidden_width, num_layers, rng=rng)


def encode_features(features: np.ndarray, enc: EncodingConfig | None) -> np.ndarray:
    """Apply the encoding, or pass features through when encoding is disabled."""
    if enc is None:
        return np.atleast_2d(np.asarray(features, dtype=float))
    return np.atleast_2d(positional_encode(features, enc))


def encode_features_backward(features, grad_encoded, enc: EncodingConfig | None) -> np.ndarray:
    if enc is None:
        return np.atleast_2d(np.asarray(grad_encoded, dtype=float))
    return encode_backward(features, grad_encoded, enc)
