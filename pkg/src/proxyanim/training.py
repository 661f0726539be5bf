"""Fitting the feature field and decoder: reference-view MSE, pluggable prior
gradients under randomly sampled novel views, and a bias-corrected Adam loop.

Total objective per iteration: alpha1 * reference MSE + alpha2 * prior term.
The prior term never produces a scalar loss by itself; providers hand back a
pixel-space gradient raster that is chained through the render backward pass.
"""

from __future__ import annotations

import io
import os
from dataclasses import dataclass, field, replace

import numpy as np

from .alignment import BinaryMask
from .errors import (
    DimensionMismatch,
    EmptyMask,
    ProviderUnavailable,
    ShapeMismatch,
)
from .geometry import PinholeCamera, ProxyMesh, camera_from_spherical
from .raster import render_backward, render_image
from .texture import Decoder, EncodingConfig, FeatureField

NOVEL_VIEW_BACKGROUND = (0.5, 0.5, 0.5)


@dataclass(frozen=True)
class TrainConfig:
    alpha1: float = 1000.0
    alpha2: float = 0.005
    learning_rate: float = 0.01
    iterations: int = 1000
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    elevation_range: tuple[float, float] = (-20.0, 40.0)   # degrees
    azimuth_range: tuple[float, float] = (0.0, 360.0)      # degrees
    radius_range: tuple[float, float] = (0.9, 1.1)         # multiple of ref distance
    seed: int = 0

    def __post_init__(self):
        if self.alpha1 < 0 or self.alpha2 < 0:
            raise ValueError("loss weights must be >= 0")
        if self.iterations < 0:
            raise ValueError("iterations must be >= 0")


def mse_loss(rendered: np.ndarray, reference: np.ndarray,
             mask: BinaryMask | None = None):
    """Masked mean squared error and its gradient w.r.t. the rendered raster."""
    rendered = np.asarray(rendered, dtype=float)
    reference = np.asarray(reference, dtype=float)
    if rendered.shape != reference.shape:
        raise DimensionMismatch(
            f"rendered {rendered.shape} vs reference {reference.shape}")
    if mask is None:
        sel = np.ones(rendered.shape[:2], dtype=bool)
    else:
        if mask.bits.shape != rendered.shape[:2]:
            raise DimensionMismatch("mask does not match image dimensions")
        sel = mask.bits
    count = int(sel.sum()) * rendered.shape[2]
    if count == 0:
        raise EmptyMask("mse_loss mask selects no pixels")
    diff = np.where(sel[:, :, None], rendered - reference, 0.0)
    loss = float((diff ** 2).sum()) / count
    grad = 2.0 * diff / count
    return loss, grad


def masked_psnr(rendered, reference, mask: BinaryMask | None = None) -> float:
    loss, _ = mse_loss(rendered, reference, mask)
    if loss == 0:
        return float("inf")
    return float(-10.0 * np.log10(loss))


class PriorGradientProvider:
    """Interface for Eq.-style prior gradients in pixel space.

    gradient() returns d(prior objective)/d(rendered) as an (H, W, 3) raster;
    loss() optionally reports a scalar for history/monitoring (NaN if the
    provider has no meaningful scalar).
    """

    def gradient(self, rendered: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        raise NotImplementedError

    def loss(self, rendered: np.ndarray) -> float:
        return float("nan")


class MockTargetPrior(PriorGradientProvider):
    """Deterministic test double: gradient w * (rendered - target).

    This is the gradient of 0.5 * w * ||rendered - target||^2, so optimizing
    against it must pull every novel view toward the target image.
    """

    def __init__(self, target: np.ndarray, weight: float = 1.0):
        self.target = np.asarray(target, dtype=float)
        self.weight = float(weight)

    def gradient(self, rendered, rng):
        rendered = np.asarray(rendered, dtype=float)
        if rendered.shape != self.target.shape:
            raise DimensionMismatch("rendered shape does not match prior target")
        return self.weight * (rendered - self.target)

    def loss(self, rendered):
        return float(np.mean((np.asarray(rendered) - self.target) ** 2))


class RemotePriorProvider(PriorGradientProvider):
    """HTTP client for an external noise-prediction service.

    Posts a PNG-encoded render plus prompt and timestep; expects a raw
    little-endian float32 raster of identical shape back. Endpoint from the
    PROXYANIM_PRIOR_URL env var unless given explicitly.
    """

    def __init__(self, prompt: str, url: str | None = None,
                 timestep_range: tuple[float, float] = (0.02, 0.98),
                 timeout: float = 30.0):
        self.url = url or os.environ.get("PROXYANIM_PRIOR_URL")
        if not self.url:
            raise ProviderUnavailable("no prior endpoint configured "
                                      "(set PROXYANIM_PRIOR_URL)")
        self.prompt = prompt
        self.timestep_range = timestep_range
        self.timeout = timeout

    def gradient(self, rendered, rng):
        import requests
        from PIL import Image

        rendered = np.asarray(rendered, dtype=float)
        h, w, _ = rendered.shape
        t = float(rng.uniform(*self.timestep_range))
        buf = io.BytesIO()
        img = Image.fromarray(np.clip(np.round(rendered * 255.0), 0, 255).astype(np.uint8))
        img.save(buf, format="PNG")
        try:
            resp = requests.post(
                self.url,
                files={"image": ("render.png", buf.getvalue(), "image/png")},
                data={"prompt": self.prompt, "timestep": str(t)},
                timeout=self.timeout)
            resp.raise_for_status()
        except Exception as exc:  # connection, timeout, HTTP status
            raise ProviderUnavailable(f"prior service failed: {exc}") from exc
        raw = np.frombuffer(resp.content, dtype="<f4")
        if raw.size != h * w * 3:
            raise ProviderUnavailable(
                f"prior service returned {raw.size} floats, expected {h * w * 3}")
        return raw.reshape(h, w, 3).astype(float)


def sds_gradient(provider: PriorGradientProvider, rendered: np.ndarray,
                 rng: np.random.Generator) -> np.ndarray:
    """Pixel-space prior gradient for one rendered novel view."""
    g = np.asarray(provider.gradient(rendered, rng), dtype=float)
    if g.shape != np.asarray(rendered).shape:
        raise DimensionMismatch("provider gradient shape mismatch")
    return g


def reference_spherical_coords(reference_cam: PinholeCamera, center) -> tuple[float, float, float]:
    """(azimuth deg, elevation deg, radius) of the camera around center."""
    center = np.asarray(center, dtype=float)
    off = reference_cam.position() - center
    radius = float(np.linalg.norm(off))
    elevation = float(np.degrees(np.arcsin(np.clip(off[1] / radius, -1, 1))))
    azimuth = float(np.degrees(np.arctan2(off[0], off[2]))) % 360.0
    return azimuth, elevation, radius


def sample_random_camera(cfg: TrainConfig, reference_cam: PinholeCamera,
                         center, rng: np.random.Generator) -> PinholeCamera:
    """Uniform spherical pose around center, intrinsics from the reference."""
    _, _, ref_radius = reference_spherical_coords(reference_cam, center)
    az = rng.uniform(*cfg.azimuth_range)
    el = rng.uniform(*cfg.elevation_range)
    rad = rng.uniform(*cfg.radius_range) * ref_radius
    return camera_from_spherical(reference_cam, center, az, el, rad)


@dataclass
class AdamState:
    first_moment: list[np.ndarray]
    second_moment: list[np.ndarray]
    step_count: int = 0

    @staticmethod
    def init_like(params: list[np.ndarray]) -> "AdamState":
        return AdamState([np.zeros_like(p) for p in params],
                         [np.zeros_like(p) for p in params], 0)


def adam_step(params: list[np.ndarray], grads: list[np.ndarray], state: AdamState,
              lr: float, beta1: float = 0.9, beta2: float = 0.999,
              eps: float = 1e-8) -> None:
    """Standard bias-corrected Adam update, in place."""
    if len(params) != len(grads) or len(params) != len(state.first_moment):
        raise ShapeMismatch("parameter/gradient/state counts differ")
    for p, g in zip(params, grads):
        if p.shape != g.shape:
            raise ShapeMismatch(f"param {p.shape} vs grad {g.shape}")
    state.step_count += 1
    t = state.step_count
    bc1 = 1.0 - beta1 ** t
    bc2 = 1.0 - beta2 ** t
    for p, g, m, v in zip(params, grads, state.first_moment, state.second_moment):
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        p -= lr * (m / bc1) / (np.sqrt(v / bc2) + eps)


def _parameter_pack(field_: FeatureField, dec: Decoder) -> list[np.ndarray]:
    return [field_.features] + dec.weights + dec.biases


@dataclass
class TrainHistory:
    mse: list[float] = field(default_factory=list)
    prior: list[float] = field(default_factory=list)

    def rows(self):
        return list(zip(range(len(self.mse)), self.mse, self.prior))


def train(mesh: ProxyMesh, field_: FeatureField, dec: Decoder,
          reference_image: np.ndarray, reference_cam: PinholeCamera,
          m_obj: BinaryMask, cfg: TrainConfig,
          provider: PriorGradientProvider | None = None,
          enc: EncodingConfig | None = EncodingConfig(),
          background=(1.0, 1.0, 1.0)) -> TrainHistory:
    """Optimize field and decoder in place; returns the per-iteration history.

    Each iteration renders the reference view for the weighted MSE gradient
    and, when the prior weight is active, one random novel view for the prior
    gradient; both are chained through the render backward pass into a single
    Adam step. Deterministic for a fixed config seed.
    """
    rng = np.random.default_rng(cfg.seed)
    params = _parameter_pack(field_, dec)
    state = AdamState.init_like(params)
    history = TrainHistory()
    center = mesh.vertices.mean(axis=0) if mesh.vertex_count else np.zeros(3)

    use_mse = cfg.alpha1 > 0
    use_prior = cfg.alpha2 > 0 and provider is not None

    for _ in range(cfg.iterations):
        grad_field = np.zeros_like(field_.features)
        grad_w = [np.zeros_like(w) for w in dec.weights]
        grad_b = [np.zeros_like(b) for b in dec.biases]
        mse_value = float("nan")
        prior_value = float("nan")

        if use_mse:
            out = render_image(mesh, field_, dec, reference_cam, enc, background)
            mse_value, grad_pix = mse_loss(out.color, reference_image, m_obj)
            gf, gw, gb = render_backward(cfg.alpha1 * grad_pix, out, mesh, field_, dec, enc)
            grad_field += gf
            for acc, g in zip(grad_w, gw):
                acc += g
            for acc, g in zip(grad_b, gb):
                acc += g

        if use_prior:
            cam = sample_random_camera(cfg, reference_cam, center, rng)
            out = render_image(mesh, field_, dec, cam, enc, NOVEL_VIEW_BACKGROUND)
            g_pix = sds_gradient(provider, out.color, rng)
            prior_value = provider.loss(out.color)
            gf, gw, gb = render_backward(cfg.alpha2 * g_pix, out, mesh, field_, dec, enc)
            grad_field += gf
            for acc, g in zip(grad_w, gw):
                acc += g
            for acc, g in zip(grad_b, gb):
                acc += g

        grads = [grad_field] + grad_w + grad_b
        adam_step(params, grads, state, cfg.learning_rate,
                  cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps)
        history.mse.append(mse_value)
        history.prior.append(prior_value)
    return history
