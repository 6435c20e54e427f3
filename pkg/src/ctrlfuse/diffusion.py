"""Noise schedule, branch/base training steps and guided Euler sampling."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .controlnet import ControlBranch, ControlMap, fused_denoise
from .denoiser import DiT
from .errors import ConfigError, FrozenParameterError, NumericError, ShapeError
from .numerics import GradTape, RngStream, Tensor
from .params import AdamState
from .tokenizer import Geometry, VideoTokenizer


@dataclass(frozen=True)
class NoiseSchedule:
    sigma_min: float = 0.02
    sigma_max: float = 80.0
    steps: int = 20
    rho: float = 7.0

    def __post_init__(self):
        if not 0 < self.sigma_min < self.sigma_max:
            raise ConfigError("need 0 < sigma_min < sigma_max")
        if self.steps < 1:
            raise ConfigError("need at least one step")

    def sigmas(self):
        """Decreasing sigma levels with a trailing 0 (Karras rho spacing)."""
        n = self.steps
        if n == 1:
            levels = np.array([self.sigma_max])
        else:
            ramp = np.linspace(0.0, 1.0, n)
            lo, hi = self.sigma_min ** (1 / self.rho), self.sigma_max ** (1 / self.rho)
            levels = (hi + ramp * (lo - hi)) ** self.rho
        return np.append(levels, 0.0)

    def sample_training_sigma(self, rng: RngStream, size=None):
        return rng.log_uniform(self.sigma_min, self.sigma_max, size)


@dataclass(frozen=True)
class GuidanceConfig:
    scale: float = 1.0
    negative_prompt: str = ""

    def __post_init__(self):
        if not np.isfinite(self.scale) or self.scale < 0:
            raise ConfigError("guidance scale must be finite and non-negative")


def add_noise(x0, sigma, rng: RngStream):
    x0 = np.asarray(x0, dtype=nx.DTYPE)
    sig = np.asarray(sigma, dtype=nx.DTYPE)
    if np.any(sig <= 0):
        raise ConfigError("sigma must be positive")
    eps = rng.normal(x0.shape)
    if sig.ndim == 1:
        sig = sig.reshape(-1, *([1] * (x0.ndim - 1)))
    return (x0 + sig * eps).astype(nx.DTYPE), eps


def cfg_combine(n_pos, n_neg, scale):
    a = n_pos.data if isinstance(n_pos, Tensor) else np.asarray(n_pos)
    b = n_neg.data if isinstance(n_neg, Tensor) else np.asarray(n_neg)
    if a.shape != b.shape:
        raise ShapeError(f"guidance inputs differ in shape: {a.shape} vs {b.shape}")
    # s*a + (1-s)*b rather than b + s*(a-b): exact at s = 0 and s = 1
    s = a.dtype.type(scale)
    return s * a + (a.dtype.type(1) - s) * b


@dataclass
class TrainBatch:
    """Clean tokens (B, S, L), control tokens (B, S, L) and prompts."""

    tokens: np.ndarray
    controls: np.ndarray | None
    prompts: list
    grid: tuple


def _check_frozen(base: DiT):
    loose = [t.name for t in base.params.values() if not t.frozen]
    if loose:
        raise FrozenParameterError(f"base parameters must be frozen before branch training: {loose[:3]}...")


def train_branch_step(branch: ControlBranch, base: DiT, batch: TrainBatch, rng: RngStream,
                      lr=1e-2, schedule=NoiseSchedule()):
    """One gradient-descent step on branch parameters; the base stays untouched."""
    _check_frozen(base)
    B = batch.tokens.shape[0]
    sigma = schedule.sample_training_sigma(rng, B)
    x, eps = add_noise(batch.tokens, sigma, rng)
    ones = np.ones((1, x.shape[1]), dtype=nx.DTYPE)
    with GradTape() as tape:
        n = fused_denoise(base, x, sigma, batch.prompts, [branch], [batch.controls], ones,
                          grid=batch.grid)
        loss = nx.mse(n, eps)
    if not np.isfinite(loss.item()):
        raise NumericError("branch loss is not finite")
    tape.backward(loss)
    branch.params.sgd_step(lr)
    return loss.item()


def train_base_step(base: DiT, batch: TrainBatch, rng: RngStream, lr=1e-3, schedule=NoiseSchedule(),
                    drop_prompt=0.1, adam: AdamState | None = None):
    """Denoiser pretraining step (stand-in for the pretrained base weights).

    Prompts are dropped with probability ``drop_prompt`` so the empty negative
    prompt stays meaningful. Uses Adam when ``adam`` state is given, else SGD.
    """
    B = batch.tokens.shape[0]
    sigma = schedule.sample_training_sigma(rng, B)
    x, eps = add_noise(batch.tokens, sigma, rng)
    keep = rng.uniform(B) >= drop_prompt
    prompts = [p if k else "" for p, k in zip(batch.prompts, keep)]
    with GradTape() as tape:
        n, _ = base.forward(x, sigma, prompts, grid=batch.grid)
        loss = nx.mse(n, eps)
    if not np.isfinite(loss.item()):
        raise NumericError("base loss is not finite")
    tape.backward(loss)
    if adam is None:
        base.params.sgd_step(lr)
    else:
        base.params.adam_step(adam, lr)
    return loss.item()


def denoising_loss(base: DiT, batch: TrainBatch, sigma, eps, branch=None):
    """MSE of the (optionally single-branch) prediction at fixed (sigma, eps)."""
    x = (batch.tokens + np.asarray(sigma, dtype=nx.DTYPE).reshape(-1, 1, 1) * eps).astype(nx.DTYPE)
    if branch is None:
        n, _ = base.forward(x, sigma, batch.prompts, grid=batch.grid)
    else:
        ones = np.ones((1, x.shape[1]), dtype=nx.DTYPE)
        n = fused_denoise(base, x, sigma, batch.prompts, [branch], [batch.controls], ones, grid=batch.grid)
    return float(np.mean((n.data.astype(np.float64) - eps) ** 2))


def serial_guided_denoiser(base: DiT, branches=(), controls=(), w=None, grid=None):
    """Guided noise prediction callable ``f(x, sigma, pos, neg, scale)``."""
    branches = list(branches)

    def denoise(x, sigma, pos, neg, scale):
        if branches:
            n_pos = fused_denoise(base, x, sigma, pos, branches, controls, w, grid=grid)
            n_neg = fused_denoise(base, x, sigma, neg, branches, controls, w, grid=grid)
        else:
            lat = grid.latent if isinstance(grid, Geometry) else grid
            n_pos, _ = base.forward(x, sigma, pos, grid=lat)
            n_neg, _ = base.forward(x, sigma, neg, grid=lat)
        return cfg_combine(n_pos, n_neg, scale)

    return denoise


def initial_noise(seeds, shape, sigma_max):
    return np.stack([RngStream(s).normal(shape) for s in seeds]).astype(nx.DTYPE) * nx.DTYPE(sigma_max)


def sample_tokens(denoise, shape, schedule: NoiseSchedule, guidance: GuidanceConfig, prompts, seeds):
    """Deterministic Euler integration; returns tokens (B, S, L)."""
    x = initial_noise(seeds, shape, schedule.sigma_max)
    sigmas = schedule.sigmas()
    for i in range(len(sigmas) - 1):
        s, s_next = sigmas[i], sigmas[i + 1]
        n = denoise(x, s, prompts, guidance.negative_prompt, guidance.scale)
        x = (x + nx.DTYPE(s_next - s) * n).astype(nx.DTYPE)
        if not np.all(np.isfinite(x)):
            raise NumericError(f"non-finite tokens after sampling step {i}")
    return x


def sample_video(base: DiT, tokenizer: VideoTokenizer, geometry: Geometry, schedule=NoiseSchedule(),
                 guidance=GuidanceConfig(), prompts="", seeds=0, branches=(), controls=(), w=None,
                 denoise=None):
    """Sample videos (B, T, Y, X, 3); a single seed returns one video.

    ``controls`` holds one (B, S, L) or (S, L) token array per branch and ``w``
    the ControlMap or token weights. Without branches the base model samples.
    """
    single = np.isscalar(seeds)
    seeds = [seeds] if single else list(seeds)
    if isinstance(prompts, str):
        prompts = [prompts] * len(seeds)
    branches = list(branches)
    if branches and w is None:
        w = np.ones((len(branches), geometry.num_tokens), dtype=nx.DTYPE)
    if denoise is None:
        denoise = serial_guided_denoiser(base, branches, controls, w, geometry)
    shape = (geometry.num_tokens, base.config.latent_dim)
    tokens = sample_tokens(denoise, shape, schedule, guidance, prompts, seeds)
    videos = np.stack([tokenizer.tokens_to_video(t, geometry) for t in tokens])
    return videos[0] if single else videos
