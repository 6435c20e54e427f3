"""Toy diffusion-transformer denoiser ``n = D(x_sigma, sigma, text)``.

Tokens are embedded, offset by fixed 3D sinusoidal positions and by an
additive conditioning vector (sigma embedding + projected bag-of-words text
embedding), then pass through pre-norm transformer blocks. Block outputs are
exposed so control branches can inject into them.
"""
from __future__ import annotations

import math
import re
import zlib
from dataclasses import asdict, dataclass

import numpy as np

from . import numerics as nx
from .errors import ConfigError, DomainError, NumericError, ShapeError
from .numerics import RngStream, Tensor
from .params import ParamSet


@dataclass(frozen=True)
class DiTConfig:
    num_blocks: int = 6
    num_heads: int = 8
    dim: int = 64
    latent_dim: int = 16
    text_dim: int = 32
    sigma_dim: int = 32
    vocab_size: int = 512
    mlp_ratio: int = 4
    sigma_data: float = 0.5

    def __post_init__(self):
        if self.dim % self.num_heads:
            raise ConfigError(f"dim {self.dim} is not divisible by num_heads {self.num_heads}")
        if self.num_blocks < 3:
            raise ConfigError("need at least 3 blocks to host the control injections")
        if self.sigma_dim % 2:
            raise ConfigError("sigma_dim must be even")

    @property
    def head_dim(self):
        return self.dim // self.num_heads

    def to_dict(self):
        return asdict(self)


_WORD = re.compile(r"[a-z0-9]+")


def bag_of_words(prompt: str, vocab_size: int) -> np.ndarray:
    """Normalized hashed-token counts; mean pooling is ``bow @ table``."""
    bow = np.zeros(vocab_size, dtype=nx.DTYPE)
    words = _WORD.findall(prompt.lower())
    for w in words:
        bow[zlib.crc32(w.encode()) % vocab_size] += 1.0
    if words:
        bow /= len(words)
    return bow


def sigma_features(sigma, n_features):
    """Sinusoidal features of ln(sigma): cosine half then sine half."""
    s = np.atleast_1d(np.asarray(sigma, dtype=np.float64))
    if np.any(~(s > 0)):
        raise DomainError(f"sigma must be positive, got {sigma}")
    half = n_features // 2
    freqs = np.exp(-math.log(100.0) * np.arange(half) / half)
    arg = np.log(s)[:, None] * freqs[None, :]
    return np.concatenate([np.cos(arg), np.sin(arg)], axis=1).astype(nx.DTYPE)


def position_table(grid, dim):
    """Fixed sinusoidal (t, y, x) position codes for a flattened token grid."""
    t, y, x = grid
    per_axis = 2 * (dim // 6)
    half = per_axis // 2
    freqs = np.exp(-math.log(100.0) * np.arange(half) / max(half, 1))
    tt, yy, xx = np.meshgrid(np.arange(t), np.arange(y), np.arange(x), indexing="ij")
    cols = []
    for coord in (tt, yy, xx):
        arg = coord.reshape(-1, 1) * freqs[None, :]
        cols += [np.sin(arg), np.cos(arg)]
    table = np.concatenate(cols, axis=1)
    pad = dim - table.shape[1]
    if pad:
        table = np.concatenate([table, np.zeros((table.shape[0], pad))], axis=1)
    return table.astype(nx.DTYPE)


def init_block_params(ps: ParamSet, prefix, cfg: DiTConfig, rng: RngStream):
    d, h = cfg.dim, cfg.dim * cfg.mlp_ratio

    def w(shape, gain=1.0):
        return rng.normal(shape) * (gain / math.sqrt(shape[0]))

    ps.add(f"{prefix}.ln1.g", np.ones(d))
    ps.add(f"{prefix}.ln1.b", np.zeros(d))
    for name in ("wq", "wk", "wv"):
        ps.add(f"{prefix}.attn.{name}", w((d, d)))
    ps.add(f"{prefix}.attn.wo", w((d, d), 0.5))
    ps.add(f"{prefix}.attn.bo", np.zeros(d))
    ps.add(f"{prefix}.ln2.g", np.ones(d))
    ps.add(f"{prefix}.ln2.b", np.zeros(d))
    ps.add(f"{prefix}.mlp.w1", w((d, h)))
    ps.add(f"{prefix}.mlp.b1", np.zeros(h))
    ps.add(f"{prefix}.mlp.w2", w((h, d), 0.5))
    ps.add(f"{prefix}.mlp.b2", np.zeros(d))


BLOCK_KEYS = ("ln1.g", "ln1.b", "attn.wq", "attn.wk", "attn.wv", "attn.wo", "attn.bo",
              "ln2.g", "ln2.b", "mlp.w1", "mlp.b1", "mlp.w2", "mlp.b2")


def init_dit_params(cfg: DiTConfig, seed=0) -> ParamSet:
    rng = RngStream(seed)
    ps = ParamSet()
    d, L = cfg.dim, cfg.latent_dim
    ps.add("in.w", rng.normal((L, d)) / math.sqrt(L))
    ps.add("in.b", np.zeros(d))
    ps.add("sigma.w1", rng.normal((cfg.sigma_dim, d)) / math.sqrt(cfg.sigma_dim))
    ps.add("sigma.b1", np.zeros(d))
    ps.add("sigma.w2", rng.normal((d, d)) / math.sqrt(d))
    ps.add("sigma.b2", np.zeros(d))
    ps.add("text.table", rng.normal((cfg.vocab_size, cfg.text_dim)))
    ps.add("text.w", rng.normal((cfg.text_dim, d)) / math.sqrt(cfg.text_dim))
    ps.add("text.b", np.zeros(d))
    for j in range(cfg.num_blocks):
        init_block_params(ps, f"block{j}", cfg, rng.split(j))
    ps.add("out.ln.g", np.ones(d))
    ps.add("out.ln.b", np.zeros(d))
    ps.add("out.w", rng.normal((d, L)) * (0.1 / math.sqrt(d)))
    ps.add("out.b", np.zeros(L))
    return ps


def full_attention(q, k, v):
    """softmax(q k^T / sqrt(dh)) v per head; inputs and output are (B, S, H, dh)."""
    dh = q.shape[-1]
    qh = q.transpose(0, 2, 1, 3)
    kt = k.transpose(0, 2, 3, 1)
    vh = v.transpose(0, 2, 1, 3)
    scores = nx.scale(qh @ kt, 1.0 / math.sqrt(dh))
    out = nx.softmax(scores, axis=-1) @ vh
    return out.transpose(0, 2, 1, 3)


def attention_forward(x, p: ParamSet, prefix, num_heads, attention=None, return_heads=False):
    """Multi-head self-attention over the whole token sequence of ``x`` (B, S, d).

    ``attention`` replaces the per-head core (the parallel engine swaps in a
    head-sharded version). With ``return_heads`` the per-head Q/K/V
    (B, S, H, dh) are returned as well.
    """
    x = nx.as_tensor(x)
    B, S, d = x.shape
    if d % num_heads:
        raise ConfigError(f"dim {d} is not divisible by {num_heads} heads")
    dh = d // num_heads
    q = (x @ p[f"{prefix}.wq"]).reshape(B, S, num_heads, dh)
    k = (x @ p[f"{prefix}.wk"]).reshape(B, S, num_heads, dh)
    v = (x @ p[f"{prefix}.wv"]).reshape(B, S, num_heads, dh)
    o = (attention or full_attention)(q, k, v)
    out = o.reshape(B, S, d) @ p[f"{prefix}.wo"] + p[f"{prefix}.bo"]
    if return_heads:
        return out, {"q": q.data, "k": k.data, "v": v.data}
    return out


def block_forward(h, p: ParamSet, prefix, num_heads, attention=None):
    a = nx.layer_norm(h, p[f"{prefix}.ln1.g"], p[f"{prefix}.ln1.b"])
    h = h + attention_forward(a, p, f"{prefix}.attn", num_heads, attention)
    m = nx.layer_norm(h, p[f"{prefix}.ln2.g"], p[f"{prefix}.ln2.b"])
    m = nx.gelu(m @ p[f"{prefix}.mlp.w1"] + p[f"{prefix}.mlp.b1"])
    return h + (m @ p[f"{prefix}.mlp.w2"] + p[f"{prefix}.mlp.b2"])


def _as_batch_sigma(sigma, B):
    s = np.atleast_1d(np.asarray(sigma, dtype=np.float64))
    if s.size == 1:
        s = np.full(B, s[0])
    if s.shape != (B,):
        raise ShapeError(f"sigma has shape {s.shape}, batch is {B}")
    if np.any(~(s > 0)):
        raise DomainError(f"sigma must be positive, got {s}")
    return s


class DiT:
    """Base denoiser: parameters plus the forward pass pieces."""

    def __init__(self, config: DiTConfig, params: ParamSet):
        self.config = config
        self.params = params

    @classmethod
    def create(cls, config=None, seed=0):
        config = config or DiTConfig()
        return cls(config, init_dit_params(config, seed))

    # conditioning -----------------------------------------------------
    def encode_text(self, prompts, batch=None):
        """(B, vocab) bag-of-words matrix from a prompt, list of prompts or array."""
        if isinstance(prompts, np.ndarray):
            bow = prompts if prompts.ndim == 2 else prompts[None]
        else:
            if isinstance(prompts, str):
                prompts = [prompts]
            bow = np.stack([bag_of_words(p, self.config.vocab_size) for p in prompts])
        if batch is not None and bow.shape[0] == 1 and batch > 1:
            bow = np.repeat(bow, batch, axis=0)
        return bow

    def text_embedding(self, prompt: str) -> np.ndarray:
        bow = bag_of_words(prompt, self.config.vocab_size)
        return (bow.astype(np.float64) @ self.params["text.table"].data).astype(nx.DTYPE)

    def sigma_embed(self, sigma):
        p = self.params
        f = Tensor(sigma_features(sigma, self.config.sigma_dim))
        return nx.silu(f @ p["sigma.w1"] + p["sigma.b1"]) @ p["sigma.w2"] + p["sigma.b2"]

    def conditioning(self, sigma, bow):
        p = self.params
        text = (Tensor(bow) @ p["text.table"]) @ p["text.w"] + p["text.b"]
        return self.sigma_embed(sigma) + text

    def embed(self, x, sigma, bow, grid, positions=None):
        """Token embedding h0 (B, S, d) fed to block 0."""
        p, cfg = self.params, self.config
        x = nx.as_tensor(x)
        B, S, _ = x.shape
        sig = _as_batch_sigma(sigma, B)
        c_in = (1.0 / np.sqrt(sig ** 2 + cfg.sigma_data ** 2)).astype(x.dtype)
        pos = position_table(grid, cfg.dim)
        pos = pos if positions is None else pos[positions]
        if pos.shape[0] != S:
            raise ShapeError(f"{S} tokens but {pos.shape[0]} positions")
        cond = self.conditioning(sig, bow).reshape(B, 1, cfg.dim)
        h = (x * Tensor(c_in.reshape(B, 1, 1), dtype=x.dtype)) @ p["in.w"] + p["in.b"]
        return h + Tensor(pos) + cond

    def block(self, j, h, attention=None):
        return block_forward(h, self.params, f"block{j}", self.config.num_heads, attention)

    def run_blocks(self, h, start, stop, attention=None):
        for j in range(start, stop):
            h = self.block(j, h, attention)
        return h

    def head(self, h):
        p = self.params
        h = nx.layer_norm(h, p["out.ln.g"], p["out.ln.b"])
        return h @ p["out.w"] + p["out.b"]

    def forward(self, x, sigma, text, grid=None, injections=None, attention=None, positions=None):
        """Returns (noise prediction, per-block output activations).

        ``injections[j]`` (broadcastable to (B, S, d)) is added to the output
        of block j before it feeds block j+1.
        """
        x = nx.as_tensor(x)
        squeeze = x.ndim == 2
        if squeeze:
            x = x.reshape(1, *x.shape)
        if not np.all(np.isfinite(x.data)):
            raise NumericError("non-finite values in noisy tokens")
        B, S, _ = x.shape
        grid = grid or (1, 1, S)
        bow = self.encode_text(text, batch=B)
        h = self.embed(x, sigma, bow, grid, positions)
        n, acts = self.forward_embedded(h, x, sigma, injections, attention)
        if squeeze:
            n = n.reshape(S, -1)
            acts = [a.reshape(S, -1) for a in acts]
        return n, acts

    def forward_embedded(self, h, x, sigma, injections=None, attention=None):
        acts = []
        for j in range(self.config.num_blocks):
            h = self.block(j, h, attention)
            if injections is not None and j < len(injections) and injections[j] is not None:
                h = h + injections[j]
            acts.append(h)
        return self.noise_output(self.head(h), x, sigma), acts

    def noise_output(self, f, x, sigma):
        """Noise estimate from the head output with a skip from the noisy input.

        n = x * sigma / (sigma^2 + sd^2) - f * sd / sqrt(sigma^2 + sd^2), i.e. the
        noise implied by a denoised estimate c_skip * x + c_out * f.
        """
        x = nx.as_tensor(x)
        sig = _as_batch_sigma(sigma, x.shape[0]).reshape(-1, 1, 1)
        sd = self.config.sigma_data
        a = (sig / (sig ** 2 + sd ** 2)).astype(x.dtype)
        b = (sd / np.sqrt(sig ** 2 + sd ** 2)).astype(x.dtype)
        return x * Tensor(a, dtype=x.dtype) - f * Tensor(b, dtype=x.dtype)


def denoise_base(model: DiT, x, sigma, text, grid=None):
    """Base model prediction without control; returns (n, block activations)."""
    return model.forward(x, sigma, text, grid=grid)


def save_dit(model: DiT, directory):
    model.params.save(directory, meta={"kind": "dit", "config": model.config.to_dict()})


def load_dit(directory) -> DiT:
    params, meta = ParamSet.load(directory)
    if meta.get("kind") != "dit":
        raise ConfigError(f"{directory} is not a base denoiser checkpoint")
    return DiT(DiTConfig(**meta["config"]), params)
