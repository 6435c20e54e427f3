"""Per-modality control branches and spatiotemporal weighted fusion.

A branch copies the first K base blocks, embeds its control tokens with its
own linear layer, and emits K activations. Each activation goes through a
zero-initialized projection, is scaled element-wise by the modality's weight
map (resampled to tokens, broadcast over channels) and is summed into the
output of the matching base block.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import numerics as nx
from .denoiser import BLOCK_KEYS, DiT, block_forward
from .errors import ConfigError, DomainError, InputError, ShapeError
from .numerics import RngStream, Tensor
from .params import ParamSet
from .tokenizer import Geometry, block_means

NUM_CONTROL_BLOCKS = 3
_SUM_TOL = 1e-6


@dataclass
class ControlBranch:
    modality: str
    params: ParamSet
    num_blocks: int = NUM_CONTROL_BLOCKS
    num_heads: int = 8

    def save(self, directory):
        self.params.save(directory, meta={"kind": "branch", "modality": self.modality,
                                          "num_blocks": self.num_blocks, "num_heads": self.num_heads})

    @classmethod
    def load(cls, directory):
        params, meta = ParamSet.load(directory)
        if meta.get("kind") != "branch":
            raise ConfigError(f"{directory} is not a control branch checkpoint")
        return cls(meta["modality"], params, meta["num_blocks"], meta["num_heads"])


def create_branch(base: DiT, modality: str, num_blocks=NUM_CONTROL_BLOCKS, seed=0) -> ControlBranch:
    """New branch: blocks copied from the base, projections exactly zero."""
    cfg = base.config
    if num_blocks > cfg.num_blocks:
        raise ConfigError(f"branch needs {num_blocks} blocks, base has {cfg.num_blocks}")
    rng = RngStream(seed)
    ps = ParamSet()
    ps.add("ctrl.w", rng.normal((cfg.latent_dim, cfg.dim)) / math.sqrt(cfg.latent_dim))
    ps.add("ctrl.b", np.zeros(cfg.dim))
    for j in range(num_blocks):
        for key in BLOCK_KEYS:
            ps.add(f"block{j}.{key}", base.params[f"block{j}.{key}"].data.copy())
        ps.add(f"proj{j}.w", np.zeros((cfg.dim, cfg.dim)))
        ps.add(f"proj{j}.b", np.zeros(cfg.dim))
    return ControlBranch(modality, ps, num_blocks, cfg.num_heads)


# --- control maps ------------------------------------------------------------

@dataclass
class ControlMap:
    """Per-modality weights in pixel space, shape (N, T, Y, X)."""

    weights: np.ndarray
    modalities: tuple = field(default_factory=tuple)

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=nx.DTYPE)
        if self.weights.ndim != 4:
            raise ShapeError(f"control map must be (N, T, Y, X), got {self.weights.shape}")
        self.modalities = tuple(self.modalities)
        if self.modalities and len(self.modalities) != self.weights.shape[0]:
            raise ConfigError("modality names do not match the map's first extent")
        if np.any(self.weights < 0) or np.any(self.weights > 1) or not np.all(np.isfinite(self.weights)):
            raise DomainError("control weights must lie in [0, 1]")

    @classmethod
    def uniform(cls, modalities, T, Y, X, value=1.0):
        return cls(np.full((len(modalities), T, Y, X), value), modalities)

    def normalized(self):
        return ControlMap(normalize_control_map(self.weights), self.modalities)

    def to_tokens(self, geometry: Geometry):
        return resample_map_to_tokens(self.weights, geometry)

    def select(self, modalities):
        idx = [self.modalities.index(m) for m in modalities]
        return ControlMap(self.weights[idx], tuple(modalities))


def normalize_control_map(w):
    """Rescale sites whose modality weights sum above one so they sum to one."""
    arr = np.asarray(w.weights if isinstance(w, ControlMap) else w, dtype=np.float64)
    if np.any(arr < 0):
        raise DomainError("negative control weight")
    total = arr.sum(axis=0, keepdims=True)
    out = np.where(total > 1.0 + _SUM_TOL, arr / np.where(total > 0, total, 1.0), arr)
    return out.astype(nx.DTYPE)


def resample_map_to_tokens(w, geometry: Geometry):
    """Average-pool each (T, Y, X) modality slice over token receptive fields -> (N, S)."""
    arr = np.asarray(w.weights if isinstance(w, ControlMap) else w)
    if arr.shape[1:] != (geometry.T, geometry.Y, geometry.X):
        raise ShapeError(f"map extents {arr.shape[1:]} differ from video {geometry}")
    pooled = block_means(np.moveaxis(arr, 0, -1))  # (T', Y', X', N)
    return pooled.reshape(-1, arr.shape[0]).T.astype(nx.DTYPE)


def token_weights(w, geometry: Geometry, num_branches):
    """Normalized per-token weights (N, S) or (N, B, S) from a map or array."""
    if isinstance(w, ControlMap):
        tw = resample_map_to_tokens(normalize_control_map(w), geometry)
    else:
        tw = np.asarray(w, dtype=nx.DTYPE)
        if np.any(tw < 0) or np.any(tw > 1):
            raise DomainError("token weights must lie in [0, 1]")
        tw = normalize_control_map(tw)
    if tw.shape[0] != num_branches:
        raise ConfigError(f"{tw.shape[0]} weight slices for {num_branches} branches")
    return tw


# --- forward passes ------------------------------------------------------------

def _branch_acts(branch: ControlBranch, h0, c, attention=None):
    p = branch.params
    hb = h0 + (nx.as_tensor(c) @ p["ctrl.w"] + p["ctrl.b"])
    acts = []
    for j in range(branch.num_blocks):
        hb = block_forward(hb, p, f"block{j}", branch.num_heads, attention)
        acts.append(hb)
    return acts


def project(branch: ControlBranch, j, h):
    p = branch.params
    return h @ p[f"proj{j}.w"] + p[f"proj{j}.b"]


def _batched(x):
    x = nx.as_tensor(x)
    return (x.reshape(1, *x.shape), True) if x.ndim == 2 else (x, False)


def branch_forward(branch: ControlBranch, base: DiT, x, sigma, text, c, grid=None):
    """Raw activations h^j (before projection) of one branch, j = 1..K."""
    x, squeeze = _batched(x)
    c, _ = _batched(c)
    if c.shape[:2] != x.shape[:2]:
        raise ShapeError(f"control tokens {c.shape} do not align with noisy tokens {x.shape}")
    B, S, _ = x.shape
    h0 = base.embed(x, sigma, base.encode_text(text, batch=B), grid or (1, 1, S))
    acts = _branch_acts(branch, h0, c)
    return [a.reshape(S, -1) for a in acts] if squeeze else acts


def fused_denoise(base: DiT, x, sigma, text, branches, controls, w, grid=None,
                  attention=None, positions=None, return_injections=False):
    """Noise prediction with weighted control injections.

    ``w`` is a ControlMap in pixel space (requires a Geometry ``grid``) or
    token weights of shape (N, S) / (N, B, S).
    """
    x, squeeze = _batched(x)
    B, S, _ = x.shape
    branches = list(branches)
    controls = list(controls)
    if len(branches) != len(controls):
        raise ConfigError(f"{len(branches)} branches but {len(controls)} control inputs")
    geometry = grid if isinstance(grid, Geometry) else None
    latent = geometry.latent if geometry else (grid or (1, 1, S))
    if isinstance(w, ControlMap):
        if geometry is None:
            raise ConfigError("a pixel-space control map needs the video Geometry")
        if w.modalities and tuple(w.modalities) != tuple(b.modality for b in branches):
            raise ConfigError(f"map modalities {w.modalities} do not match branches "
                              f"{tuple(b.modality for b in branches)}")
    tw = token_weights(w, geometry, len(branches)) if branches else None
    # decided on the full map so every sequence shard runs the same branches
    active = [bool(np.any(t)) for t in tw] if branches else []
    if positions is not None and tw is not None and tw.shape[-1] != S:
        tw = tw[..., positions]

    h0 = base.embed(x, sigma, base.encode_text(text, batch=B), latent, positions)
    injections = None
    if branches:
        K = branches[0].num_blocks
        injections = [None] * K
        for i, (branch, c) in enumerate(zip(branches, controls)):
            if not active[i]:
                continue
            wi = tw[i]
            c, _ = _batched(c)
            if c.shape[:2] != (B, S) and c.shape[1:2] != (S,):
                raise ShapeError(f"control tokens {c.shape} do not align with {x.shape}")
            wt = Tensor(wi.reshape(-1, S, 1) if wi.ndim == 2 else wi.reshape(1, S, 1))
            for j, h in enumerate(_branch_acts(branch, h0, c, attention)):
                term = wt * project(branch, j, h)
                injections[j] = term if injections[j] is None else injections[j] + term
    n, _ = base.forward_embedded(h0, x, sigma, injections, attention)
    if squeeze:
        n = n.reshape(S, -1)
    if return_injections:
        return n, injections
    return n


def single_controlnet_forward(base: DiT, branch: ControlBranch, x, sigma, text, c, grid=None):
    """Classic one-branch ControlNet: projections added with no weighting."""
    x, squeeze = _batched(x)
    c, _ = _batched(c)
    B, S, _ = x.shape
    h0 = base.embed(x, sigma, base.encode_text(text, batch=B), grid or (1, 1, S))
    inj = [project(branch, j, h) for j, h in enumerate(_branch_acts(branch, h0, c))]
    n, _ = base.forward_embedded(h0, x, sigma, inj)
    return n.reshape(S, -1) if squeeze else n


def load_branches(paths):
    out = []
    for p in paths:
        try:
            out.append(ControlBranch.load(p))
        except FileNotFoundError as exc:
            raise InputError(str(exc)) from exc
    return out
