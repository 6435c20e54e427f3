"""Fixed causal video tokenizer: 8x temporal / 16x spatial block means.

Frame 0 is pooled on its own, later frames in groups of 8 (causal layout).
Each spatial block is 16x16 pixels (8x tokenizer downsampling followed by a
2x2 patchify). The per-block RGB means are projected to ``latent_dim`` with a
fixed seeded matrix with orthonormal rows, so the pseudo-inverse is its
transpose. Block means are centered on 0.5 and scaled by 8 first so tokens of
[0, 1] videos have roughly unit spread per latent channel.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ShapeError
from .numerics import DTYPE, RngStream

TIME_FACTOR = 8
SPACE_FACTOR = 8
PATCH = 2
BLOCK = SPACE_FACTOR * PATCH
CENTER = 0.5
GAIN = 8.0


def check_extents(T, Y, X):
    if T < 1 or (T - 1) % TIME_FACTOR:
        raise ShapeError(f"T-1 must be a non-negative multiple of {TIME_FACTOR}, got T={T}")
    if Y < BLOCK or X < BLOCK or Y % BLOCK or X % BLOCK:
        raise ShapeError(f"Y and X must be positive multiples of {BLOCK}, got {Y}x{X}")


def latent_extents(T, Y, X):
    check_extents(T, Y, X)
    return (T - 1) // TIME_FACTOR + 1, Y // BLOCK, X // BLOCK


def token_count(T, Y, X) -> int:
    t, y, x = latent_extents(T, Y, X)
    return t * y * x


def frame_groups(T):
    """Frame ranges pooled into each latent time step: [0,1), [1,9), [9,17), ..."""
    groups = [(0, 1)]
    for start in range(1, T, TIME_FACTOR):
        groups.append((start, start + TIME_FACTOR))
    return groups


@dataclass(frozen=True)
class Geometry:
    """Token grid of a source video: latent extents plus pixel extents."""

    T: int
    Y: int
    X: int

    @property
    def latent(self):
        return latent_extents(self.T, self.Y, self.X)

    @property
    def num_tokens(self):
        return token_count(self.T, self.Y, self.X)


@dataclass
class LatentGrid:
    tokens: np.ndarray  # (T', Y', X', d)
    geometry: Geometry

    def flat(self):
        return self.tokens.reshape(-1, self.tokens.shape[-1])

    @property
    def num_tokens(self):
        return self.geometry.num_tokens


def block_means(video):
    """Per-token means over receptive fields; ``video`` is (T, Y, X[, C])."""
    v = np.asarray(video, dtype=np.float64)
    squeeze = v.ndim == 3
    if squeeze:
        v = v[..., None]
    T, Y, X, C = v.shape
    check_extents(T, Y, X)
    yb, xb = Y // BLOCK, X // BLOCK
    out = []
    for t0, t1 in frame_groups(T):
        chunk = v[t0:t1].reshape(t1 - t0, yb, BLOCK, xb, BLOCK, C)
        out.append(chunk.mean(axis=(0, 2, 4)))
    res = np.stack(out)
    return res[..., 0] if squeeze else res


def upsample_blocks(means, T, Y, X):
    """Nearest-neighbour inverse of ``block_means``."""
    m = np.asarray(means)
    out = np.empty((T, Y, X) + m.shape[3:], dtype=m.dtype)
    for k, (t0, t1) in enumerate(frame_groups(T)):
        blk = np.repeat(np.repeat(m[k], BLOCK, axis=0), BLOCK, axis=1)
        out[t0:t1] = blk[None]
    return out


class VideoTokenizer:
    def __init__(self, latent_dim=16, seed=1234, channels=3):
        if latent_dim < channels:
            raise ShapeError("latent_dim must be at least the channel count")
        self.latent_dim = latent_dim
        self.channels = channels
        raw = RngStream(seed).normal((latent_dim, channels)).astype(np.float64)
        q, _ = np.linalg.qr(raw)
        self.projection = q.T  # (C, d), orthonormal rows

    def tokenize(self, video) -> LatentGrid:
        v = np.asarray(video)
        if v.ndim != 4 or v.shape[-1] != self.channels:
            raise ShapeError(f"expected (T, Y, X, {self.channels}) video, got {v.shape}")
        T, Y, X, _ = v.shape
        tokens = ((block_means(v) - CENTER) * GAIN) @ self.projection
        return LatentGrid(tokens.astype(DTYPE), Geometry(T, Y, X))

    def detokenize(self, grid: LatentGrid):
        g = grid.geometry
        means = (grid.tokens.astype(np.float64) @ self.projection.T) / GAIN + CENTER
        return upsample_blocks(means, g.T, g.Y, g.X).astype(DTYPE)

    def tokens_to_video(self, flat_tokens, geometry: Geometry):
        t, y, x = geometry.latent
        return self.detokenize(LatentGrid(np.asarray(flat_tokens).reshape(t, y, x, -1), geometry))


def as_rgb(control):
    """Lift (T,Y,X) or (T,Y,X,1) control videos to 3 channels."""
    c = np.asarray(control, dtype=DTYPE)
    if c.ndim == 3:
        c = c[..., None]
    if c.shape[-1] == 1:
        c = np.repeat(c, 3, axis=-1)
    return c
