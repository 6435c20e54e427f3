"""Tiled diffusion upscaling with per-step overlap averaging, plus training degradations."""
from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
from scipy import fft, ndimage

from .diffusion import NoiseSchedule, initial_noise
from .errors import NumericError, PlanError, ShapeError
from .numerics import DTYPE, RngStream


@dataclass(frozen=True)
class TilePlan:
    extents: tuple  # (Y, X)
    grid: tuple  # (rows, cols)
    overlap: int
    tile: tuple  # (h, w)
    tiles: tuple  # ((y0, y1, x0, x1), ...) ordered by row-major tile index

    def coverage(self):
        cov = np.zeros(self.extents, dtype=np.int64)
        for y0, y1, x0, x1 in self.tiles:
            cov[y0:y1, x0:x1] += 1
        return cov


def _tile_size(extent, g, overlap):
    span = extent + (g - 1) * overlap
    if span % g:
        return None
    return span // g


def _padded(extent, g, overlap):
    e = extent
    while (e + (g - 1) * overlap) % g:
        e += 1
    return e


def plan_tiles(extents, grid=(3, 3), overlap=0):
    """Equal tiles with adjacent tiles sharing ``overlap`` pixels."""
    Y, X = extents
    R, C = grid
    if R < 1 or C < 1:
        raise PlanError(f"grid must be positive, got {grid}")
    if overlap < 0:
        raise PlanError("overlap must be non-negative")
    th, tw = _tile_size(Y, R, overlap), _tile_size(X, C, overlap)
    if th is None or tw is None:
        raise PlanError(f"{Y}x{X} does not split into a {R}x{C} grid with overlap {overlap}; "
                        f"pad to {_padded(Y, R, overlap)}x{_padded(X, C, overlap)}")
    for size, g in ((th, R), (tw, C)):
        if g > 1 and (overlap >= size or (g > 2 and 2 * overlap > size)):
            raise PlanError(f"overlap {overlap} too wide for tiles of {size} pixels")
    tiles = tuple((r * (th - overlap), r * (th - overlap) + th, c * (tw - overlap), c * (tw - overlap) + tw)
                  for r in range(R) for c in range(C))
    return TilePlan((Y, X), (R, C), overlap, (th, tw), tiles)


def tiled_denoise(x, sigma, plan: TilePlan, denoiser, order=None, workers=1):
    """Run ``denoiser(tile, sigma)`` per tile and average the results where tiles overlap.

    ``x`` has spatial axes at (-3, -2) and channels last. Tiles may be
    processed in any ``order`` or concurrently; the merge always sums in tile
    index order so the result does not depend on either.
    """
    x = np.asarray(x)
    if tuple(x.shape[-3:-1]) != tuple(plan.extents):
        raise ShapeError(f"frame {x.shape[-3:-1]} does not match plan {plan.extents}")
    order = list(range(len(plan.tiles))) if order is None else list(order)
    if sorted(order) != list(range(len(plan.tiles))):
        raise PlanError("order must be a permutation of the tile indices")

    def run(k):
        y0, y1, x0, x1 = plan.tiles[k]
        out = np.asarray(denoiser(x[..., y0:y1, x0:x1, :], sigma))
        if out.shape != x[..., y0:y1, x0:x1, :].shape:
            raise ShapeError(f"denoiser changed tile shape to {out.shape}")
        return k, out

    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            results = dict(pool.map(run, order))
    else:
        results = dict(run(k) for k in order)
    acc = np.zeros(x.shape, dtype=np.float64)
    for k in range(len(plan.tiles)):
        y0, y1, x0, x1 = plan.tiles[k]
        acc[..., y0:y1, x0:x1, :] += results[k]
    cov = plan.coverage()[:, :, None]
    return (acc / cov).astype(x.dtype)


# --- degradation ------------------------------------------------------------------

def _blur(frames, sigma):
    if sigma <= 0:
        return frames
    return ndimage.gaussian_filter(frames, (0, sigma, sigma, 0), mode="reflect")


def resize_cubic(frames, factor):
    """Cubic-spline resampling of (T, Y, X, C) frames by ``factor`` per spatial axis."""
    return ndimage.zoom(frames, (1, factor, factor, 1), order=3, mode="grid-mirror", grid_mode=True)


def dct_quantize(frames, step, block=8):
    """Round 8x8 block-DCT coefficients to multiples of ``step`` (compression stand-in)."""
    if step <= 0:
        return frames
    T, Y, X, C = frames.shape
    py, px = (-Y) % block, (-X) % block
    f = np.pad(frames, ((0, 0), (0, py), (0, px), (0, 0)), mode="edge")
    Yp, Xp = f.shape[1:3]
    blocks = f.reshape(T, Yp // block, block, Xp // block, block, C)
    coef = fft.dctn(blocks, type=2, norm="ortho", axes=(2, 4))
    coef = np.round(coef / step) * step
    out = fft.idctn(coef, type=2, norm="ortho", axes=(2, 4)).reshape(T, Yp, Xp, C)
    return out[:, :Y, :X]


def degrade(video, seed, scale=2, blur_sigma=1.0, noise_sigma=0.02, quant_step=0.05):
    """Blur -> cubic downscale -> Gaussian noise -> block-DCT quantization, clipped to [0, 1]."""
    v = np.asarray(video, dtype=np.float64)
    if v.ndim != 4:
        raise ShapeError(f"expected (T, Y, X, C) video, got {v.shape}")
    if scale not in (2, 4) or v.shape[1] % scale or v.shape[2] % scale:
        raise ShapeError(f"extents {v.shape[1:3]} must be divisible by scale {scale} (2 or 4)")
    low = resize_cubic(_blur(v, blur_sigma), 1.0 / scale)
    if noise_sigma > 0:
        low = low + noise_sigma * RngStream(seed).normal(low.shape, dtype=np.float64)
    low = dct_quantize(low, quant_step)
    return np.clip(low, 0.0, 1.0).astype(DTYPE)


def psnr(a, b, data_range=1.0):
    mse = float(np.mean((np.asarray(a, dtype=np.float64) - np.asarray(b, dtype=np.float64)) ** 2))
    return math.inf if mse == 0 else 10 * math.log10(data_range ** 2 / mse)


# --- upscaling sampler ---------------------------------------------------------------

class GuidedPixelDenoiser:
    """Closed-form noise predictor for x0 ~ N(guide, tau^2) per pixel.

    ``guide`` is the cubic upsampling of the low-res input, optionally
    smoothed with a (2r+1)^2 box so the predictor has a spatial receptive
    field. It stands in for a fine-tuned upscaling model: the tiling
    mechanism only needs a translation-equivariant denoiser.
    """

    def __init__(self, tau=0.1, radius=0):
        self.tau = tau
        self.radius = radius

    def __call__(self, tile, sigma, guide=None):
        x = np.asarray(tile, dtype=np.float64)
        g = x[..., 3:] if guide is None else guide
        z = x[..., :3] if guide is None else x
        if self.radius:
            g = ndimage.uniform_filter(g, size=(1,) * (g.ndim - 3) + (2 * self.radius + 1,) * 2 + (1,),
                                       mode="nearest")
        t2, s2 = self.tau ** 2, float(sigma) ** 2
        d = (t2 * z + s2 * g) / (t2 + s2)
        eps = (z - d) / float(sigma)
        if guide is None:
            eps = np.concatenate([eps, np.zeros_like(g)], axis=-1)
        return eps.astype(tile.dtype)


def upscale_video(low, scale=2, grid=(3, 3), overlap=4, steps=10, seed=0, denoiser=None,
                  sigma_max=10.0, sigma_min=0.002, workers=1):
    """Sample a ``scale``x video guided by ``low`` with tiled denoising at every step.

    The guide is stacked as extra channels so each tile sees its own slice of
    it; the denoiser returns zero noise for those channels.
    """
    low = np.asarray(low, dtype=DTYPE)
    guide = np.clip(resize_cubic(low.astype(np.float64), scale), 0.0, 1.0).astype(DTYPE)
    T, Y, X, C = guide.shape
    plan = plan_tiles((Y, X), grid, overlap)
    denoiser = denoiser or GuidedPixelDenoiser()
    schedule = NoiseSchedule(sigma_min, sigma_max, steps)
    z = initial_noise([seed], guide.shape, sigma_max)[0]
    state = np.concatenate([z, guide], axis=-1)
    sig = schedule.sigmas()
    for i in range(len(sig) - 1):
        n = tiled_denoise(state, sig[i], plan, denoiser, workers=workers)
        state = (state + DTYPE(sig[i + 1] - sig[i]) * n).astype(DTYPE)
        if not np.all(np.isfinite(state)):
            raise NumericError(f"non-finite values after upscaling step {i}")
    return np.clip(state[..., :C], 0.0, 1.0)
