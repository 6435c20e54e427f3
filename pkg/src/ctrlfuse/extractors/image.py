"""Image-space control extractors: bilateral blur, Canny edges, depth, segmentation."""
from __future__ import annotations

import math

import numpy as np
from scipy import ndimage

from ..errors import DomainError, InputError
from ..numerics import DTYPE, RngStream

CANNY_SIGMA = 1.4
LUMA = np.array([0.299, 0.587, 0.114])

# training-time augmentation ranges
BLUR_SIGMA_SPACE = (1.0, 5.0)
BLUR_SIGMA_RANGE = (0.02, 0.2)
CANNY_LOW = (0.05, 0.2)
CANNY_HIGH_RATIO = (2.0, 4.0)


def to_gray(frame):
    f = np.asarray(frame, dtype=np.float64)
    return f @ LUMA if f.ndim == 3 and f.shape[-1] == 3 else f


def bilateral_blur(frame, sigma_space, sigma_range):
    """Bilateral filter with a Gaussian spatial kernel of radius ceil(3*sigma_space).

    Range weights are computed per channel. Borders use symmetric padding.
    """
    if sigma_space <= 0 or sigma_range <= 0:
        raise DomainError("bilateral sigmas must be positive")
    f = np.asarray(frame, dtype=np.float64)
    squeeze = f.ndim == 2
    if squeeze:
        f = f[..., None]
    Y, X, _ = f.shape
    r = int(math.ceil(3 * sigma_space))
    pad = np.pad(f, ((r, r), (r, r), (0, 0)), mode="symmetric")
    acc = np.zeros_like(f)
    wsum = np.zeros_like(f)
    inv_s = 1.0 / (2 * sigma_space ** 2)
    inv_r = 1.0 / (2 * sigma_range ** 2)
    for dy in range(-r, r + 1):
        for dx in range(-r, r + 1):
            ws = math.exp(-(dy * dy + dx * dx) * inv_s)
            nb = pad[r + dy:r + dy + Y, r + dx:r + dx + X]
            w = ws * np.exp(-((nb - f) ** 2) * inv_r)
            acc += w * nb
            wsum += w
    out = acc / wsum
    return out[..., 0] if squeeze else out


def blur_video(video, sigma_space=2.0, sigma_range=0.1):
    return np.stack([bilateral_blur(fr, sigma_space, sigma_range) for fr in video]).astype(DTYPE)


def _gradients(gray):
    smooth = ndimage.gaussian_filter(gray, CANNY_SIGMA, mode="reflect")
    gx = ndimage.sobel(smooth, axis=1, mode="reflect")
    gy = ndimage.sobel(smooth, axis=0, mode="reflect")
    return gx, gy


# (pos-side, neg-side) neighbour offsets (dy, dx) per quantized direction
_NMS_OFFSETS = {
    0: ((0, 1), (0, -1)),
    1: ((1, 1), (-1, -1)),
    2: ((1, 0), (-1, 0)),
    3: ((1, -1), (-1, 1)),
}


def quantize_direction(gx, gy):
    ang = np.degrees(np.arctan2(gy, gx)) % 180.0
    q = np.zeros(ang.shape, dtype=np.int8)
    q[(ang >= 22.5) & (ang < 67.5)] = 1
    q[(ang >= 67.5) & (ang < 112.5)] = 2
    q[(ang >= 112.5) & (ang < 157.5)] = 3
    return q


def _shifted(mag, dy, dx):
    """out[y, x] = mag[y+dy, x+dx], zero outside the image."""
    Y, X = mag.shape
    out = np.zeros_like(mag)
    ys, yd = (slice(dy, Y), slice(0, Y - dy)) if dy >= 0 else (slice(0, Y + dy), slice(-dy, Y))
    xs, xd = (slice(dx, X), slice(0, X - dx)) if dx >= 0 else (slice(0, X + dx), slice(-dx, X))
    out[yd, xd] = mag[ys, xs]
    return out


def non_max_suppression(mag, direction):
    """Keep pixels that are >= the forward neighbour and > the backward one."""
    keep = np.zeros(mag.shape, dtype=bool)
    for k, ((py, px), (ny, nx_)) in _NMS_OFFSETS.items():
        sel = direction == k
        fwd = _shifted(mag, py, px)
        bwd = _shifted(mag, ny, nx_)
        keep |= sel & (mag > 0) & (mag >= fwd) & (mag > bwd)
    return np.where(keep, mag, 0.0)


def hysteresis(nms, low, high):
    weak = nms > low
    strong = nms > high
    labels, n = ndimage.label(weak, structure=np.ones((3, 3), dtype=bool))
    if n == 0:
        return np.zeros(nms.shape, dtype=bool)
    hit = np.zeros(n + 1, dtype=bool)
    hit[np.unique(labels[strong])] = True
    hit[0] = False
    return hit[labels]


def gradient_magnitude(frame):
    gx, gy = _gradients(to_gray(frame))
    return np.hypot(gx, gy)


def canny_edges(frame, low, high, relative=False):
    """Binary Canny edge map of a grayscale (or RGB) frame.

    Thresholds apply to the Sobel magnitude of the sigma=1.4 smoothed frame;
    with ``relative`` they are fractions of the frame's maximum magnitude.
    """
    if not 0 <= low <= high:
        raise DomainError(f"need 0 <= low <= high, got {low}, {high}")
    gx, gy = _gradients(to_gray(frame))
    mag = np.hypot(gx, gy)
    if relative:
        peak = mag.max()
        low, high = low * peak, high * peak
    nms = non_max_suppression(mag, quantize_direction(gx, gy))
    return hysteresis(nms, low, high)


def edge_video(video, low=0.2, high=0.5, relative=False):
    return np.stack([canny_edges(fr, low, high, relative) for fr in video]).astype(DTYPE)


def sample_blur_params(rng: RngStream):
    return float(rng.uniform(None, *BLUR_SIGMA_SPACE)), float(rng.uniform(None, *BLUR_SIGMA_RANGE))


def sample_canny_thresholds(rng: RngStream):
    """Relative (low, high) thresholds for augmentation."""
    low = float(rng.uniform(None, *CANNY_LOW))
    return low, low * float(rng.uniform(None, *CANNY_HIGH_RATIO))


def depth_normalize(depth):
    """Min-max normalize a whole depth clip to [0, 1]."""
    d = np.asarray(depth, dtype=np.float64)
    if not np.all(np.isfinite(d)):
        raise DomainError("depth contains non-finite values")
    lo, hi = d.min(), d.max()
    if not hi > lo:
        raise InputError("constant depth clip cannot be normalized")
    return ((d - lo) / (hi - lo)).astype(DTYPE)


def seg_color(obj_id, seed):
    """Random 24-bit color for an object id; independent of the other ids."""
    v = int(RngStream(seed).split(int(obj_id)).integers(0, 1 << 24))
    return np.array([(v >> 16) & 255, (v >> 8) & 255, v & 255], dtype=np.float64) / 255.0


def seg_recolor(masks, ids, seed):
    """Paint masks (n, T, Y, X) with per-id random colors, higher ids on top."""
    m = np.asarray(masks, dtype=bool)
    if m.ndim != 4:
        raise InputError(f"mask set must be (n, T, Y, X), got {m.shape}")
    if len(set(ids)) != len(ids):
        raise InputError("object ids must be unique")
    out = np.zeros(m.shape[1:] + (3,), dtype=np.float64)
    for k in np.argsort(ids, kind="stable"):
        out[m[k]] = seg_color(ids[k], seed)
    return out.astype(DTYPE)
