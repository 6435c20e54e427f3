"""Alignment, diversity and consistency metrics for generated videos."""
from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from itertools import combinations

import numpy as np
from scipy import ndimage

from .errors import DomainError, InputError, ShapeError, UndefinedMetricError
from .extractors.image import bilateral_blur, canny_edges, to_gray
from .numerics import RngStream

SSIM_SIGMA = 1.5
SSIM_TRUNCATE = 3.5  # radius 5 -> 11x11 window at sigma 1.5
SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2
MIN_IOU = 0.1


def _same_extents(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"extent mismatch: {a.shape} vs {b.shape}")
    return a, b


def _region(mask, shape):
    if mask is None:
        return None
    m = np.asarray(mask, dtype=bool)
    if m.shape != shape:
        raise ShapeError(f"mask {m.shape} does not match {shape}")
    return m


def _masked_mean(values, mask):
    if mask is None:
        return float(values.mean())
    if not mask.any():
        raise UndefinedMetricError("empty region mask")
    return float(values[mask].mean())


def ssim_map(a, b):
    """Per-pixel SSIM of two frames (Y, X) or (Y, X, C), averaged over channels."""
    a, b = _same_extents(a, b)
    if a.ndim == 2:
        a, b = a[..., None], b[..., None]

    def filt(img):
        return np.stack([ndimage.gaussian_filter(img[..., c], SSIM_SIGMA, mode="reflect",
                                                 truncate=SSIM_TRUNCATE)
                         for c in range(img.shape[-1])], axis=-1)

    mu_a, mu_b = filt(a), filt(b)
    var_a = filt(a * a) - mu_a ** 2
    var_b = filt(b * b) - mu_b ** 2
    cov = filt(a * b) - mu_a * mu_b
    num = (2 * mu_a * mu_b + SSIM_C1) * (2 * cov + SSIM_C2)
    den = (mu_a ** 2 + mu_b ** 2 + SSIM_C1) * (var_a + var_b + SSIM_C2)
    return (num / den).mean(axis=-1)


def video_ssim(a, b, mask=None):
    a, b = _same_extents(a, b)
    maps = np.stack([ssim_map(fa, fb) for fa, fb in zip(a, b)])
    return _masked_mean(maps, _region(mask, maps.shape))


def blur_ssim(a, b, sigma_space=2.0, sigma_range=0.1, mask=None):
    """SSIM between bilaterally blurred copies of two videos (T, Y, X, 3)."""
    a, b = _same_extents(a, b)
    ba = np.stack([bilateral_blur(f, sigma_space, sigma_range) for f in a])
    bb = np.stack([bilateral_blur(f, sigma_space, sigma_range) for f in b])
    return video_ssim(ba, bb, mask)


def edge_counts(ref, pred, low=0.2, high=0.5, relative=True, mask=None):
    ref, pred = _same_extents(ref, pred)
    er = np.stack([canny_edges(f, low, high, relative) for f in ref])
    ep = np.stack([canny_edges(f, low, high, relative) for f in pred])
    m = _region(mask, er.shape)
    if m is not None:
        er, ep = er & m, ep & m
    tp = int(np.sum(er & ep))
    return tp, int(np.sum(~er & ep)), int(np.sum(er & ~ep))


def f1_from_counts(tp, fp, fn):
    if tp + fn == 0:
        raise UndefinedMetricError("reference has no edge pixels")
    if tp == 0:
        return 0.0
    precision = tp / (tp + fp)
    recall = tp / (tp + fn)
    return 2 * precision * recall / (precision + recall)


def edge_f1(ref, pred, low=0.2, high=0.5, relative=True, mask=None):
    """Pixel-exact F1 of Canny edges (pred against ref), counts pooled over the video."""
    return f1_from_counts(*edge_counts(ref, pred, low, high, relative, mask))


def depth_sirmse(a, b, mask=None):
    """Scale-invariant RMSE: std of per-pixel log-depth differences."""
    a, b = _same_extents(a, b)
    if np.any(a <= 0) or np.any(b <= 0):
        raise DomainError("depths must be strictly positive")
    d = np.log(b) - np.log(a)
    m = _region(mask, d.shape)
    if m is not None:
        if not m.any():
            raise UndefinedMetricError("empty region mask")
        d = d[m]
    return float(np.sqrt(max(np.mean(d * d) - np.mean(d) ** 2, 0.0)))


def union_by_phrase(masks, phrases):
    out = {}
    for m, p in zip(masks, phrases):
        m = np.asarray(m, dtype=bool)
        out[p] = out[p] | m if p in out else m.copy()
    return out


def iou(a, b):
    union = np.logical_or(a, b).sum()
    return float(np.logical_and(a, b).sum() / union) if union else 0.0


def match_masks(ref, gen, min_iou=MIN_IOU):
    """Greedy one-to-one matching of phrase masks on descending IoU.

    Only masks carrying the same phrase are candidates; pairs under
    ``min_iou`` are discarded. Returns [(phrase, iou), ...].
    """
    cands = sorted(((iou(ref[p], gen[p]), p) for p in ref if p in gen), key=lambda c: (-c[0], c[1]))
    used = set()
    out = []
    for score, p in cands:
        if p in used or score < min_iou:
            continue
        used.add(p)
        out.append((p, score))
    return out


def mask_miou(ref_masks, ref_phrases, gen_masks, gen_phrases, min_iou=MIN_IOU):
    ref = union_by_phrase(ref_masks, ref_phrases)
    gen = union_by_phrase(gen_masks, gen_phrases)
    pairs = match_masks(ref, gen, min_iou)
    if not pairs:
        raise UndefinedMetricError("no mask pair survives the IoU threshold")
    return float(np.mean([s for _, s in pairs]))


# --- color segmenter (stand-in perception model) ------------------------------

PHRASE_COLORS = {
    "red": (0.9, 0.1, 0.1), "green": (0.1, 0.75, 0.2), "blue": (0.1, 0.2, 0.9),
    "yellow": (0.95, 0.85, 0.1), "magenta": (0.85, 0.1, 0.85), "cyan": (0.1, 0.85, 0.85),
    "brown": (0.45, 0.28, 0.12),
}


def color_segment(video, phrases, tol=0.3):
    """Masks (n, T, Y, X) of pixels within ``tol`` of each phrase's color word.

    A pixel goes to the closest matching phrase color. Phrases without a
    known color word yield empty masks.
    """
    v = np.asarray(video, dtype=np.float64)
    dists = []
    for p in phrases:
        color = next((PHRASE_COLORS[w] for w in p.lower().split() if w in PHRASE_COLORS), None)
        if color is None:
            dists.append(np.full(v.shape[:-1], np.inf))
        else:
            dists.append(np.linalg.norm(v - np.array(color), axis=-1))
    if not dists:
        return np.zeros((0,) + v.shape[:-1], dtype=bool)
    dists = np.stack(dists)
    best = np.argmin(dists, axis=0)
    return np.stack([(best == k) & (dists[k] < tol) for k in range(len(phrases))])


# --- diversity -------------------------------------------------------------------

class RandomConvFeatures:
    """Frozen 3-layer random conv stack (3x3, stride 2, ReLU) used as a feature map."""

    def __init__(self, channels=(3, 8, 16, 16), seed=7):
        rng = RngStream(seed)
        self.kernels = [rng.split(i).normal((co, ci, 3, 3)).astype(np.float64) / math.sqrt(9 * ci)
                        for i, (ci, co) in enumerate(zip(channels[:-1], channels[1:]))]

    def __call__(self, frame):
        x = np.moveaxis(np.atleast_3d(np.asarray(frame, dtype=np.float64)), -1, 0)
        for k in self.kernels:
            pad = np.pad(x, ((0, 0), (1, 1), (1, 1)), mode="reflect")
            C, Y, X = x.shape
            out = np.zeros((k.shape[0], Y, X))
            for dy in range(3):
                for dx in range(3):
                    out += np.einsum("oc,cyx->oyx", k[:, :, dy, dx], pad[:, dy:dy + Y, dx:dx + X])
            x = np.maximum(out[:, ::2, ::2], 0.0)
        return x.ravel()


_FEATURES = None


def feature_distance(a, b):
    """Cosine complement of random conv features, averaged over frames."""
    global _FEATURES
    if _FEATURES is None:
        _FEATURES = RandomConvFeatures()
    a, b = _same_extents(a, b)
    out = []
    for fa, fb in zip(a, b):
        ua, ub = _FEATURES(fa), _FEATURES(fb)
        na, nb = np.linalg.norm(ua), np.linalg.norm(ub)
        if na == 0 and nb == 0:
            out.append(0.0)
        elif na == 0 or nb == 0:
            out.append(1.0)
        else:
            out.append(1.0 - float(ua @ ub) / (na * nb))
    return float(np.mean(out))


def mean_abs_distance(a, b):
    a, b = _same_extents(a, b)
    return float(np.mean(np.abs(a - b)))


def diversity_score(videos, distance=feature_distance):
    """Mean distance over all K(K-1)/2 unordered pairs."""
    videos = list(videos)
    if len(videos) < 2:
        raise InputError("diversity needs at least two videos")
    shape = np.shape(videos[0])
    if any(np.shape(v) != shape for v in videos):
        raise ShapeError("all videos must share extents")
    return float(np.mean([distance(videos[i], videos[j]) for i, j in combinations(range(len(videos)), 2)]))


# --- reprojection ----------------------------------------------------------------

def bilinear_sample(img, u, v):
    """Sample img (Y, X, C) at float pixel coordinates; points must lie in range."""
    Y, X = img.shape[:2]
    u0 = np.clip(np.floor(u).astype(np.int64), 0, X - 2) if X > 1 else np.zeros_like(u, dtype=np.int64)
    v0 = np.clip(np.floor(v).astype(np.int64), 0, Y - 2) if Y > 1 else np.zeros_like(v, dtype=np.int64)
    au = (u - u0)[:, None]
    av = (v - v0)[:, None]
    u1 = np.minimum(u0 + 1, X - 1)
    v1 = np.minimum(v0 + 1, Y - 1)
    return ((1 - av) * ((1 - au) * img[v0, u0] + au * img[v0, u1])
            + av * ((1 - au) * img[v1, u0] + au * img[v1, u1]))


def warp_points(depth, camera, boxes, f, g, fps=30.0):
    """Project frame f's pixels into frame g; returns (row, col, u, v, ok)."""
    Y, X = depth.shape
    vv, uu = np.indices((Y, X))
    rows, cols = vv.ravel(), uu.ravel()
    d = np.asarray(depth, dtype=np.float64).ravel()
    good = np.isfinite(d) & (d > 0)
    rows, cols, d = rows[good], cols[good], d[good]
    pts = camera.backproject(cols, rows, d, f)
    tf, tg = f / fps, g / fps
    for box in boxes:
        if not box.active(tf):
            continue
        inside = box.contains(pts, tf)
        if inside.any():
            pts[inside] = box.move_points(pts[inside], tf, tg)
    u, v, z = camera.project(pts, g)
    ok = (z > 0) & (u >= 0) & (u <= X - 1) & (v >= 0) & (v <= Y - 1)
    return rows, cols, u, v, ok


def reprojection_error(video, depth, camera, boxes=(), stride=3, fps=30.0):
    """Mean L1 between each retained frame and the next one sampled at warped positions."""
    v = np.asarray(video, dtype=np.float64)
    if v.ndim == 3:
        v = v[..., None]
    total, count = 0.0, 0
    for f in range(0, v.shape[0] - stride, stride):
        g = f + stride
        rows, cols, u, vv, ok = warp_points(depth[f], camera, boxes, f, g, fps)
        if not ok.any():
            continue
        warped = bilinear_sample(v[g], u[ok], vv[ok])
        total += float(np.abs(warped - v[f][rows[ok], cols[ok]]).sum())
        count += int(ok.sum()) * v.shape[-1]
    if count == 0:
        raise UndefinedMetricError("no validly warped pixels")
    return total / count


def pearson_corr(x, y):
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1 or len(x) < 2:
        raise InputError("pearson needs two equal-length sequences of at least 2 values")
    dx, dy = x - x.mean(), y - y.mean()
    sx, sy = math.sqrt(dx @ dx), math.sqrt(dy @ dy)
    if sx == 0 or sy == 0:
        raise UndefinedMetricError("zero variance")
    return float(np.clip((dx @ dy) / (sx * sy), -1.0, 1.0))


# --- reports -----------------------------------------------------------------------

@dataclass
class MetricReport:
    """Per-sample values (None = undefined) and their means per metric."""

    samples: list = field(default_factory=list)
    values: dict = field(default_factory=dict)

    def add(self, sample, **metrics):
        self.samples.append(sample)
        for k in set(self.values) | set(metrics):
            self.values.setdefault(k, [None] * (len(self.samples) - 1)).append(metrics.get(k))

    def mean(self, metric):
        vals = [v for v in self.values.get(metric, []) if v is not None]
        return float(np.mean(vals)) if vals else None

    def means(self):
        return {k: self.mean(k) for k in sorted(self.values)}

    def to_json(self):
        return json.dumps({"samples": self.samples, "values": self.values, "means": self.means()},
                          indent=1, sort_keys=True)

    def to_csv(self):
        buf = io.StringIO()
        keys = sorted(self.values)
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["sample"] + keys)
        for i, s in enumerate(self.samples):
            w.writerow([s] + ["" if self.values[k][i] is None else repr(self.values[k][i]) for k in keys])
        return buf.getvalue()

    def to_markdown(self, title="Alignment"):
        keys = sorted(self.values)
        lines = [f"| {title} | " + " | ".join(keys) + " |", "|---" * (len(keys) + 1) + "|"]
        cells = ["n/a" if self.mean(k) is None else f"{self.mean(k):.4f}" for k in keys]
        lines.append("| mean | " + " | ".join(cells) + " |")
        return "\n".join(lines) + "\n"


def gray_video(video):
    return np.stack([to_gray(f) for f in np.asarray(video)])
