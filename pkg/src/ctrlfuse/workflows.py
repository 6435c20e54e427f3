"""Training, generation and evaluation loops over the synthetic corpus.

These tie the modules together for the command line and the acceptance
suite. Depth and segmentation of generated videos use simple deterministic
stand-ins (a luma-based pseudo depth and a phrase-color segmenter) applied
identically to reference and generated videos.
"""
from __future__ import annotations

import numpy as np
from scipy import ndimage

from .controlnet import ControlBranch, ControlMap, create_branch
from .corpus import Clip
from .denoiser import DiT, DiTConfig
from .diffusion import GuidanceConfig, NoiseSchedule, TrainBatch, sample_video, train_base_step, train_branch_step
from .errors import ConfigError, UndefinedMetricError
from .extractors import (blur_video, depth_normalize, edge_video, hdmap_rasterize, lidar_project,
                         sample_blur_params, sample_canny_thresholds, seg_recolor)
from .metrics import MetricReport, blur_ssim, color_segment, depth_sirmse, edge_f1, mask_miou
from .numerics import RngStream
from .params import AdamState
from .tokenizer import Geometry, VideoTokenizer, as_rgb

CONTROL_MODALITIES = ("vis", "edge", "depth", "seg", "lidar", "hdmap")

DEFAULT_EXTRACT = {
    "blur": {"sigma_space": 2.0, "sigma_range": 0.1},
    "canny": {"low": 0.2, "high": 0.5, "relative": True},
    "seg_seed": 0,
    "lidar_near": 1.0,
}


def control_video(clip: Clip, modality, params=None, rng: RngStream | None = None):
    """Control video (T, Y, X, 3) of one modality; ``rng`` draws augmentation parameters."""
    p = {**DEFAULT_EXTRACT, **(params or {})}
    T, Y, X = clip.video.shape[:3]
    sc = clip.scene
    if modality == "vis":
        ss, sr = sample_blur_params(rng) if rng else (p["blur"]["sigma_space"], p["blur"]["sigma_range"])
        return blur_video(clip.video, ss, sr)
    if modality == "edge":
        if rng:
            low, high = sample_canny_thresholds(rng)
            return as_rgb(edge_video(clip.video, low, high, relative=True))
        c = p["canny"]
        return as_rgb(edge_video(clip.video, c["low"], c["high"], c["relative"]))
    if modality == "depth":
        return as_rgb(depth_normalize(clip.depth))
    if modality == "seg":
        seed = int(rng.integers(0, 1 << 31)) if rng else p["seg_seed"]
        return seg_recolor(clip.masks, clip.ids, seed)
    if modality == "lidar":
        return as_rgb(lidar_project(sc.scans, sc.boxes, sc.camera, T, (Y, X), sc.fps, p["lidar_near"]))
    if modality == "hdmap":
        return hdmap_rasterize(sc.elements, sc.boxes, sc.camera, T, (Y, X), sc.fps)
    raise ConfigError(f"unknown modality {modality!r}; choose from {CONTROL_MODALITIES}")


def clip_tokens(tokenizer: VideoTokenizer, clips):
    return np.stack([tokenizer.tokenize(c.video).flat() for c in clips])


def pretrain_base(clips, tokenizer: VideoTokenizer, steps=2000, batch=16, lr=1e-3, seed=0,
                  config: DiTConfig | None = None, log=None):
    """Base denoiser trained with Adam; returned frozen."""
    geometry = Geometry(*clips[0].video.shape[:3])
    base = DiT.create(config or DiTConfig(latent_dim=tokenizer.latent_dim), seed=seed)
    toks = clip_tokens(tokenizer, clips)
    prompts = [c.prompt for c in clips]
    rng = RngStream(seed).split(1)
    state = AdamState()
    for i in range(steps):
        idx = rng.integers(0, len(clips), shape=batch)
        b = TrainBatch(toks[idx], None, [prompts[j] for j in idx], geometry.latent)
        loss = train_base_step(base, b, rng, lr=lr, adam=state)
        if log and (i % 100 == 0 or i == steps - 1):
            log(i, loss)
    base.params.freeze()
    return base


def train_branch(base: DiT, clips, tokenizer: VideoTokenizer, modality, steps=1000, batch=8, lr=0.5,
                 seed=0, augment=True, extract=None, log=None, branch: ControlBranch | None = None):
    """Plain-SGD branch training on random clip batches; the base stays frozen."""
    geometry = Geometry(*clips[0].video.shape[:3])
    branch = branch or create_branch(base, modality, seed=seed)
    toks = clip_tokens(tokenizer, clips)
    fixed = None
    if not augment or modality not in ("vis", "edge", "seg"):
        fixed = np.stack([tokenizer.tokenize(control_video(c, modality, extract)).flat() for c in clips])
    rng = RngStream(seed).split(2)
    losses = []
    for i in range(steps):
        idx = rng.integers(0, len(clips), shape=batch)
        if fixed is None:
            ctl = np.stack([tokenizer.tokenize(control_video(clips[j], modality, extract, rng)).flat()
                            for j in idx])
        else:
            ctl = fixed[idx]
        b = TrainBatch(toks[idx], ctl, [clips[j].prompt for j in idx], geometry.latent)
        losses.append(train_branch_step(branch, base, b, rng, lr=lr))
        if log and (i % 100 == 0 or i == steps - 1):
            log(i, losses[-1])
    return branch, losses


def generate_clip(base: DiT, tokenizer: VideoTokenizer, clip: Clip, branches=(), w=None, seed=0,
                  schedule=NoiseSchedule(), guidance=GuidanceConfig(), extract=None):
    """Sample a video for ``clip``'s prompt, controlled by its extracted control videos."""
    geometry = Geometry(*clip.video.shape[:3])
    branches = list(branches)
    controls = [tokenizer.tokenize(control_video(clip, b.modality, extract)).flat() for b in branches]
    if branches and w is None:
        w = ControlMap.uniform([b.modality for b in branches], *clip.video.shape[:3])
    return sample_video(base, tokenizer, geometry, schedule, guidance, clip.prompt, seed,
                        branches, controls, w)


# --- perception stand-ins and evaluation ---------------------------------------------

def pseudo_depth(video):
    """Deterministic depth proxy: smoothed inverse luma (brighter = nearer)."""
    v = np.asarray(video, dtype=np.float64)
    luma = v @ np.array([0.299, 0.587, 0.114])
    luma = ndimage.gaussian_filter(luma, (0, 1.0, 1.0), mode="reflect")
    return 1.0 / (0.1 + np.clip(luma, 0.0, 1.0))


def clip_miou(clip: Clip, video):
    """Mask mIoU between phrase-color segmentations of the reference and a video; None if absent."""
    ref = color_segment(clip.video, clip.phrases)
    gen = color_segment(video, clip.phrases)
    try:
        return mask_miou(ref, clip.phrases, gen, clip.phrases)
    except UndefinedMetricError:
        return None


def _safe(fn, *a, **k):
    try:
        return fn(*a, **k)
    except UndefinedMetricError:
        return None


def foreground_mask(clip: Clip):
    fg = [k for k, i in enumerate(clip.ids) if clip.labels[int(i)] == "fg"]
    if not fg:
        return np.zeros(clip.video.shape[:3], dtype=bool)
    return np.any(clip.masks[fg], axis=0)


def evaluate_clip(clip: Clip, video, params=None, fg_split=False):
    """Alignment metrics of ``video`` against ``clip``'s reference video."""
    p = {**DEFAULT_EXTRACT, **(params or {})}
    bl, cn = p["blur"], p["canny"]
    out = {
        "blur_ssim": blur_ssim(clip.video, video, bl["sigma_space"], bl["sigma_range"]),
        "edge_f1": _safe(edge_f1, clip.video, video, cn["low"], cn["high"], cn["relative"]),
        "depth_sirmse": depth_sirmse(pseudo_depth(clip.video), pseudo_depth(video)),
        "mask_miou": clip_miou(clip, video),
    }
    if fg_split:
        fg = foreground_mask(clip)
        for tag, m in (("fg", fg), ("bg", ~fg)):
            if not m.any():
                out[f"blur_ssim_{tag}"] = out[f"edge_f1_{tag}"] = out[f"depth_sirmse_{tag}"] = None
                continue
            out[f"blur_ssim_{tag}"] = blur_ssim(clip.video, video, bl["sigma_space"], bl["sigma_range"], mask=m)
            out[f"edge_f1_{tag}"] = _safe(edge_f1, clip.video, video, cn["low"], cn["high"], cn["relative"], mask=m)
            out[f"depth_sirmse_{tag}"] = depth_sirmse(pseudo_depth(clip.video), pseudo_depth(video), mask=m)
    return out


def evaluate(clips, videos, names=None, params=None, fg_split=False):
    report = MetricReport()
    for k, (clip, video) in enumerate(zip(clips, videos)):
        report.add(names[k] if names else f"clip_{k:04d}", **evaluate_clip(clip, video, params, fg_split))
    return report

