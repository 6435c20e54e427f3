"""Multi-worker sampling and tiled upscaling.

Run: python demos/04_parallel_and_upscale.py   (under a minute)
"""
import numpy as np

from ctrlfuse.controlnet import create_branch
from ctrlfuse.corpus import random_scene_spec, render_clip
from ctrlfuse.denoiser import DiT, DiTConfig
from ctrlfuse.parinfer import available_cores, bench_scaling, qkv_bytes_per_layer
from ctrlfuse.tokenizer import Geometry, VideoTokenizer
from ctrlfuse.upscaler import GuidedPixelDenoiser, degrade, psnr, resize_cubic, upscale_video
from ctrlfuse.workflows import control_video

# %% Parallel sampling.
# Workers split the token sequence. Attention swaps sequence shards for head
# shards with an all-to-all. Guidance runs the two prompts on two halves of
# the workers. The sampled video must match the serial one.
tok = VideoTokenizer()
base = DiT.create(DiTConfig(), seed=0)
base.params.freeze()
geo = Geometry(9, 64, 64)
clip = render_clip(random_scene_spec(0, (9, 64, 64)))
branch = create_branch(base, "seg")
res = bench_scaling([1, 2, 4, 8], base, tok, geo, clip.prompt, steps=4, branches=[branch],
                    control_videos=[control_video(clip, "seg")])
print(res.to_csv())
print("max |video - serial video| per W:", res.max_abs_diff)
print(f"cores available: {available_cores()} (threads cannot speed anything up on one core)")
g = 4
print(f"Q/K/V bytes leaving a group of {g} per attention layer:",
      qkv_bytes_per_layer(geo.num_tokens, base.config.dim, g))

# %% Tiled upscaling.
# Degrade a clip to half resolution, then sample it back at full size on a
# 2x2 grid of overlapping tiles, averaging overlaps after every step.
video = clip.video[:3]
low = degrade(video, seed=0, scale=2)
cubic = np.clip(resize_cubic(low.astype(np.float64), 2), 0, 1)
print(f"low-res {low.shape}; PSNR of the cubic guide {psnr(video, cubic):.2f} dB")
# The toy denoiser samples around the cubic guide with spread tau, so a
# larger tau synthesizes more (here unstructured) detail and lowers PSNR.
for tau in (0.1, 0.03, 0.01):
    up = upscale_video(low, scale=2, grid=(2, 2), overlap=4, steps=10, seed=0,
                       denoiser=GuidedPixelDenoiser(tau=tau))
    print(f"tau {tau:<5} upscaled {up.shape}: PSNR {psnr(video, up):.2f} dB")
