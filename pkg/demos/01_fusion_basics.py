"""Fusing control branches into a frozen denoiser, one property at a time.

Run: python demos/01_fusion_basics.py   (a few seconds)
"""
import numpy as np

from ctrlfuse.controlnet import ControlMap, create_branch, fused_denoise, normalize_control_map
from ctrlfuse.corpus import random_scene_spec, render_clip
from ctrlfuse.denoiser import DiT, DiTConfig
from ctrlfuse.tokenizer import Geometry, VideoTokenizer, token_count
from ctrlfuse.workflows import control_video

# %% Token arithmetic.
# The tokenizer keeps frame 0 on its own and pools later frames in groups of
# eight, then pools 16x16 pixel blocks. A 121-frame 704x1280 video becomes
# 16 x 44 x 80 latent cells.
print("tokens for 121 x 704 x 1280:", token_count(121, 704, 1280))

# %% A toy clip and its control videos.
clip = render_clip(random_scene_spec(3, (9, 64, 64)))
geo = Geometry(9, 64, 64)
print("prompt:", clip.prompt, "| latent grid:", geo.latent, "| tokens:", geo.num_tokens)
tok = VideoTokenizer()
controls = {m: tok.tokenize(control_video(clip, m)).flat() for m in ("seg", "depth", "edge")}

# %% Fresh branches change nothing.
# Each branch copies the first base blocks and projects its activations back
# through zero-initialized layers, so before training the fused model is the
# base model exactly.
base = DiT.create(DiTConfig(), seed=0)
base.params.freeze()
branches = [create_branch(base, m, seed=i) for i, m in enumerate(controls)]
x = np.random.default_rng(0).standard_normal((geo.num_tokens, base.config.latent_dim)).astype(np.float32)
w = ControlMap.uniform(list(controls), 9, 64, 64)
fused = fused_denoise(base, x, 1.0, clip.prompt, branches, list(controls.values()), w, grid=geo).data
plain, _ = base.forward(x, 1.0, clip.prompt, grid=geo.latent)
print("fresh branches bit-identical to base:", np.array_equal(fused, plain.data))

# %% Weights above one are rescaled per site.
sites = np.array([[1.0, 0.3, 0.6], [1.0, 0.2, 0.6], [0.0, 0.1, 0.6]])
print("raw column sums:       ", sites.sum(axis=0))
print("normalized column sums:", normalize_control_map(sites).sum(axis=0))
