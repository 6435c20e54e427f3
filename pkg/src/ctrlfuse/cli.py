"""Command line: ``ctrlfuse <command> --config run.json --out DIR [inputs]``.

Numeric knobs live in the JSON config (closed schemas, defaults filled in);
flags pick files. ``upscale`` and ``bench`` also accept their knobs as flags,
which override the config. Every run writes ``provenance.json`` next to its
outputs.
"""
from __future__ import annotations

import argparse
import copy
import hashlib
import json
import os
import subprocess
import sys
import time
from importlib import metadata

import jsonschema
import numpy as np

from .errors import ConfigError, CtrlFuseError, InputError, MissingInputError

COMMANDS = ("synth", "extract", "train-base", "train-branch", "generate", "weightmap", "upscale", "eval", "bench")

_NUM = {"type": "number"}
_POS = {"type": "number", "exclusiveMinimum": 0}
_INT = {"type": "integer", "minimum": 0}
_PINT = {"type": "integer", "minimum": 1}


def _obj(props, required=()):
    return {"type": "object", "properties": props, "additionalProperties": False, "required": list(required)}


_BLUR = _obj({"sigma_space": _POS, "sigma_range": _POS})
_CANNY = _obj({"low": {"type": "number", "minimum": 0}, "high": {"type": "number", "minimum": 0},
               "relative": {"type": "boolean"}})
_EXTRACT = _obj({"blur": _BLUR, "canny": _CANNY, "seg_seed": _INT, "lidar_near": _POS})
_MODALITY = {"enum": ["vis", "edge", "depth", "seg", "lidar", "hdmap"]}
_MODEL = _obj({"num_blocks": _PINT, "num_heads": _PINT, "dim": _PINT, "latent_dim": _PINT,
               "text_dim": _PINT, "sigma_dim": _PINT, "vocab_size": _PINT, "mlp_ratio": _PINT,
               "sigma_data": _POS})
_RECIPE = {"oneOf": [
    {"enum": ["appearance-fg", "appearance-bg", "robotics-setting1", "robotics-setting2"]},
    {"type": "object", "additionalProperties": _obj({"fg": {"type": "number", "minimum": 0, "maximum": 1},
                                                      "bg": {"type": "number", "minimum": 0, "maximum": 1}})},
]}
_PAIR = {"type": "array", "items": _PINT, "minItems": 2, "maxItems": 2}

SCHEMAS = {
    "synth": _obj({"num_clips": _PINT, "extents": {"type": "array", "items": _PINT, "minItems": 3, "maxItems": 3},
                   "seed": _INT, "max_objects": _PINT, "table_prob": {"type": "number", "minimum": 0, "maximum": 1}}),
    "extract": _obj({"modalities": {"type": "array", "items": _MODALITY, "minItems": 1},
                     "blur": _BLUR, "canny": _CANNY, "seg_seed": _INT, "lidar_near": _POS}),
    "train-base": _obj({"steps": _PINT, "batch": _PINT, "lr": _POS, "seed": _INT, "model": _MODEL}),
    "train-branch": _obj({"base": {"type": "string"}, "modality": _MODALITY, "steps": _PINT, "batch": _PINT,
                          "lr": _POS, "seed": _INT, "augment": {"type": "boolean"}, "extract": _EXTRACT},
                         required=["base", "modality"]),
    "generate": _obj({
        "base": {"type": "string"},
        "branches": {"type": "array", "items": {"type": "string"}},
        "weights": _obj({"uniform": {"type": "number", "minimum": 0, "maximum": 1}, "recipe": _RECIPE,
                         "normalize": {"type": "boolean"}}),
        "schedule": _obj({"sigma_min": _POS, "sigma_max": _POS, "steps": _PINT, "rho": _POS}),
        "guidance": _obj({"scale": {"type": "number", "minimum": 0}, "negative_prompt": {"type": "string"}}),
        "seed": _INT, "clips": {"type": "array", "items": _INT}, "extract": _EXTRACT,
    }, required=["base"]),
    "weightmap": _obj({"recipe": _RECIPE, "normalize": {"type": "boolean"}}),
    "upscale": _obj({"grid": _PAIR, "overlap": _INT, "scale": {"enum": [2, 4]}, "steps": _PINT, "seed": _INT,
                     "tau": _POS, "radius": _INT, "sigma_max": _POS,
                     "degrade": {"oneOf": [{"type": "null"}, _obj({"blur_sigma": {"type": "number", "minimum": 0},
                                                                   "noise_sigma": {"type": "number", "minimum": 0},
                                                                   "quant_step": {"type": "number", "minimum": 0}})]}}),
    "eval": _obj({"blur": _BLUR, "canny": _CANNY, "fg_split": {"type": "boolean"}}),
    "bench": _obj({"workers": {"type": "array", "items": _PINT, "minItems": 1}, "steps": _PINT, "seed": _INT,
                   "extents": {"type": "array", "items": _PINT, "minItems": 3, "maxItems": 3},
                   "scale": {"type": "number", "minimum": 0}, "model": _MODEL, "branches": _INT}),
}

DEFAULTS = {
    "synth": {"num_clips": 8, "extents": [9, 64, 64], "seed": 0, "max_objects": 2, "table_prob": 0.3},
    "extract": {"modalities": ["vis", "edge", "depth", "seg", "lidar", "hdmap"],
                "blur": {"sigma_space": 2.0, "sigma_range": 0.1},
                "canny": {"low": 0.2, "high": 0.5, "relative": True}, "seg_seed": 0, "lidar_near": 1.0},
    "train-base": {"steps": 2000, "batch": 16, "lr": 1e-3, "seed": 0, "model": {}},
    "train-branch": {"steps": 1000, "batch": 8, "lr": 0.5, "seed": 0, "augment": True, "extract": {}},
    "generate": {"branches": [], "weights": {"uniform": 1.0, "normalize": True},
                 "schedule": {"sigma_min": 0.02, "sigma_max": 80.0, "steps": 20, "rho": 7.0},
                 "guidance": {"scale": 3.0, "negative_prompt": ""}, "seed": 0, "extract": {}},
    "weightmap": {"recipe": "appearance-fg", "normalize": True},
    "upscale": {"grid": [3, 3], "overlap": 4, "scale": 2, "steps": 10, "seed": 0, "tau": 0.1, "radius": 1,
                "sigma_max": 10.0, "degrade": {"blur_sigma": 1.0, "noise_sigma": 0.02, "quant_step": 0.05}},
    "eval": {"blur": {"sigma_space": 2.0, "sigma_range": 0.1},
             "canny": {"low": 0.2, "high": 0.5, "relative": True}, "fg_split": False},
    "bench": {"workers": [1, 2, 4, 8], "steps": 4, "seed": 0, "extents": [9, 128, 128], "scale": 1.5,
              "model": {}, "branches": 1},
}


def _merge(default, override):
    out = copy.deepcopy(default)
    for k, v in override.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict) and k not in ("recipe",):
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def validate_config(command, config):
    """Schema-check ``config`` (closed schema) and fill in defaults."""
    if command not in SCHEMAS:
        raise ConfigError(f"unknown command {command!r}; choose from {COMMANDS}")
    try:
        jsonschema.validate(config, SCHEMAS[command])
    except jsonschema.ValidationError as exc:
        pointer = "/" + "/".join(str(p) for p in exc.absolute_path)
        raise ConfigError(f"{command} config {pointer}: {exc.message}") from None
    return _merge(DEFAULTS[command], config)


def _code_version():
    try:
        version = metadata.version("ctrlfuse")
    except metadata.PackageNotFoundError:
        version = "unknown"
    try:
        here = os.path.dirname(os.path.abspath(__file__))
        rev = subprocess.run(["git", "-C", here, "rev-parse", "--short", "HEAD"], capture_output=True,
                             text=True, timeout=5).stdout.strip()
    except (OSError, subprocess.SubprocessError):
        rev = ""
    return f"{version}+{rev}" if rev else version


def config_hash(config):
    return hashlib.sha256(json.dumps(config, sort_keys=True).encode()).hexdigest()


def write_provenance(out_dir, command, config, inputs):
    seeds = {k: v for k, v in config.items() if "seed" in k}
    record = {"command": command, "config": config, "config_sha256": config_hash(config), "seeds": seeds,
              "inputs": inputs, "code_version": _code_version(),
              "created": time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime())}
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "provenance.json"), "w") as fh:
        json.dump(record, fh, indent=1, sort_keys=True)
    return record


def _need(path, what):
    if not path:
        raise InputError(f"{what} path is required")
    if not os.path.exists(path):
        raise MissingInputError(f"{what} not found: {path}")
    return path


def _write_json(path, obj):
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=1, sort_keys=True)


# --- command bodies -------------------------------------------------------------------

def _synth(cfg, paths):
    from .corpus import random_scene_spec, synth_corpus
    specs = [random_scene_spec(cfg["seed"] + k, tuple(cfg["extents"]), cfg["max_objects"], cfg["table_prob"])
             for k in range(cfg["num_clips"])]
    dirs = synth_corpus(specs, paths["out"])
    return {"clips": [os.path.basename(d) for d in dirs]}


def _load_clips(corpus):
    from .corpus import list_clips, load_clip
    dirs = list_clips(_need(corpus, "corpus"))
    return dirs, [load_clip(d) for d in dirs]


def _extract(cfg, paths):
    from .numerics import save_tensor
    from .workflows import control_video
    dirs, clips = _load_clips(paths["corpus"])
    written = []
    for d, clip in zip(dirs, clips):
        out = os.path.join(paths["out"], os.path.basename(d))
        os.makedirs(out, exist_ok=True)
        for m in cfg["modalities"]:
            f = os.path.join(out, f"control_{m}.f32")
            save_tensor(f, control_video(clip, m, cfg))
            written.append(os.path.relpath(f, paths["out"]))
    return {"files": written}


def _train_base(cfg, paths):
    from .denoiser import DiTConfig, save_dit
    from .tokenizer import VideoTokenizer
    from .workflows import pretrain_base
    _, clips = _load_clips(paths["corpus"])
    tok = VideoTokenizer()
    losses = []
    base = pretrain_base(clips, tok, cfg["steps"], cfg["batch"], cfg["lr"], cfg["seed"],
                         DiTConfig(**{"latent_dim": tok.latent_dim, **cfg["model"]}),
                         log=lambda i, v: losses.append([i, v]))
    save_dit(base, paths["out"])
    _write_json(os.path.join(paths["out"], "losses.json"), losses)
    return {"checksum": base.params.checksum()}


def _train_branch(cfg, paths):
    from .denoiser import load_dit
    from .tokenizer import VideoTokenizer
    from .workflows import train_branch
    _, clips = _load_clips(paths["corpus"])
    base = load_dit(_need(cfg["base"], "base checkpoint"))
    base.params.freeze()
    before = base.params.checksum()
    branch, losses = train_branch(base, clips, VideoTokenizer(), cfg["modality"], cfg["steps"], cfg["batch"],
                                  cfg["lr"], cfg["seed"], cfg["augment"], cfg["extract"] or None)
    if base.params.checksum() != before:
        raise CtrlFuseError("base parameters changed during branch training")
    branch.save(paths["out"])
    _write_json(os.path.join(paths["out"], "losses.json"), losses)
    return {"base_checksum": before, "final_loss": losses[-1]}


def _generation_map(cfg, clip, modalities):
    from .controlnet import ControlMap
    from .weightmaps import RegionLabeling, WeightRecipe, build_control_map, recipe_presets
    wc = cfg["weights"]
    if "recipe" in wc:
        r = wc["recipe"]
        recipe = recipe_presets(r) if isinstance(r, str) else WeightRecipe.from_config(r)
        full = build_control_map(RegionLabeling(clip.masks, clip.ids, clip.labels), recipe,
                                 normalize=wc.get("normalize", True))
        missing = [m for m in modalities if m not in full.modalities]
        if missing:
            raise ConfigError(f"recipe has no weights for branch modalities {missing}")
        return full.select(modalities)
    return ControlMap.uniform(modalities, *clip.video.shape[:3], value=wc.get("uniform", 1.0))


def _generate(cfg, paths):
    from .controlnet import load_branches
    from .denoiser import load_dit
    from .diffusion import GuidanceConfig, NoiseSchedule
    from .numerics import save_tensor
    from .tokenizer import VideoTokenizer
    from .workflows import generate_clip
    dirs, clips = _load_clips(paths["corpus"])
    base = load_dit(_need(cfg["base"], "base checkpoint"))
    branches = load_branches([_need(p, "branch checkpoint") for p in cfg["branches"]])
    schedule = NoiseSchedule(**cfg["schedule"])
    guidance = GuidanceConfig(**cfg["guidance"])
    tok = VideoTokenizer(base.config.latent_dim)
    picks = cfg.get("clips") or list(range(len(clips)))
    done = []
    for k in picks:
        if not 0 <= k < len(clips):
            raise ConfigError(f"/clips: index {k} out of range")
        clip = clips[k]
        w = _generation_map(cfg, clip, [b.modality for b in branches]) if branches else None
        video = generate_clip(base, tok, clip, branches, w, cfg["seed"] + k, schedule, guidance,
                              cfg["extract"] or None)
        out = os.path.join(paths["out"], os.path.basename(dirs[k]))
        os.makedirs(out, exist_ok=True)
        save_tensor(os.path.join(out, "video.f32"), video)
        done.append(os.path.basename(dirs[k]))
    mode = "controlled" if branches else "base model (no branches configured)"
    return {"clips": done, "mode": mode}


def _weightmap(cfg, paths):
    from .corpus import load_clip
    from .numerics import save_tensor
    from .weightmaps import RegionLabeling, WeightRecipe, build_control_maps, load_labels, recipe_presets
    clip_dir = _need(paths.get("clip"), "clip directory")
    clip = load_clip(clip_dir)
    labels_path = paths.get("labels") or os.path.join(clip_dir, "labels.json")
    labeling = RegionLabeling(clip.masks, clip.ids, load_labels(_need(labels_path, "labels file")))
    r = cfg["recipe"]
    recipe = recipe_presets(r) if isinstance(r, str) else WeightRecipe.from_config(r)
    raw, norm = build_control_maps(labeling, recipe)
    os.makedirs(paths["out"], exist_ok=True)
    save_tensor(os.path.join(paths["out"], "map_raw.f32"), raw.weights)
    save_tensor(os.path.join(paths["out"], "map.f32"), norm.weights if cfg["normalize"] else raw.weights)
    _write_json(os.path.join(paths["out"], "map.json"), {"modalities": list(raw.modalities),
                                                         "recipe": recipe.to_config(),
                                                         "normalized": cfg["normalize"]})
    return {"modalities": list(raw.modalities)}


def _upscale(cfg, paths):
    from .numerics import load_tensor, save_tensor
    from .upscaler import GuidedPixelDenoiser, degrade, upscale_video
    video = load_tensor(_need(paths.get("input"), "input video"))
    low = degrade(video, cfg["seed"], cfg["scale"], **cfg["degrade"]) if cfg["degrade"] else video
    out = upscale_video(low, cfg["scale"], tuple(cfg["grid"]), cfg["overlap"], cfg["steps"], cfg["seed"],
                        GuidedPixelDenoiser(cfg["tau"], cfg["radius"]), cfg["sigma_max"])
    os.makedirs(paths["out"], exist_ok=True)
    save_tensor(os.path.join(paths["out"], "low.f32"), low)
    save_tensor(os.path.join(paths["out"], "upscaled.f32"), out)
    return {"low_shape": list(low.shape), "out_shape": list(out.shape)}


def _eval(cfg, paths):
    from .numerics import load_tensor
    from .workflows import evaluate
    dirs, clips = _load_clips(paths["corpus"])
    gen_dir = _need(paths.get("generated"), "generated directory")
    names, refs, vids = [], [], []
    for d, clip in zip(dirs, clips):
        f = os.path.join(gen_dir, os.path.basename(d), "video.f32")
        if os.path.exists(f):
            names.append(os.path.basename(d))
            refs.append(clip)
            vids.append(load_tensor(f))
    if not names:
        raise MissingInputError(f"no generated videos under {gen_dir}")
    report = evaluate(refs, vids, names, {"blur": cfg["blur"], "canny": cfg["canny"]}, cfg["fg_split"])
    os.makedirs(paths["out"], exist_ok=True)
    with open(os.path.join(paths["out"], "report.json"), "w") as fh:
        fh.write(report.to_json())
    with open(os.path.join(paths["out"], "report.csv"), "w") as fh:
        fh.write(report.to_csv())
    with open(os.path.join(paths["out"], "report.md"), "w") as fh:
        fh.write(report.to_markdown())
    return {"means": report.means()}


def _bench(cfg, paths):
    from .controlnet import create_branch
    from .corpus import random_scene_spec, render_clip
    from .denoiser import DiT, DiTConfig
    from .parinfer import available_cores, bench_scaling
    from .tokenizer import Geometry, VideoTokenizer
    from .workflows import control_video
    tok = VideoTokenizer()
    base = DiT.create(DiTConfig(**{"latent_dim": tok.latent_dim, **cfg["model"]}), seed=cfg["seed"])
    base.params.freeze()
    geometry = Geometry(*cfg["extents"])
    clip = render_clip(random_scene_spec(cfg["seed"], tuple(cfg["extents"])))
    mods = ["seg", "depth", "edge", "vis"][:cfg["branches"]]
    branches = [create_branch(base, m, seed=cfg["seed"] + i) for i, m in enumerate(mods)]
    controls = [control_video(clip, m) for m in mods]
    res = bench_scaling(cfg["workers"], base, tok, geometry, clip.prompt, "", cfg["steps"], cfg["scale"],
                        cfg["seed"], branches, controls)
    os.makedirs(paths["out"], exist_ok=True)
    with open(os.path.join(paths["out"], "bench.csv"), "w") as fh:
        fh.write(res.to_csv())
    sd, se = res.speedups()
    summary = {"workers": res.workers, "diffusion_s": res.diffusion, "end_to_end_s": res.end_to_end,
               "speedup_diffusion": sd, "speedup_end_to_end": se, "max_abs_diff": res.max_abs_diff,
               "cores": available_cores()}
    _write_json(os.path.join(paths["out"], "bench.json"), summary)
    return summary


RUNNERS = {"synth": _synth, "extract": _extract, "train-base": _train_base, "train-branch": _train_branch,
           "generate": _generate, "weightmap": _weightmap, "upscale": _upscale, "eval": _eval, "bench": _bench}


def run_pipeline(command, config, paths):
    """Validate ``config``, run ``command`` and write provenance; returns (status, summary)."""
    cfg = validate_config(command, config or {})
    if not paths.get("out"):
        raise InputError("an output directory (--out) is required")
    summary = RUNNERS[command](cfg, paths)
    write_provenance(paths["out"], command, cfg, {k: v for k, v in paths.items() if k != "out" and v})
    return 0, summary


def _parse_grid(text):
    try:
        r, c = text.lower().replace("×", "x").split("x")
        return [int(r), int(c)]
    except ValueError:
        raise argparse.ArgumentTypeError(f"grid must look like 3x3, got {text!r}") from None


def build_parser():
    ap = argparse.ArgumentParser(prog="ctrlfuse", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="JSON config file (defaults apply when omitted)")
        p.add_argument("--out", required=True, help="output directory")
        if name in ("extract", "train-base", "train-branch", "generate", "eval"):
            p.add_argument("--corpus", required=True, help="corpus directory written by synth")
        if name == "eval":
            p.add_argument("--generated", required=True, help="directory of generated clip videos")
        if name == "weightmap":
            p.add_argument("--clip", required=True, help="clip directory with masks")
            p.add_argument("--labels", help="labels JSON {object_id: fg|bg}; defaults to the clip's")
        if name == "upscale":
            p.add_argument("--input", required=True, help="video tensor file (T, Y, X, 3)")
            p.add_argument("--grid", type=_parse_grid)
            p.add_argument("--overlap", type=int)
            p.add_argument("--scale", type=int, choices=(2, 4))
            p.add_argument("--steps", type=int)
            p.add_argument("--seed", type=int)
        if name == "bench":
            p.add_argument("--workers", type=lambda s: [int(v) for v in s.split(",")])
            p.add_argument("--steps", type=int)
            p.add_argument("--seed", type=int)
    return ap


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        config = {}
        if args.config:
            with open(_need(args.config, "config file")) as fh:
                config = json.load(fh)
        for key in ("grid", "overlap", "scale", "steps", "seed", "workers"):
            val = getattr(args, key, None)
            if val is not None:
                config[key] = val
        paths = {k: getattr(args, k, None) for k in ("out", "corpus", "generated", "clip", "labels", "input")}
        status, summary = run_pipeline(args.command, config, paths)
    except json.JSONDecodeError as exc:
        print(f"ctrlfuse: config is not valid JSON: {exc}", file=sys.stderr)
        return 2
    except ConfigError as exc:
        print(f"ctrlfuse: config error: {exc}", file=sys.stderr)
        return 2
    except MissingInputError as exc:
        print(f"ctrlfuse: I/O error: {exc}", file=sys.stderr)
        return 3
    except CtrlFuseError as exc:
        print(f"ctrlfuse: {exc}", file=sys.stderr)
        return 1
    print(json.dumps(summary, default=_jsonable, sort_keys=True))
    return status


def _jsonable(o):
    if isinstance(o, np.generic):
        return o.item()
    raise TypeError(type(o).__name__)


if __name__ == "__main__":
    sys.exit(main())
