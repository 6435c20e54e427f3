"""Spatiotemporal control maps from FG/BG region labelings and weight recipes."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np

from .controlnet import ControlMap, normalize_control_map
from .errors import ConfigError, InputError, ShapeError

MODALITIES = ("vis", "edge", "depth", "seg")
LABELS = ("fg", "bg")


@dataclass
class RegionLabeling:
    masks: np.ndarray  # (n, T, Y, X) bool
    ids: list
    labels: dict  # id -> "fg" | "bg"

    def __post_init__(self):
        self.masks = np.asarray(self.masks, dtype=bool)
        if self.masks.ndim != 4 or self.masks.shape[0] != len(self.ids):
            raise ShapeError(f"need one (T, Y, X) mask per id, got {self.masks.shape} for {len(self.ids)} ids")
        if len(set(self.ids)) != len(self.ids):
            raise InputError("object ids must be unique")
        self.labels = {int(k): v for k, v in self.labels.items()}
        missing = [i for i in self.ids if int(i) not in self.labels]
        if missing:
            raise InputError(f"objects without an FG/BG label: {missing}")
        bad = {k: v for k, v in self.labels.items() if v not in LABELS}
        if bad:
            raise InputError(f"labels must be 'fg' or 'bg', got {bad}")

    @property
    def extents(self):
        return self.masks.shape[1:]

    def foreground(self):
        """Union of FG masks; pixels outside every mask count as background."""
        sel = [k for k, i in enumerate(self.ids) if self.labels[int(i)] == "fg"]
        if not sel:
            return np.zeros(self.extents, dtype=bool)
        return np.any(self.masks[sel], axis=0)


@dataclass
class WeightRecipe:
    weights: dict  # modality -> (fg, bg)

    def __post_init__(self):
        clean = {}
        for m, pair in self.weights.items():
            fg, bg = (float(v) for v in pair)
            for v in (fg, bg):
                if not math.isfinite(v) or v < 0 or v > 1:
                    raise ConfigError(f"{m}: weights must lie in [0, 1], got {pair}")
            clean[m] = (fg, bg)
        self.weights = clean

    @property
    def modalities(self):
        return tuple(self.weights)

    @classmethod
    def from_config(cls, cfg):
        """From ``{modality: {"fg": x, "bg": y}}``."""
        try:
            return cls({m: (v.get("fg", 0.0), v.get("bg", 0.0)) for m, v in cfg.items()})
        except AttributeError as exc:
            raise ConfigError("recipe entries must be {'fg': x, 'bg': y} objects") from exc

    def to_config(self):
        return {m: {"fg": fg, "bg": bg} for m, (fg, bg) in self.weights.items()}


def _recipe(fg=None, bg=None):
    fg, bg = fg or {}, bg or {}
    return WeightRecipe({m: (fg.get(m, 0.0), bg.get(m, 0.0)) for m in MODALITIES})


PRESETS = {
    "appearance-fg": lambda: _recipe({"vis": 0.5, "edge": 0.5}, {"depth": 0.5, "seg": 0.5}),
    "appearance-bg": lambda: _recipe({"depth": 0.5, "seg": 0.5}, {"vis": 0.5, "edge": 0.5}),
    "robotics-setting1": lambda: _recipe({"edge": 1.0, "vis": 1.0}, {"seg": 1.0}),
    "robotics-setting2": lambda: _recipe({"edge": 1.0}, {"seg": 1.0}),
}


def recipe_presets(name) -> WeightRecipe:
    if name not in PRESETS:
        raise ConfigError(f"unknown recipe {name!r}; choose from {sorted(PRESETS)}")
    return PRESETS[name]()


def build_control_map(labeling: RegionLabeling, recipe: WeightRecipe, extents=None, normalize=True):
    """Per-modality weight maps: FG weight inside any FG mask, BG weight elsewhere."""
    if extents is not None and tuple(extents) != tuple(labeling.extents):
        raise ShapeError(f"labeling extents {labeling.extents} differ from {tuple(extents)}")
    fg = labeling.foreground()
    raw = np.stack([np.where(fg, w_fg, w_bg) for w_fg, w_bg in recipe.weights.values()])
    if normalize:
        raw = normalize_control_map(raw)
    return ControlMap(raw, recipe.modalities)


def build_control_maps(labeling: RegionLabeling, recipe: WeightRecipe):
    """(raw, normalized) maps; raw ones may sum above one at a site."""
    return build_control_map(labeling, recipe, normalize=False), build_control_map(labeling, recipe)


def load_labels(path):
    try:
        with open(path) as fh:
            data = json.load(fh)
    except FileNotFoundError as exc:
        raise InputError(f"labels file not found: {path}") from exc
    return {int(k): v for k, v in data.items()}
