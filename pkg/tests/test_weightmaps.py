import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from ctrlfuse.errors import ConfigError, InputError
from ctrlfuse.weightmaps import (RegionLabeling, WeightRecipe, build_control_map, build_control_maps, load_labels,
                                 recipe_presets)


def labeling(fg_ids=(1,), shape=(2, 8, 8)):
    masks = np.zeros((3,) + shape, bool)
    masks[0, :, :4, :4] = True
    masks[1, :, 4:, 4:] = True
    masks[2, :, :4, 2:6] = True  # overlaps object 1
    labels = {i: ("fg" if i in fg_ids else "bg") for i in (1, 2, 3)}
    return RegionLabeling(masks, [1, 2, 3], labels)


def at(cmap, t, y, x):
    return tuple(float(v) for v in cmap.weights[:, t, y, x])


def test_appearance_fg_recipe_values():
    cmap = build_control_map(labeling(), recipe_presets("appearance-fg"))
    assert cmap.modalities == ("vis", "edge", "depth", "seg")
    assert at(cmap, 0, 0, 0) == (0.5, 0.5, 0.0, 0.0)
    assert at(cmap, 1, 7, 0) == (0.0, 0.0, 0.5, 0.5)


def test_presets_match_their_definitions():
    r = recipe_presets("robotics-setting2").weights
    assert r["edge"] == (1.0, 0.0) and r["seg"] == (0.0, 1.0) and r["vis"] == r["depth"] == (0.0, 0.0)
    f = recipe_presets("appearance-fg").weights
    assert f == {"vis": (0.5, 0.0), "edge": (0.5, 0.0), "depth": (0.0, 0.5), "seg": (0.0, 0.5)}
    inv = recipe_presets("appearance-bg").weights
    assert inv == {"vis": (0.0, 0.5), "edge": (0.0, 0.5), "depth": (0.5, 0.0), "seg": (0.5, 0.0)}
    with pytest.raises(ConfigError):
        recipe_presets("nope")


def test_setting1_normalizes_fg_to_half():
    cmap = build_control_map(labeling(), recipe_presets("robotics-setting1"))
    w = dict(zip(cmap.modalities, at(cmap, 0, 0, 0)))
    assert w["edge"] == 0.5 and w["vis"] == 0.5 and w["seg"] == 0.0
    raw, _ = build_control_maps(labeling(), recipe_presets("robotics-setting1"))
    assert raw.weights[:, 0, 0, 0].sum() == 2.0


def test_empty_foreground_is_uniform_background():
    cmap = build_control_map(labeling(fg_ids=()), recipe_presets("appearance-fg"))
    assert np.all(cmap.weights[2:] == 0.5) and np.all(cmap.weights[:2] == 0.0)


def test_fg_wins_where_fg_and_bg_overlap():
    cmap = build_control_map(labeling(fg_ids=(1,)), recipe_presets("appearance-fg"))
    assert at(cmap, 0, 1, 3) == (0.5, 0.5, 0.0, 0.0)  # inside both 1 (fg) and 3 (bg)
    assert at(cmap, 0, 1, 5) == (0.0, 0.0, 0.5, 0.5)  # only in 3


recipes = st.dictionaries(st.sampled_from(["vis", "edge", "depth", "seg"]),
                          st.tuples(st.floats(0, 1), st.floats(0, 1)), min_size=1)


@given(recipes, st.sets(st.sampled_from([1, 2, 3])))
def test_maps_are_valid_and_piecewise_constant(weights, fg):
    lab = labeling(tuple(fg))
    cmap = build_control_map(lab, WeightRecipe(weights))
    w = cmap.weights.astype(np.float64)
    assert np.all(w >= 0) and np.all(w.sum(axis=0) <= 1 + 1e-6)
    key = lab.foreground()
    for val in (True, False):
        sel = w[:, key == val]
        if sel.size:
            assert np.all(sel == sel[:, :1])


def test_recipe_validation_and_labels(tmp_path):
    with pytest.raises(ConfigError):
        WeightRecipe({"vis": (1.5, 0)})
    rec = WeightRecipe.from_config({"vis": {"fg": 0.2}})
    assert rec.weights == {"vis": (0.2, 0.0)}
    assert WeightRecipe.from_config(rec.to_config()).weights == rec.weights
    p = tmp_path / "labels.json"
    p.write_text(json.dumps({"1": "fg", "2": "bg"}))
    assert load_labels(p) == {1: "fg", 2: "bg"}
    with pytest.raises(InputError):
        RegionLabeling(np.zeros((1, 1, 2, 2)), [1], {1: "maybe"})
    with pytest.raises(InputError):
        RegionLabeling(np.zeros((1, 1, 2, 2)), [1], {})
