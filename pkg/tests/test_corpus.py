import filecmp
import os

import numpy as np
import pytest

from ctrlfuse.corpus import (ObjectSpec, SceneSpec, load_clip, random_scene_spec, render_clip, save_clip,
                             synth_corpus)
from ctrlfuse.errors import InputError, MissingInputError
from ctrlfuse.extractors.geometry import backproject_depth, project_points


def one_object(velocity=(0, 0), T=9):
    return SceneSpec((T, 32, 32), [ObjectSpec(1, "red box", (0.9, 0.1, 0.1), (8, 6), (10, 4), velocity, 3.0)])


def test_static_rectangle_is_constant():
    c = render_clip(one_object())
    assert np.all(c.masks[0] == c.masks[0, :1])
    assert np.all(c.depth == c.depth[:1])
    assert c.masks[0, 0].sum() == 48
    assert np.all(c.depth[0][c.masks[0, 0]] == 3.0)


def test_moving_rectangle_centroid_advances_one_pixel():
    c = render_clip(one_object((0, 1)))
    cols = [np.nonzero(c.masks[0, t])[1].mean() for t in range(9)]
    assert np.allclose(np.diff(cols), 1.0)
    rows = [np.nonzero(c.masks[0, t])[0].mean() for t in range(9)]
    assert np.allclose(np.diff(rows), 0.0)


def test_out_of_frame_and_bad_ids_rejected():
    with pytest.raises(InputError):
        one_object((0, 3))  # x = 4 + 3 * 8 + 6 > 32
    with pytest.raises(InputError):
        SceneSpec((1, 16, 16), [ObjectSpec(0, "a", (1, 1, 1), (2, 2), (0, 0))])
    with pytest.raises(InputError):
        SceneSpec((1, 16, 16), [ObjectSpec(1, "a", (1, 1, 1), (2, 2), (0, 0), depth=-1)])


def test_nearer_object_occludes():
    spec = SceneSpec((1, 32, 32), [ObjectSpec(1, "red box", (0.9, 0.1, 0.1), (10, 10), (5, 5), depth=3.0),
                                   ObjectSpec(2, "blue box", (0.1, 0.2, 0.9), (10, 10), (8, 8), depth=2.0)])
    c = render_clip(spec)
    assert not (c.masks[0] & c.masks[1]).any()
    assert c.masks[1, 0, 8:18, 8:18].all()
    assert np.allclose(c.video[0, 10, 10], (0.1, 0.2, 0.9))


def test_lidar_scans_reproduce_depth():
    c = render_clip(one_object((1, 0)))
    scan = c.scene.scans[0]
    d = project_points(scan.points, c.scene.camera, 0, (32, 32))
    hit = np.isfinite(d)
    assert hit.sum() == 16 * 16
    assert np.allclose(d[hit], c.depth[0][hit], atol=1e-4)
    assert set(np.unique(scan.ids)) == {0, 1}
    assert len(c.scene.boxes) == 1


def test_same_seed_gives_byte_identical_corpus(tmp_path):
    specs = [random_scene_spec(s, (9, 32, 32)) for s in range(3)]
    a = synth_corpus(specs, tmp_path / "a")
    b = synth_corpus([random_scene_spec(s, (9, 32, 32)) for s in range(3)], tmp_path / "b")
    for da, db in zip(a, b):
        names = sorted(os.listdir(da))
        assert names == sorted(os.listdir(db))
        _, mismatch, errors = filecmp.cmpfiles(da, db, names, shallow=False)
        assert not mismatch and not errors


def test_clip_round_trip(tmp_path):
    c = render_clip(random_scene_spec(4, (9, 32, 32)))
    save_clip(c, tmp_path / "c")
    back = load_clip(tmp_path / "c")
    assert np.array_equal(back.video, c.video) and np.array_equal(back.masks, c.masks)
    assert back.labels == c.labels and back.prompt == c.prompt and back.ids == c.ids
    os.remove(tmp_path / "c" / "depth.f32")
    with pytest.raises(MissingInputError):
        load_clip(tmp_path / "c")


def test_random_specs_valid_and_prompted():
    for s in range(30):
        spec = random_scene_spec(s)
        assert spec.prompt().startswith("a ")
        c = render_clip(spec)
        assert c.video.shape == (9, 64, 64, 3) and 0 <= c.video.min() and c.video.max() <= 1
        pts = backproject_depth(c.depth[0], c.scene.camera, 0)
        assert np.all(np.isfinite(pts))
