"""Synthetic ground-truth corpus: flat-colored moving rectangles over a floor.

Every clip carries exact per-pixel depth, visible object masks with caption
phrases, FG/BG labels, LiDAR-like scans (depth-image back-projection at
10 Hz) and a few map polylines, so the control extractors and the
evaluation metrics can run without external perception models.
"""
from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import InputError, MissingInputError
from .extractors.geometry import BoxTrack, CameraModel, LidarScan, MapElement, Scene
from .numerics import DTYPE, RngStream, load_tensor, save_tensor

FPS = 30.0
LIDAR_HZ = 10.0
LIDAR_STRIDE = 2  # back-project every other pixel

PALETTE = {
    "red": (0.9, 0.1, 0.1),
    "green": (0.1, 0.75, 0.2),
    "blue": (0.1, 0.2, 0.9),
    "yellow": (0.95, 0.85, 0.1),
    "magenta": (0.85, 0.1, 0.85),
    "cyan": (0.1, 0.85, 0.85),
}
TABLE_COLOR = (0.45, 0.28, 0.12)
FLOOR_NEAR, FLOOR_FAR = 5.0, 20.0


@dataclass
class ObjectSpec:
    obj_id: int
    phrase: str
    color: tuple
    size: tuple  # (h, w) pixels
    start: tuple  # (y, x) top-left at frame 0
    velocity: tuple = (0, 0)  # pixels per frame
    depth: float = 3.0
    label: str = "fg"

    def top_left(self, t):
        return self.start[0] + self.velocity[0] * t, self.start[1] + self.velocity[1] * t

    @property
    def moving(self):
        return tuple(self.velocity) != (0, 0)


@dataclass
class SceneSpec:
    extents: tuple  # (T, Y, X)
    objects: list = field(default_factory=list)
    floor: float = 0.5  # gray level
    focal: float | None = None
    seed: int = 0

    def __post_init__(self):
        T, Y, X = self.extents
        ids = [o.obj_id for o in self.objects]
        if len(set(ids)) != len(ids) or any(i <= 0 for i in ids):
            raise InputError("object ids must be unique positive integers")
        for o in self.objects:
            if o.depth <= 0:
                raise InputError(f"object {o.obj_id}: depth must be positive")
            for t in (0, T - 1):
                y, x = o.top_left(t)
                if y < 0 or x < 0 or y + o.size[0] > Y or x + o.size[1] > X:
                    raise InputError(f"object {o.obj_id} leaves the frame at t={t}")

    def camera(self):
        T, Y, X = self.extents
        f = float(self.focal or X)
        return CameraModel.static(f, f, X / 2, Y / 2, T)

    def prompt(self):
        names = [f"a {o.phrase}" for o in self.objects]
        tail = f" on a {'light' if self.floor > 0.5 else 'dark'} gray floor"
        return " and ".join(names) + tail if names else "an empty" + tail[3:]

    def to_dict(self):
        d = asdict(self)
        d["extents"] = list(self.extents)
        return d

    @classmethod
    def from_dict(cls, d):
        objs = [ObjectSpec(**{**o, "color": tuple(o["color"]), "size": tuple(o["size"]),
                              "start": tuple(o["start"]), "velocity": tuple(o["velocity"])})
                for o in d["objects"]]
        return cls(tuple(d["extents"]), objs, d["floor"], d.get("focal"), d.get("seed", 0))


def random_scene_spec(seed, extents=(9, 64, 64), max_objects=2, table_prob=0.3):
    """Random rectangles with integer velocities that stay inside the frame."""
    rng = RngStream(seed)
    T, Y, X = extents
    colors = list(PALETTE)
    n = int(rng.integers(1, max_objects + 1))
    picks = rng.integers(0, len(colors), shape=len(colors) * 4)
    chosen = list(dict.fromkeys(colors[int(i)] for i in picks))[:n]
    objs = []
    if rng.uniform() < table_prob:
        h = int(rng.integers(Y // 4, Y // 3 + 1))
        objs.append(ObjectSpec(1, "brown table", TABLE_COLOR, (h, X), (Y - h, 0), (0, 0), 4.5, "bg"))
    for k, cname in enumerate(chosen):
        h = int(rng.integers(Y // 4, Y // 2 + 1))
        w = int(rng.integers(X // 4, X // 2 + 1))
        vy, vx = (int(v) for v in rng.integers(-1, 2, shape=2))
        ys = sorted((0 - min(0, vy * (T - 1)), Y - h - max(0, vy * (T - 1))))
        xs = sorted((0 - min(0, vx * (T - 1)), X - w - max(0, vx * (T - 1))))
        y0 = int(rng.integers(ys[0], ys[1] + 1))
        x0 = int(rng.integers(xs[0], xs[1] + 1))
        depth = float(rng.uniform(None, 2.0, 4.0))
        objs.append(ObjectSpec(len(objs) + 1, f"{cname} box", PALETTE[cname], (h, w), (y0, x0),
                               (vy, vx), depth, "fg"))
    floor = float(rng.uniform(None, 0.3, 0.65))
    return SceneSpec(tuple(extents), objs, floor, None, seed)


def _floor_depth(Y):
    v = np.arange(Y, dtype=np.float64)
    return FLOOR_NEAR + (FLOOR_FAR - FLOOR_NEAR) * (Y - 1 - v) / max(Y - 1, 1)


def _object_cover(o: ObjectSpec, t, Y, X):
    """Pixels whose centers lie in the object's rectangle at (fractional) frame time t."""
    y0, x0 = o.top_left(t)
    rows = np.arange(Y)
    cols = np.arange(X)
    ry = (rows >= y0 - 1e-9) & (rows < y0 + o.size[0] - 1e-9)
    rx = (cols >= x0 - 1e-9) & (cols < x0 + o.size[1] - 1e-9)
    return ry[:, None] & rx[None, :]


def render_depth(spec: SceneSpec, t):
    """(depth (Y, X), owner ids (Y, X)) at frame time t; 0 = floor."""
    _, Y, X = spec.extents
    depth = np.repeat(_floor_depth(Y)[:, None], X, axis=1)
    owner = np.zeros((Y, X), dtype=np.int64)
    for o in sorted(spec.objects, key=lambda o: -o.depth):
        cov = _object_cover(o, t, Y, X) & (o.depth < depth)
        depth[cov] = o.depth
        owner[cov] = o.obj_id
    return depth, owner


@dataclass
class Clip:
    spec: SceneSpec
    video: np.ndarray  # (T, Y, X, 3)
    depth: np.ndarray  # (T, Y, X)
    masks: np.ndarray  # (n, T, Y, X) bool, visible parts
    ids: list
    phrases: list
    labels: dict  # id -> "fg" | "bg"
    prompt: str
    scene: Scene


def render_clip(spec: SceneSpec) -> Clip:
    T, Y, X = spec.extents
    video = np.empty((T, Y, X, 3), dtype=np.float64)
    depth = np.empty((T, Y, X), dtype=np.float64)
    ids = [o.obj_id for o in spec.objects]
    masks = np.zeros((len(ids), T, Y, X), dtype=bool)
    colors = {o.obj_id: np.array(o.color) for o in spec.objects}
    shade = np.linspace(-0.05, 0.05, Y)[:, None, None]
    for t in range(T):
        d, owner = render_depth(spec, t)
        depth[t] = d
        frame = np.broadcast_to(spec.floor + shade, (Y, X, 1)).repeat(3, axis=2).copy()
        for k, oid in enumerate(ids):
            masks[k, t] = owner == oid
            frame[masks[k, t]] = colors[oid]
        video[t] = frame
    return Clip(spec, video.astype(DTYPE), depth.astype(DTYPE), masks, ids,
                [o.phrase for o in spec.objects], {o.obj_id: o.label for o in spec.objects},
                spec.prompt(), build_scene(spec))


def build_scene(spec: SceneSpec) -> Scene:
    T, Y, X = spec.extents
    cam = spec.camera()
    t_end = (T - 1) / FPS
    scan_times = np.arange(0.0, t_end + 1.0 / LIDAR_HZ - 1e-9, 1.0 / LIDAR_HZ)
    vv, uu = np.mgrid[0:Y:LIDAR_STRIDE, 0:X:LIDAR_STRIDE]
    scans = []
    for ts in scan_times:
        d, owner = render_depth(spec, ts * FPS)
        pts = cam.backproject(uu.ravel(), vv.ravel(), d[vv, uu].ravel(), 0)
        moving = {o.obj_id for o in spec.objects if o.moving}
        oid = owner[vv, uu].ravel()
        ids = np.where(np.isin(oid, list(moving)), oid, 0)
        scans.append(LidarScan(float(ts), pts, ids))
    boxes = []
    key_t = np.append(np.arange(T) / FPS, scan_times[-1] + 1.0 / LIDAR_HZ)
    for o in spec.objects:
        if not o.moving:
            continue
        centers, sizes = [], []
        for t in key_t:
            y0, x0 = o.top_left(t * FPS)
            u = x0 + (o.size[1] - 1) / 2
            v = y0 + (o.size[0] - 1) / 2
            centers.append(cam.backproject(u, v, o.depth, 0))
            sizes.append([o.size[1] * o.depth / cam.fx, o.size[0] * o.depth / cam.fy, 0.5])
        boxes.append(BoxTrack(o.obj_id, key_t, centers, sizes, np.zeros(len(key_t)), "vehicle"))
    height = (Y / 2) * FLOOR_NEAR / cam.fy  # floor plane y under the camera
    elements = [MapElement("lane_line", [[-1.0, height, FLOOR_NEAR], [-1.0, height, FLOOR_FAR]]),
                MapElement("lane_line", [[1.0, height, FLOOR_NEAR], [1.0, height, FLOOR_FAR]]),
                MapElement("stop_line", [[-1.0, height, 8.0], [1.0, height, 8.0]])]
    return Scene(cam, FPS, scans, boxes, elements)


# --- on-disk corpus ------------------------------------------------------------

def save_clip(clip: Clip, directory):
    os.makedirs(directory, exist_ok=True)
    save_tensor(os.path.join(directory, "video.f32"), clip.video)
    save_tensor(os.path.join(directory, "depth.f32"), clip.depth)
    save_tensor(os.path.join(directory, "masks.f32"), clip.masks.astype(DTYPE))
    meta = {"ids": clip.ids, "phrases": clip.phrases, "prompt": clip.prompt, "spec": clip.spec.to_dict()}
    with open(os.path.join(directory, "meta.json"), "w") as fh:
        json.dump(meta, fh, indent=1, sort_keys=True)
    with open(os.path.join(directory, "labels.json"), "w") as fh:
        json.dump({str(k): v for k, v in clip.labels.items()}, fh, indent=1, sort_keys=True)
    clip.scene.save(os.path.join(directory, "scene.json"))


def load_clip(directory) -> Clip:
    try:
        with open(os.path.join(directory, "meta.json")) as fh:
            meta = json.load(fh)
        with open(os.path.join(directory, "labels.json")) as fh:
            labels = {int(k): v for k, v in json.load(fh).items()}
        video = load_tensor(os.path.join(directory, "video.f32"))
        depth = load_tensor(os.path.join(directory, "depth.f32"))
        masks = load_tensor(os.path.join(directory, "masks.f32")) > 0.5
        scene = Scene.load(os.path.join(directory, "scene.json"))
    except FileNotFoundError as exc:
        raise MissingInputError(f"incomplete clip directory {directory}: {exc.filename}") from exc
    return Clip(SceneSpec.from_dict(meta["spec"]), video, depth, masks, meta["ids"], meta["phrases"],
                labels, meta["prompt"], scene)


def synth_corpus(specs, out_dir):
    """Render and write every spec as ``clip_XXXX``; returns the clip directories."""
    os.makedirs(out_dir, exist_ok=True)
    dirs = []
    for k, spec in enumerate(specs):
        d = os.path.join(out_dir, f"clip_{k:04d}")
        save_clip(render_clip(spec), d)
        dirs.append(d)
    with open(os.path.join(out_dir, "corpus.json"), "w") as fh:
        json.dump({"clips": [os.path.basename(d) for d in dirs]}, fh, indent=1)
    return dirs


def list_clips(corpus_dir):
    index = os.path.join(corpus_dir, "corpus.json")
    if not os.path.exists(index):
        raise MissingInputError(f"{corpus_dir} has no corpus.json")
    with open(index) as fh:
        return [os.path.join(corpus_dir, c) for c in json.load(fh)["clips"]]
