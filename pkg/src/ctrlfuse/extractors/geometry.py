"""Pinhole cameras, 3D box tracks, LiDAR projection and HD-map rasterization.

World frame: right-handed, x right, y down, z forward, meters. Box yaw is a
rotation about the world y axis. Camera poses map world to camera
coordinates (``p_cam = R p_world + t``); a pixel (row i, col j) has its center
at u = j, v = i.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from ..errors import DomainError, InputError
from ..numerics import DTYPE

NEAR_PLANE = 0.1
LIDAR_KERNEL = 4
LIDAR_NEIGHBORS = 2  # scans taken before and after the nearest one


@dataclass
class CameraModel:
    fx: float
    fy: float
    cx: float
    cy: float
    rotations: np.ndarray  # (T, 3, 3)
    translations: np.ndarray  # (T, 3)

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise DomainError("focal lengths must be positive")
        self.rotations = np.asarray(self.rotations, dtype=np.float64).reshape(-1, 3, 3)
        self.translations = np.asarray(self.translations, dtype=np.float64).reshape(-1, 3)
        if len(self.rotations) != len(self.translations):
            raise InputError("rotation and translation counts differ")
        eye = np.eye(3)
        for R in self.rotations:
            if np.abs(R @ R.T - eye).max() > 1e-6:
                raise DomainError("camera rotation is not orthonormal")

    @classmethod
    def static(cls, fx, fy, cx, cy, T, R=None, t=None):
        R = np.eye(3) if R is None else np.asarray(R, dtype=np.float64)
        t = np.zeros(3) if t is None else np.asarray(t, dtype=np.float64)
        return cls(fx, fy, cx, cy, np.repeat(R[None], T, 0), np.repeat(t[None], T, 0))

    @property
    def num_frames(self):
        return len(self.rotations)

    def pose(self, frame):
        if not 0 <= frame < self.num_frames:
            raise InputError(f"no camera pose for frame {frame}")
        return self.rotations[frame], self.translations[frame]

    def to_camera(self, points, frame):
        R, t = self.pose(frame)
        return np.asarray(points, dtype=np.float64) @ R.T + t

    def to_world(self, points_cam, frame):
        R, t = self.pose(frame)
        return (np.asarray(points_cam, dtype=np.float64) - t) @ R

    def project_camera(self, pc):
        """Camera-frame points -> (u, v, z)."""
        z = pc[..., 2]
        with np.errstate(divide="ignore", invalid="ignore"):
            u = self.fx * pc[..., 0] / z + self.cx
            v = self.fy * pc[..., 1] / z + self.cy
        return u, v, z

    def project(self, points, frame):
        return self.project_camera(self.to_camera(points, frame))

    def backproject(self, u, v, z, frame):
        x = (np.asarray(u, dtype=np.float64) - self.cx) * z / self.fx
        y = (np.asarray(v, dtype=np.float64) - self.cy) * z / self.fy
        return self.to_world(np.stack([x, y, np.broadcast_to(z, np.shape(x))], axis=-1), frame)

    def to_dict(self):
        return {"fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy,
                "poses": [{"R": R.tolist(), "t": t.tolist()}
                          for R, t in zip(self.rotations, self.translations)]}

    @classmethod
    def from_dict(cls, d):
        poses = d["poses"]
        return cls(d["fx"], d["fy"], d["cx"], d["cy"],
                   [p["R"] for p in poses], [p["t"] for p in poses])


def backproject_depth(depth, camera: CameraModel, frame, mask=None):
    """World points at every pixel center with finite positive depth."""
    d = np.asarray(depth, dtype=np.float64)
    vv, uu = np.indices(d.shape)
    ok = np.isfinite(d) & (d > 0)
    if mask is not None:
        ok &= mask
    return camera.backproject(uu[ok], vv[ok], d[ok], frame)


def _yaw_matrix(yaw):
    c, s = math.cos(yaw), math.sin(yaw)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


def _wrap_angle(a):
    return (a + math.pi) % (2 * math.pi) - math.pi


@dataclass
class BoxTrack:
    obj_id: int
    times: np.ndarray
    centers: np.ndarray  # (K, 3)
    sizes: np.ndarray  # (K, 3) extents along box x, y, z
    yaws: np.ndarray  # (K,)
    category: str = "vehicle"

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=np.float64)
        self.centers = np.asarray(self.centers, dtype=np.float64).reshape(-1, 3)
        self.sizes = np.asarray(self.sizes, dtype=np.float64).reshape(-1, 3)
        self.yaws = np.asarray(self.yaws, dtype=np.float64)
        if np.any(np.diff(self.times) <= 0):
            raise InputError(f"box {self.obj_id}: keyframe times must increase strictly")

    def pose_at(self, t):
        """(center, size, yaw) at time t; linear center/size, shortest-arc yaw, clamped."""
        ts = self.times
        if t <= ts[0] or len(ts) == 1:
            return self.centers[0], self.sizes[0], float(self.yaws[0])
        if t >= ts[-1]:
            return self.centers[-1], self.sizes[-1], float(self.yaws[-1])
        k = int(np.searchsorted(ts, t, side="right") - 1)
        a = (t - ts[k]) / (ts[k + 1] - ts[k])
        c = (1 - a) * self.centers[k] + a * self.centers[k + 1]
        s = (1 - a) * self.sizes[k] + a * self.sizes[k + 1]
        yaw = self.yaws[k] + a * _wrap_angle(self.yaws[k + 1] - self.yaws[k])
        return c, s, float(yaw)

    def active(self, t):
        return self.times[0] <= t <= self.times[-1]

    def move_points(self, points, t_from, t_to):
        c0, _, y0 = self.pose_at(t_from)
        c1, _, y1 = self.pose_at(t_to)
        local = (np.asarray(points, dtype=np.float64) - c0) @ _yaw_matrix(y0)
        return local @ _yaw_matrix(y1).T + c1

    def corners(self, t):
        c, s, yaw = self.pose_at(t)
        signs = np.array([[sx, sy, sz] for sx in (-1, 1) for sy in (-1, 1) for sz in (-1, 1)], dtype=np.float64)
        return (signs * s / 2) @ _yaw_matrix(yaw).T + c

    def contains(self, points, t):
        c, s, yaw = self.pose_at(t)
        local = (np.asarray(points, dtype=np.float64) - c) @ _yaw_matrix(yaw)
        return np.all(np.abs(local) <= s / 2 + 1e-9, axis=-1)

    def to_dict(self):
        return {"id": int(self.obj_id), "category": self.category,
                "keyframes": [{"t": float(t), "center": c.tolist(), "size": s.tolist(), "yaw": float(y)}
                              for t, c, s, y in zip(self.times, self.centers, self.sizes, self.yaws)]}

    @classmethod
    def from_dict(cls, d):
        kf = d["keyframes"]
        return cls(d["id"], [k["t"] for k in kf], [k["center"] for k in kf],
                   [k["size"] for k in kf], [k["yaw"] for k in kf], d.get("category", "vehicle"))


# 12 box edges as corner index pairs (corner index bits: x, y, z sign)
BOX_EDGES = [(a, b) for a in range(8) for b in range(a + 1, 8) if bin(a ^ b).count("1") == 1]


@dataclass
class LidarScan:
    timestamp: float
    points: np.ndarray  # (P, 3) world frame
    ids: np.ndarray = field(default=None)  # (P,), 0 = static

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        self.ids = np.zeros(len(self.points), dtype=np.int64) if self.ids is None else np.asarray(self.ids, dtype=np.int64)
        if not np.all(np.isfinite(self.points)):
            raise InputError("LiDAR points must be finite")

    def to_dict(self):
        return {"timestamp": self.timestamp, "points": self.points.tolist(), "ids": self.ids.tolist()}

    @classmethod
    def from_dict(cls, d):
        return cls(d["timestamp"], d["points"], d.get("ids"))


def project_points(points, camera: CameraModel, frame, shape):
    """Z-buffered depth image (inf where nothing projects)."""
    Y, X = shape
    depth = np.full((Y, X), np.inf)
    if len(points) == 0:
        return depth
    u, v, z = camera.project(points, frame)
    ok = z > NEAR_PLANE
    col = np.floor(u[ok] + 0.5).astype(np.int64)
    row = np.floor(v[ok] + 0.5).astype(np.int64)
    z = z[ok]
    inside = (row >= 0) & (row < Y) & (col >= 0) & (col < X)
    np.minimum.at(depth, (row[inside], col[inside]), z[inside])
    return depth


def fill_holes(depth, kernel=LIDAR_KERNEL):
    """Fill empty (inf) pixels with the minimum depth inside a kernel x kernel window."""
    filled = ndimage.minimum_filter(depth, size=kernel, mode="constant", cval=np.inf)
    return np.where(np.isfinite(depth), depth, filled)


def encode_inverse_depth(depth, near=1.0):
    """near / z clipped to [0, 1]; empty pixels map to 0."""
    with np.errstate(divide="ignore"):
        inv = np.where(np.isfinite(depth), near / depth, 0.0)
    return np.clip(inv, 0.0, 1.0)


def _scan_window(times, t, neighbors=LIDAR_NEIGHBORS):
    if len(times) == 0:
        raise InputError("no LiDAR scans")
    spacing = float(np.median(np.diff(times))) if len(times) > 1 else 0.1
    if t < times[0] - spacing or t > times[-1] + spacing:
        raise InputError(f"no LiDAR scan near frame time {t:.3f}s")
    k = int(np.argmin(np.abs(times - t)))
    idx = np.clip(np.arange(k - neighbors, k + neighbors + 1), 0, len(times) - 1)
    return sorted(set(idx.tolist()))


def lidar_depth_frames(scans, boxes, camera: CameraModel, T, shape, fps=30.0, t0=0.0):
    """Per-frame z-buffered depth from the nearest scan and its neighbours (before filling)."""
    times = np.array([s.timestamp for s in scans])
    tracks = {b.obj_id: b for b in boxes}
    frames = []
    for f in range(T):
        t = t0 + f / fps
        pts = []
        for k in _scan_window(times, t):
            scan = scans[k]
            static = scan.ids == 0
            pts.append(scan.points[static])
            for oid in np.unique(scan.ids[~static]):
                if oid not in tracks:
                    raise InputError(f"dynamic LiDAR points reference unknown box {oid}")
                sel = scan.ids == oid
                pts.append(tracks[oid].move_points(scan.points[sel], scan.timestamp, t))
        frames.append(project_points(np.concatenate(pts), camera, f, shape))
    return np.stack(frames)


def lidar_project(scans, boxes, camera: CameraModel, T, shape, fps=30.0, near=1.0, kernel=LIDAR_KERNEL, t0=0.0):
    """LiDAR control video (T, Y, X): inverse depth in [0, 1] after hole filling."""
    raw = lidar_depth_frames(scans, boxes, camera, T, shape, fps, t0)
    return np.stack([encode_inverse_depth(fill_holes(d, kernel), near) for d in raw]).astype(DTYPE)


# --- HD map ------------------------------------------------------------------

MAP_COLORS = {
    "lane_line": (1.0, 1.0, 1.0),
    "road_boundary": (1.0, 0.0, 0.0),
    "stop_line": (1.0, 1.0, 0.0),
    "pole": (0.5, 0.5, 0.5),
    "crosswalk": (0.0, 0.0, 1.0),
    "road_marking": (0.0, 1.0, 1.0),
    "traffic_light": (0.0, 1.0, 0.0),
    "traffic_sign": (1.0, 0.5, 0.0),
}
BOX_COLORS = {"vehicle": (1.0, 0.0, 1.0), "pedestrian": (0.0, 0.6, 1.0), "cyclist": (0.6, 1.0, 0.0)}


@dataclass
class MapElement:
    kind: str
    points: np.ndarray  # (P, 3) polyline vertices, world frame

    def __post_init__(self):
        if self.kind not in MAP_COLORS:
            raise InputError(f"unknown map element type {self.kind!r}")
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)

    def to_dict(self):
        return {"type": self.kind, "points": self.points.tolist()}

    @classmethod
    def from_dict(cls, d):
        return cls(d["type"], d["points"])


def _clip_near(a, b, near=NEAR_PLANE):
    """Clip camera-frame segment a-b to z >= near; None if fully behind."""
    za, zb = a[2], b[2]
    if za < near and zb < near:
        return None
    if za < near:
        a = a + (b - a) * (near - za) / (zb - za)
    elif zb < near:
        b = b + (a - b) * (near - zb) / (za - zb)
    return a, b


def _clip_rect(x0, y0, x1, y1, w, h):
    """Liang-Barsky clip of a 2D segment to [-0.5, w-0.5] x [-0.5, h-0.5]."""
    dx, dy = x1 - x0, y1 - y0
    t0, t1 = 0.0, 1.0
    for p, q in ((-dx, x0 + 0.5), (dx, w - 0.5 - x0), (-dy, y0 + 0.5), (dy, h - 0.5 - y0)):
        if p == 0:
            if q < 0:
                return None
            continue
        r = q / p
        if p < 0:
            t0 = max(t0, r)
        else:
            t1 = min(t1, r)
        if t0 > t1:
            return None
    return x0 + t0 * dx, y0 + t0 * dy, x0 + t1 * dx, y0 + t1 * dy


def raster_line(x0, y0, x1, y1):
    """Bresenham pixels (row, col) between rounded endpoints, inclusive."""
    c0, r0 = int(math.floor(x0 + 0.5)), int(math.floor(y0 + 0.5))
    c1, r1 = int(math.floor(x1 + 0.5)), int(math.floor(y1 + 0.5))
    dc, dr = abs(c1 - c0), -abs(r1 - r0)
    sc, sr = (1 if c0 < c1 else -1), (1 if r0 < r1 else -1)
    err = dc + dr
    out = []
    while True:
        out.append((r0, c0))
        if c0 == c1 and r0 == r1:
            return out
        e2 = 2 * err
        if e2 >= dr:
            err += dr
            c0 += sc
        if e2 <= dc:
            err += dc
            r0 += sr


def draw_segment(img, camera: CameraModel, frame, a, b, color):
    pa, pb = camera.to_camera(np.stack([a, b]), frame)
    seg = _clip_near(pa, pb)
    if seg is None:
        return
    (ua, va, _), (ub, vb, _) = (camera.project_camera(p) for p in seg)
    H, W = img.shape[:2]
    clipped = _clip_rect(ua, va, ub, vb, W, H)
    if clipped is None:
        return
    for r, c in raster_line(*clipped):
        if 0 <= r < H and 0 <= c < W:
            img[r, c] = color


def hdmap_rasterize(elements, boxes, camera: CameraModel, T, shape, fps=30.0, t0=0.0):
    """Color-coded 1-pixel polylines and box wireframes per frame, (T, Y, X, 3)."""
    if camera.num_frames < T:
        raise InputError(f"camera has {camera.num_frames} poses for {T} frames")
    out = np.zeros((T,) + tuple(shape) + (3,), dtype=np.float64)
    for f in range(T):
        img = out[f]
        for el in elements:
            color = MAP_COLORS[el.kind]
            for a, b in zip(el.points[:-1], el.points[1:]):
                draw_segment(img, camera, f, a, b, color)
        t = t0 + f / fps
        for box in boxes:
            if not box.active(t):
                continue
            corners = box.corners(t)
            color = BOX_COLORS.get(box.category, BOX_COLORS["vehicle"])
            for i, j in BOX_EDGES:
                draw_segment(img, camera, f, corners[i], corners[j], color)
    return out.astype(DTYPE)


# --- scene files --------------------------------------------------------------

@dataclass
class Scene:
    camera: CameraModel
    fps: float = 30.0
    scans: list = field(default_factory=list)
    boxes: list = field(default_factory=list)
    elements: list = field(default_factory=list)

    def to_dict(self):
        return {"fps": self.fps, "camera": self.camera.to_dict(),
                "lidar": [s.to_dict() for s in self.scans],
                "boxes": [b.to_dict() for b in self.boxes],
                "map": [e.to_dict() for e in self.elements]}

    @classmethod
    def from_dict(cls, d):
        return cls(CameraModel.from_dict(d["camera"]), d.get("fps", 30.0),
                   [LidarScan.from_dict(s) for s in d.get("lidar", [])],
                   [BoxTrack.from_dict(b) for b in d.get("boxes", [])],
                   [MapElement.from_dict(e) for e in d.get("map", [])])

    def save(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh)

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            return cls.from_dict(json.load(fh))
