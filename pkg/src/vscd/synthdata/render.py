"""Top-down projective renderer with painter's-algorithm occlusion."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from functools import lru_cache

import numpy as np
from scipy import ndimage
from scipy.spatial import ConvexHull

from .world import ChangeSet, Illumination, Layout, ObjectInstance, Scene, Wall

CAMERA_HEIGHT = 1.2
BACKGROUND = np.array([0.08, 0.08, 0.1])
TEXTURE_RES = 96  # texels per world unit


@dataclass(frozen=True)
class Pose:
    x: float
    y: float
    heading: float
    fov: float  # radians, full horizontal field of view


@dataclass
class Trajectory:
    poses: list[Pose]

    def __len__(self) -> int:
        return len(self.poses)

    def to_json(self) -> list[dict]:
        return [asdict(p) for p in self.poses]

    @classmethod
    def from_json(cls, d: list[dict]) -> Trajectory:
        return cls([Pose(**p) for p in d])


def sample_trajectory(layout: Layout, length: int, rng: np.random.Generator, speed: float = 0.035,
                      margin: float = 0.45, heading_noise: float = 0.25, attraction: float = 0.2,
                      fov: float = math.radians(60)) -> Trajectory:
    """Smooth random walk pulled toward successive random waypoints."""
    if length < 1:
        raise ValueError("trajectory needs at least one pose")
    lo, hi = margin, layout.size - margin
    pos = rng.uniform(lo, hi, size=2)
    heading = rng.uniform(-math.pi, math.pi)
    waypoint = rng.uniform(lo, hi, size=2)
    fov_i = fov * rng.uniform(0.95, 1.05)
    poses = []
    for _ in range(length):
        poses.append(Pose(round(float(pos[0]), 5), round(float(pos[1]), 5), round(float(heading), 5), round(float(fov_i), 5)))
        if np.hypot(*(waypoint - pos)) < 0.15:
            waypoint = rng.uniform(lo, hi, size=2)
        want = math.atan2(waypoint[1] - pos[1], waypoint[0] - pos[0])
        turn = (want - heading + math.pi) % (2 * math.pi) - math.pi
        heading += attraction * turn + rng.normal(0.0, heading_noise)
        pos = np.clip(pos + speed * np.array([math.cos(heading), math.sin(heading)]), lo, hi)
    return Trajectory(poses)


class Camera:
    """Pinhole camera looking straight down from a fixed height.

    The image is north-up unless ``rotate`` is set, in which case it turns
    with the pose heading.
    """

    def __init__(self, pose: Pose, width: int, height: int, rotate: bool = False):
        self.pose = pose
        self.w, self.h = width, height
        self.f = (width / 2) / math.tan(pose.fov / 2)
        ang = pose.heading + math.pi / 2 if rotate else 0.0
        c, s = math.cos(ang), math.sin(ang)
        self.rot = np.array([[c, -s], [s, c]])  # image axes -> world axes

    def project(self, xy: np.ndarray, z: float) -> np.ndarray:
        rel = (xy - np.array([self.pose.x, self.pose.y])) @ self.rot
        scale = self.f / (CAMERA_HEIGHT - z)
        return rel * scale + np.array([self.w / 2, self.h / 2])

    def floor_coords(self) -> np.ndarray:
        """World XY of every pixel centre on the floor plane, [H, W, 2]."""
        u = np.arange(self.w) + 0.5 - self.w / 2
        v = np.arange(self.h) + 0.5 - self.h / 2
        uv = np.stack(np.meshgrid(u, v), axis=-1) * (CAMERA_HEIGHT / self.f)
        return uv @ self.rot.T + np.array([self.pose.x, self.pose.y])

    def footprint_box(self) -> tuple[float, float, float, float]:
        fc = self.floor_coords()
        return fc[..., 0].min(), fc[..., 1].min(), fc[..., 0].max(), fc[..., 1].max()


def fill_convex(canvas: np.ndarray, poly: np.ndarray, value) -> None:
    """Paint pixels whose centres fall inside a convex polygon (in place)."""
    h, w = canvas.shape[:2]
    x0 = max(int(math.floor(poly[:, 0].min())), 0)
    x1 = min(int(math.ceil(poly[:, 0].max())), w)
    y0 = max(int(math.floor(poly[:, 1].min())), 0)
    y1 = min(int(math.ceil(poly[:, 1].max())), h)
    if x0 >= x1 or y0 >= y1:
        return
    px, py = np.meshgrid(np.arange(x0, x1) + 0.5, np.arange(y0, y1) + 0.5)
    inside = np.ones(px.shape, dtype=bool)
    nxt = np.roll(poly, -1, axis=0)
    area = np.sum(poly[:, 0] * nxt[:, 1] - nxt[:, 0] * poly[:, 1])
    sign = 1.0 if area >= 0 else -1.0
    for (ax, ay), (bx, by) in zip(poly, nxt):
        inside &= sign * ((bx - ax) * (py - ay) - (by - ay) * (px - ax)) >= 0
    canvas[y0:y1, x0:x1][inside] = value


def prism_silhouette(cam: Camera, footprint: np.ndarray, height: float) -> tuple[np.ndarray, np.ndarray]:
    """Projected outline of a vertical prism and of its top face."""
    bottom = cam.project(footprint, 0.0)
    top = cam.project(footprint, height)
    pts = np.concatenate([bottom, top])
    hull = pts[ConvexHull(pts).vertices]
    return hull, top


@lru_cache(maxsize=64)
def floor_texture(seed: int, size: float) -> np.ndarray:
    """Tiled floor with smooth blotches so local patches are distinctive."""
    rng = np.random.default_rng(seed)
    n = int(math.ceil(size * TEXTURE_RES))
    base = rng.uniform(0.35, 0.6, size=3)
    tile = int(rng.integers(TEXTURE_RES // 5, TEXTURE_RES // 3))
    tiles = rng.normal(0.0, 0.05, size=(n // tile + 1, n // tile + 1, 3))
    tex = base + np.kron(tiles, np.ones((tile, tile, 1)))[:n, :n]
    grout = (np.arange(n) % tile) < 2
    tex[grout, :] *= 0.8
    tex[:, grout] *= 0.8
    noise = rng.normal(0.0, 1.0, size=(n // 6 + 1, n // 6 + 1, 3))
    noise = ndimage.zoom(noise, (6, 6, 1), order=1)[:n, :n]
    tex = tex + 0.08 * noise
    return np.clip(tex, 0.0, 1.0)


def _sample_floor(layout: Layout, xy: np.ndarray) -> np.ndarray:
    tex = floor_texture(layout.texture_seed, layout.size)
    n = tex.shape[0]
    ij = np.floor(xy * TEXTURE_RES).astype(np.int64)
    inside = (ij >= 0).all(-1) & (ij < n).all(-1)
    out = np.broadcast_to(BACKGROUND, xy.shape[:-1] + (3,)).copy()
    out[inside] = tex[ij[inside][:, 1], ij[inside][:, 0]]
    return out


def _shading(layout: Layout, floor_xy: np.ndarray, illum: Illumination) -> np.ndarray:
    centred = (floor_xy - layout.size / 2) / (layout.size / 2)
    ld = np.asarray(illum.light_dir, dtype=np.float64)
    return illum.brightness * (1.0 + 0.25 * (centred @ ld))


def _items(layout: Layout, objects: list[ObjectInstance]) -> list[tuple[float, int, object]]:
    # painter's order: lower tops first; walls are taller than every object
    items = [(o.height, 0, o) for o in objects] + [(w.height, 1, w) for w in layout.walls]
    return sorted(items, key=lambda it: (it[0], it[1], getattr(it[2], "id", 0)))


def render_frame(layout: Layout, scene: Scene, pose: Pose, width: int = 128, height: int = 128,
                 rotate: bool = False) -> np.ndarray:
    """Render one uint8 RGB frame."""
    cam = Camera(pose, width, height, rotate)
    floor_xy = cam.floor_coords()
    img = _sample_floor(layout, floor_xy)
    for _, kind, item in _items(layout, scene.objects):
        hull, top = prism_silhouette(cam, item.footprint(), item.height)
        if kind == 0:
            color = np.asarray(item.color)
        else:
            color = np.asarray(layout.wall_color)
        fill_convex(img, hull, color * 0.7)
        fill_convex(img, top, color)
    img = img * _shading(layout, floor_xy, scene.illumination)[..., None]
    return np.round(np.clip(img, 0.0, 1.0) * 255).astype(np.uint8)


def render(layout: Layout, scene: Scene, trajectory: Trajectory, width: int = 128, height: int = 128,
           rotate: bool = False) -> np.ndarray:
    """Render a whole clip, [T, H, W, 3] uint8."""
    return np.stack([render_frame(layout, scene, p, width, height, rotate) for p in trajectory.poses])


def render_change_mask(layout: Layout, changes: ChangeSet, pose: Pose, width: int = 128, height: int = 128,
                       rotate: bool = False) -> np.ndarray:
    """Changed occupancies painted 1, occluded only by static layout geometry."""
    cam = Camera(pose, width, height, rotate)
    mask = np.zeros((height, width), dtype=np.uint8)
    for _, kind, item in _items(layout, changes.changed):
        hull, top = prism_silhouette(cam, item.footprint(), item.height)
        value = 1 if kind == 0 else 0
        fill_convex(mask, hull, value)
        fill_convex(mask, top, value)
    return mask


def render_change_masks(layout: Layout, changes: ChangeSet, trajectory: Trajectory, width: int = 128,
                        height: int = 128, rotate: bool = False) -> np.ndarray:
    """Replay the query trajectory, [T, H, W] uint8 in {0,1}."""
    return np.stack([render_change_mask(layout, changes, p, width, height, rotate) for p in trajectory.poses])


def footprint_overlap(a: Pose, b: Pose, width: int = 128, height: int = 128) -> float:
    """IoU of two north-up floor footprints."""
    ax0, ay0, ax1, ay1 = Camera(a, width, height).footprint_box()
    bx0, by0, bx1, by1 = Camera(b, width, height).footprint_box()
    iw = max(0.0, min(ax1, bx1) - max(ax0, bx0))
    ih = max(0.0, min(ay1, by1) - max(ay0, by0))
    inter = iw * ih
    union = (ax1 - ax0) * (ay1 - ay0) + (bx1 - bx0) * (by1 - by0) - inter
    return inter / union if union > 0 else 0.0
