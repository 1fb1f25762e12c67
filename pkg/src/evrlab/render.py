"""Column raycasting of 2.5D scenes and amodal ground truth.

Camera model: pinhole, square pixels, optical axis horizontal at the agent's
eye height. Column ``c`` of a canvas looks along ``forward + right * u / f``
with ``u = c + 0.5 - W/2``; row ``r`` samples image height ``v = r + 0.5 - H/2``
(positive is down). A point at forward depth ``d`` and height ``z`` lands on
``v = f * (eye - z) / d``. Headings are degrees with 0 along +x and 90 along
+y; the camera's right-hand side is heading + 90.

Each column is a vertical plane through the eye, and every prism (object
footprint or wall segment, both extruded from the floor) cuts that plane in a
rectangle ``[d_in, d_out] x [0, height]``. Its image in the column is the row
interval between the projected top edge and the projected near floor contact.
Footprints are disjoint, so the primitive with the smallest entry depth wins
every pixel it covers.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .world import Category, Scene, Wall

BACKGROUND = -1
WALL = len(Category)

# one colour per category, then wall, then background
PALETTE = np.array([
    [214, 39, 40],    # bed
    [31, 119, 180],   # chair
    [44, 160, 44],    # desk
    [148, 103, 189],  # dresser
    [23, 190, 207],   # fridge
    [255, 127, 14],   # sofa
    [188, 189, 34],   # table
    [227, 119, 194],  # washer
    [128, 128, 128],  # wall
    [0, 0, 0],        # background
], dtype=np.float64)


class NoVisiblePixels(ValueError):
    pass


@dataclass(frozen=True)
class Pose:
    x: float
    y: float
    heading: float

    def __post_init__(self):
        object.__setattr__(self, "heading", float(self.heading) % 360.0)

    @property
    def forward(self) -> tuple[float, float]:
        h = math.radians(self.heading)
        return (math.cos(h), math.sin(h))

    @property
    def right(self) -> tuple[float, float]:
        h = math.radians(self.heading)
        return (-math.sin(h), math.cos(h))


@dataclass(frozen=True)
class Camera:
    hfov: float = 60.0
    width: int = 80
    height: int = 64
    border_pad: int = 8
    near: float = 0.05
    far: float = 50.0
    eye_height: float = 1.2

    def __post_init__(self):
        if self.width <= 0 or self.height <= 0 or self.border_pad <= 0:
            raise ValueError("camera width, height and border_pad must be positive")
        if not 0 < self.hfov < 180:
            raise ValueError(f"hfov must lie in (0, 180), got {self.hfov}")

    @property
    def focal(self) -> float:
        return 0.5 * self.width / math.tan(math.radians(0.5 * self.hfov))

    @property
    def padded_shape(self) -> tuple[int, int]:
        return (self.height + 2 * self.border_pad, self.width + 2 * self.border_pad)


@dataclass(frozen=True)
class Frame:
    instance_id: np.ndarray  # int32 (H, W), 0 = none
    category_id: np.ndarray  # int8 (H, W), BACKGROUND / 0..7 / WALL
    depth: np.ndarray        # float64 (H, W), far clip where nothing is hit
    rgb: np.ndarray          # uint8 (H, W, 3)


@dataclass(frozen=True)
class AmodalTruth:
    amodal_mask: np.ndarray   # bool, padded canvas
    amodal_box: tuple[int, int, int, int] | None  # inclusive (c0, r0, c1, r1), padded canvas
    visible_mask: np.ndarray  # bool, core canvas
    visibility: float


@dataclass(frozen=True)
class _Prims:
    rects: np.ndarray     # (P, 4) x0 y0 x1 y1
    walls: np.ndarray     # (Q, 4) x0 y0 x1 y1
    heights: np.ndarray   # (P + Q,)
    instance: np.ndarray  # (P + Q,)
    category: np.ndarray  # (P + Q,)


def _collect(scene: Scene, object_ids=None, walls: tuple[Wall, ...] | None = None) -> _Prims:
    objs = [o for o in scene.objects if object_ids is None or o.id in object_ids]
    ws = scene.walls if walls is None else walls
    rects = np.array([[o.footprint.x0, o.footprint.y0, o.footprint.x1, o.footprint.y1] for o in objs]).reshape(-1, 4)
    wall_arr = np.array([[w.x0, w.y0, w.x1, w.y1] for w in ws]).reshape(-1, 4)
    heights = np.array([o.height for o in objs] + [w.height for w in ws], dtype=np.float64)
    instance = np.array([o.id for o in objs] + [0] * len(ws), dtype=np.int32)
    category = np.array([int(o.category) for o in objs] + [WALL] * len(ws), dtype=np.int8)
    return _Prims(rects, wall_arr, heights, instance, category)


def _column_dirs(pose: Pose, camera: Camera, c_lo: int, c_hi: int):
    fx, fy = pose.forward
    rx, ry = pose.right
    u = (np.arange(c_lo, c_hi) + 0.5 - 0.5 * camera.width) / camera.focal
    return fx + rx * u, fy + ry * u


def _column_hits(prims: _Prims, pose: Pose, dx: np.ndarray, dy: np.ndarray, near: float):
    """Entry/exit forward depths of every primitive along every column ray
    (rows: primitives, columns: image columns). Misses are +inf."""
    px, py = pose.x, pose.y
    n_cols = dx.shape[0]
    d_in = []
    d_out = []
    with np.errstate(divide="ignore", invalid="ignore"):
        if len(prims.rects):
            r = prims.rects[:, :, None]
            tx0 = (r[:, 0] - px) / dx
            tx1 = (r[:, 2] - px) / dx
            ty0 = (r[:, 1] - py) / dy
            ty1 = (r[:, 3] - py) / dy
            # rays parallel to a slab: inside -> unbounded, outside -> miss
            inx = (px >= r[:, 0]) & (px <= r[:, 2])
            iny = (py >= r[:, 1]) & (py <= r[:, 3])
            par_x = dx[None, :] == 0
            par_y = dy[None, :] == 0
            lo_x = np.where(par_x, np.where(inx, -np.inf, np.inf), np.minimum(tx0, tx1))
            hi_x = np.where(par_x, np.where(inx, np.inf, -np.inf), np.maximum(tx0, tx1))
            lo_y = np.where(par_y, np.where(iny, -np.inf, np.inf), np.minimum(ty0, ty1))
            hi_y = np.where(par_y, np.where(iny, np.inf, -np.inf), np.maximum(ty0, ty1))
            t_in = np.maximum(lo_x, lo_y)
            t_out = np.minimum(hi_x, hi_y)
            hit = (t_in <= t_out) & (t_in >= near)
            d_in.append(np.where(hit, t_in, np.inf))
            d_out.append(np.where(hit, t_out, np.inf))
        if len(prims.walls):
            w = prims.walls[:, :, None]
            ex, ey = w[:, 2] - w[:, 0], w[:, 3] - w[:, 1]
            # p + t d = a + s e  ->  solve 2x2 by Cramer's rule
            den = dx[None, :] * (-ey) - dy[None, :] * (-ex)
            ax, ay = w[:, 0] - px, w[:, 1] - py
            t = (ax * (-ey) - ay * (-ex)) / den
            s = (dx[None, :] * ay - dy[None, :] * ax) / den
            hit = (den != 0) & (s >= 0) & (s <= 1) & (t >= near)
            tw = np.where(hit, t, np.inf)
            d_in.append(tw)
            d_out.append(tw)
    if not d_in:
        return np.empty((0, n_cols)), np.empty((0, n_cols))
    return np.concatenate(d_in, axis=0), np.concatenate(d_out, axis=0)


def _rasterize(prims: _Prims, pose: Pose, camera: Camera, rows: tuple[int, int], cols: tuple[int, int]):
    """Winner primitive index per pixel (-1 for none) and per-pixel depth."""
    dx, dy = _column_dirs(pose, camera, *cols)
    d_in, d_out = _column_hits(prims, pose, dx, dy, camera.near)
    f, eye = camera.focal, camera.eye_height
    v = (np.arange(*rows) + 0.5 - 0.5 * camera.height)
    n_rows, n_cols = len(v), len(dx)
    if d_in.shape[0] == 0:
        return np.full((n_rows, n_cols), -1), np.full((n_rows, n_cols), camera.far)
    h = prims.heights[:, None]
    valid = np.isfinite(d_in) & (d_in <= camera.far)
    with np.errstate(invalid="ignore", divide="ignore"):
        top_depth = np.where(h > eye, d_in, d_out)
        v_top = f * (eye - h) / top_depth
        v_bot = f * eye / d_in
    cover = valid[:, None, :] & (v[None, :, None] >= v_top[:, None, :]) & (v[None, :, None] <= v_bot[:, None, :])
    key = np.where(cover, d_in[:, None, :], np.inf)
    winner = np.argmin(key, axis=0)
    best = np.take_along_axis(key, winner[None], axis=0)[0]
    hit = np.isfinite(best)
    winner = np.where(hit, winner, -1)
    # front face where the ray meets the prism at its entry depth, top face beyond
    z_front = eye - v[:, None] * best / f
    hw = prims.heights[np.maximum(winner, 0)]
    with np.errstate(divide="ignore", invalid="ignore"):
        depth = np.where(z_front <= hw, best, f * (eye - hw) / v[:, None])
    depth = np.where(hit, depth, camera.far)
    return winner, depth


def _check_pose(scene: Scene, pose: Pose) -> None:
    b = scene.bounds
    if not (b.x0 <= pose.x <= b.x1 and b.y0 <= pose.y <= b.y1):
        raise ValueError(f"pose ({pose.x}, {pose.y}) outside scene bounds")


def colorize(category_id: np.ndarray, depth: np.ndarray) -> np.ndarray:
    idx = np.where(category_id == BACKGROUND, len(PALETTE) - 1, category_id)
    shade = 0.45 + 0.55 * np.exp(-np.minimum(depth, 1e3) / 6.0)
    return np.clip(PALETTE[idx] * shade[..., None], 0, 255).astype(np.uint8)


def render_frame(scene: Scene, pose: Pose, camera: Camera) -> Frame:
    _check_pose(scene, pose)
    prims = _collect(scene)
    winner, depth = _rasterize(prims, pose, camera, (0, camera.height), (0, camera.width))
    # index -1 picks the appended "nothing hit" entry
    inst = np.append(prims.instance, 0)[winner].astype(np.int32)
    cat = np.append(prims.category, BACKGROUND)[winner].astype(np.int8)
    return Frame(inst, cat, depth, colorize(cat, depth))


def render_amodal(scene: Scene, pose: Pose, camera: Camera, target: int, frame: Frame | None = None) -> AmodalTruth:
    _check_pose(scene, pose)
    scene.object(target)  # raises KeyError for an unknown id
    pad = camera.border_pad
    prims = _collect(scene, object_ids={target}, walls=())
    winner, _ = _rasterize(prims, pose, camera, (-pad, camera.height + pad), (-pad, camera.width + pad))
    amodal = winner >= 0
    if frame is None:
        frame = render_frame(scene, pose, camera)
    visible = frame.instance_id == target
    n_amodal = int(amodal.sum())
    visibility = float(visible.sum()) / n_amodal if n_amodal else 0.0
    return AmodalTruth(amodal, mask_bbox(amodal), visible, visibility)


def render_target_with_walls(scene: Scene, pose: Pose, camera: Camera, target: int, walls) -> tuple[int, int]:
    """Core-canvas pixel counts of ``target`` rendered alone and behind ``walls``."""
    alone, _ = _rasterize(_collect(scene, {target}, ()), pose, camera, (0, camera.height), (0, camera.width))
    prims = _collect(scene, {target}, tuple(walls))
    winner, _ = _rasterize(prims, pose, camera, (0, camera.height), (0, camera.width))
    return int((alone == 0).sum()), int((winner == 0).sum())


def mask_bbox(mask: np.ndarray) -> tuple[int, int, int, int] | None:
    """Tight inclusive (c0, r0, c1, r1) box of a boolean raster, None if empty."""
    rows = np.flatnonzero(mask.any(axis=1))
    if rows.size == 0:
        return None
    cols = np.flatnonzero(mask.any(axis=0))
    return (int(cols[0]), int(rows[0]), int(cols[-1]), int(rows[-1]))


def visible_bbox(frame: Frame, target: int) -> tuple[int, int, int, int]:
    box = mask_bbox(frame.instance_id == target)
    if box is None:
        raise NoVisiblePixels(f"instance {target} has no visible pixels")
    return box
