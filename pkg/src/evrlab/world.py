"""Procedural 2.5D scenes: a walled rectangular room with interior partition
walls and categorised furniture, plus occupancy rasterisation and a text
scene file format."""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from enum import IntEnum
from pathlib import Path

import numpy as np

SCENE_FORMAT = "EVRSCENE"
SCENE_VERSION = 1


class Category(IntEnum):
    bed = 0
    chair = 1
    desk = 2
    dresser = 3
    fridge = 4
    sofa = 5
    table = 6
    washer = 7


# (long side range, short side range, height range) in metres
CATEGORY_SHAPES: dict[Category, tuple[tuple[float, float], tuple[float, float], tuple[float, float]]] = {
    Category.bed: ((1.9, 2.1), (1.4, 1.7), (0.5, 0.65)),
    Category.chair: ((0.45, 0.55), (0.45, 0.55), (0.85, 1.0)),
    Category.desk: ((1.2, 1.5), (0.6, 0.7), (0.72, 0.78)),
    Category.dresser: ((0.9, 1.2), (0.45, 0.55), (1.05, 1.25)),
    Category.fridge: ((0.7, 0.8), (0.65, 0.75), (1.7, 1.9)),
    Category.sofa: ((1.8, 2.2), (0.85, 0.95), (0.8, 0.9)),
    Category.table: ((1.3, 1.7), (0.8, 1.0), (0.72, 0.78)),
    Category.washer: ((0.6, 0.65), (0.6, 0.65), (0.85, 0.9)),
}


class GenerationFailure(RuntimeError):
    pass


class SceneFormatError(ValueError):
    pass


@dataclass(frozen=True)
class Rect:
    x0: float
    y0: float
    x1: float
    y1: float

    @property
    def area(self) -> float:
        return max(self.x1 - self.x0, 0.0) * max(self.y1 - self.y0, 0.0)

    @property
    def center(self) -> tuple[float, float]:
        return (0.5 * (self.x0 + self.x1), 0.5 * (self.y0 + self.y1))

    def gap(self, other: "Rect") -> float:
        """Euclidean distance between the two rectangles (0 when touching or overlapping)."""
        gx = max(other.x0 - self.x1, self.x0 - other.x1, 0.0)
        gy = max(other.y0 - self.y1, self.y0 - other.y1, 0.0)
        return math.hypot(gx, gy)

    def overlap_area(self, other: "Rect") -> float:
        w = min(self.x1, other.x1) - max(self.x0, other.x0)
        h = min(self.y1, other.y1) - max(self.y0, other.y0)
        return max(w, 0.0) * max(h, 0.0)


@dataclass(frozen=True)
class Wall:
    x0: float
    y0: float
    x1: float
    y1: float
    height: float
    thickness: float = 0.0

    @property
    def length(self) -> float:
        return math.hypot(self.x1 - self.x0, self.y1 - self.y0)


@dataclass(frozen=True)
class ObjectInstance:
    id: int
    category: Category
    footprint: Rect
    height: float


@dataclass(frozen=True)
class Scene:
    id: int
    bounds: Rect
    walls: tuple[Wall, ...]
    objects: tuple[ObjectInstance, ...]
    rng_seed: int

    def object(self, instance_id: int) -> ObjectInstance:
        for o in self.objects:
            if o.id == instance_id:
                return o
        raise KeyError(f"scene {self.id} has no object {instance_id}")

    def interior_walls(self) -> tuple[Wall, ...]:
        return tuple(w for w in self.walls if not _on_boundary(w, self.bounds))


def _on_boundary(w: Wall, b: Rect) -> bool:
    xs, ys = (w.x0, w.x1), (w.y0, w.y1)
    return (xs[0] == xs[1] and xs[0] in (b.x0, b.x1)) or (ys[0] == ys[1] and ys[0] in (b.y0, b.y1))


@dataclass(frozen=True)
class SceneConfig:
    size: tuple[float, float] = (10.0, 10.0)
    boundary_height: float = 2.5
    wall_count: tuple[int, int] = (3, 5)
    wall_length: tuple[float, float] = (1.5, 3.5)
    wall_height: tuple[float, float] = (1.4, 2.5)
    wall_thickness: float = 0.1
    objects_per_category: tuple[int, int] = (1, 2)
    object_clearance: float = 0.6
    wall_clearance: float = 0.5
    boundary_margin: float = 0.5
    max_attempts: int = 10_000
    occlusion_probes: int = 16

    @classmethod
    def from_dict(cls, d: dict) -> "SceneConfig":
        return cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in d.items()})


# -- geometry helpers ----------------------------------------------------------
def point_segment_distance(px, py, ax, ay, bx, by):
    """Distance from point(s) to segment ab (numpy broadcasting)."""
    dx, dy = bx - ax, by - ay
    ll = dx * dx + dy * dy
    t = np.clip(((px - ax) * dx + (py - ay) * dy) / ll, 0.0, 1.0) if ll > 0 else 0.0
    return np.hypot(px - (ax + t * dx), py - (ay + t * dy))


def rect_segment_distance(r: Rect, w: Wall) -> float:
    if _segment_hits_box(w.x0, w.y0, w.x1, w.y1, np.array([r.x0]), np.array([r.y0]),
                         np.array([r.x1]), np.array([r.y1]), strict=False)[0]:
        return 0.0
    corners = [(r.x0, r.y0), (r.x0, r.y1), (r.x1, r.y0), (r.x1, r.y1)]
    d = min(float(point_segment_distance(cx, cy, w.x0, w.y0, w.x1, w.y1)) for cx, cy in corners)
    for px, py in ((w.x0, w.y0), (w.x1, w.y1)):
        gx = max(r.x0 - px, px - r.x1, 0.0)
        gy = max(r.y0 - py, py - r.y1, 0.0)
        d = min(d, math.hypot(gx, gy))
    return d


def _segment_hits_box(ax, ay, bx, by, x0, y0, x1, y1, strict: bool) -> np.ndarray:
    """Liang-Barsky clip of segment ab against many boxes. With ``strict`` the
    clipped piece must have positive length with its midpoint inside the open box."""
    dx, dy = bx - ax, by - ay
    lo = np.zeros(x0.shape)
    hi = np.ones(x0.shape)
    ok = np.ones(x0.shape, dtype=bool)
    for p, q0, q1 in ((dx, ax - x0, x1 - ax), (dy, ay - y0, y1 - ay)):
        if p == 0:
            ok &= (q0 >= 0) & (q1 >= 0)
        else:
            t_a = -q0 / p
            t_b = q1 / p
            lo = np.maximum(lo, np.minimum(t_a, t_b))
            hi = np.minimum(hi, np.maximum(t_a, t_b))
    ok &= lo <= hi
    if strict:
        mid = 0.5 * (lo + hi)
        mx, my = ax + mid * dx, ay + mid * dy
        ok &= (hi > lo) & (mx > x0) & (mx < x1) & (my > y0) & (my < y1)
    return ok


# -- occupancy -------------------------------------------------------------
@dataclass(frozen=True)
class OccupancyGrid:
    resolution: float
    width: int
    height: int
    origin: tuple[float, float]
    blocked: np.ndarray = field(compare=False, repr=False)

    def cell_of(self, x: float, y: float) -> tuple[int, int]:
        """(ix, iy) of the cell containing a point."""
        return (int(math.floor((x - self.origin[0]) / self.resolution)),
                int(math.floor((y - self.origin[1]) / self.resolution)))

    def center(self, ix: int, iy: int) -> tuple[float, float]:
        return (self.origin[0] + (ix + 0.5) * self.resolution, self.origin[1] + (iy + 0.5) * self.resolution)

    def inside(self, ix: int, iy: int) -> bool:
        return 0 <= ix < self.width and 0 <= iy < self.height

    def is_free(self, x: float, y: float) -> bool:
        ix, iy = self.cell_of(x, y)
        return self.inside(ix, iy) and not self.blocked[iy, ix]

    def free_cells(self) -> np.ndarray:
        iy, ix = np.nonzero(~self.blocked)
        return np.stack([ix, iy], axis=1)


def _cell_bounds(origin, res, nx, ny):
    xs = origin[0] + np.arange(nx) * res
    ys = origin[1] + np.arange(ny) * res
    x0, y0 = np.meshgrid(xs, ys)
    return x0, y0, x0 + res, y0 + res


def rect_blocked_cells(rect: Rect, radius: float, cells) -> np.ndarray:
    """Cells (given by their bounds arrays) meeting ``rect`` inflated by ``radius``.

    Cells are open squares: with radius 0 an edge-touching cell is not blocked.
    """
    cx0, cy0, cx1, cy1 = cells
    sx = np.maximum(rect.x0 - cx1, cx0 - rect.x1)
    sy = np.maximum(rect.y0 - cy1, cy0 - rect.y1)
    inside = (sx < 0) & (sy < 0)
    if radius <= 0:
        return inside
    return inside | (np.hypot(np.maximum(sx, 0), np.maximum(sy, 0)) < radius)


def wall_blocked_cells(w: Wall, radius: float, cells) -> np.ndarray:
    cx0, cy0, cx1, cy1 = cells
    r = radius + 0.5 * w.thickness
    hit = _segment_hits_box(w.x0, w.y0, w.x1, w.y1, cx0, cy0, cx1, cy1, strict=r <= 0)
    if r <= 0:
        return hit
    d = np.minimum.reduce([
        point_segment_distance(px, py, w.x0, w.y0, w.x1, w.y1)
        for px, py in ((cx0, cy0), (cx0, cy1), (cx1, cy0), (cx1, cy1))
    ])
    for px, py in ((w.x0, w.y0), (w.x1, w.y1)):
        gx = np.maximum(np.maximum(cx0 - px, px - cx1), 0)
        gy = np.maximum(np.maximum(cy0 - py, py - cy1), 0)
        d = np.minimum(d, np.hypot(gx, gy))
    return hit | (d < r)


def rasterize_occupancy(scene: Scene, resolution: float, agent_radius: float) -> OccupancyGrid:
    if resolution <= 0:
        raise ValueError(f"resolution must be positive, got {resolution}")
    b = scene.bounds
    nx = int(math.ceil((b.x1 - b.x0) / resolution - 1e-9))
    ny = int(math.ceil((b.y1 - b.y0) / resolution - 1e-9))
    cells = _cell_bounds((b.x0, b.y0), resolution, nx, ny)
    blocked = np.zeros((ny, nx), dtype=bool)
    for o in scene.objects:
        blocked |= rect_blocked_cells(o.footprint, agent_radius, cells)
    for w in scene.walls:
        blocked |= wall_blocked_cells(w, agent_radius, cells)
    return OccupancyGrid(resolution, nx, ny, (b.x0, b.y0), blocked)


# -- generation --------------------------------------------------------------
def _boundary_walls(b: Rect, height: float) -> list[Wall]:
    return [
        Wall(b.x0, b.y0, b.x1, b.y0, height),
        Wall(b.x1, b.y0, b.x1, b.y1, height),
        Wall(b.x1, b.y1, b.x0, b.y1, height),
        Wall(b.x0, b.y1, b.x0, b.y0, height),
    ]


def _place_walls(rng: np.random.Generator, cfg: SceneConfig, b: Rect) -> list[Wall]:
    walls = []
    n = int(rng.integers(cfg.wall_count[0], cfg.wall_count[1] + 1))
    margin = 1.0
    for _ in range(n):
        length = rng.uniform(*cfg.wall_length)
        angle = rng.uniform(0.0, math.pi)
        cx = rng.uniform(b.x0 + margin, b.x1 - margin)
        cy = rng.uniform(b.y0 + margin, b.y1 - margin)
        hx, hy = 0.5 * length * math.cos(angle), 0.5 * length * math.sin(angle)
        x0 = float(np.clip(cx - hx, b.x0 + margin, b.x1 - margin))
        x1 = float(np.clip(cx + hx, b.x0 + margin, b.x1 - margin))
        y0 = float(np.clip(cy - hy, b.y0 + margin, b.y1 - margin))
        y1 = float(np.clip(cy + hy, b.y0 + margin, b.y1 - margin))
        if math.hypot(x1 - x0, y1 - y0) < 0.5:
            continue
        walls.append(Wall(x0, y0, x1, y1, float(rng.uniform(*cfg.wall_height)), cfg.wall_thickness))
    return walls


def _place_objects(rng: np.random.Generator, cfg: SceneConfig, b: Rect, walls: list[Wall]) -> list[ObjectInstance]:
    objects: list[ObjectInstance] = []
    next_id = 1
    for cat in Category:
        count = int(rng.integers(cfg.objects_per_category[0], cfg.objects_per_category[1] + 1))
        long_r, short_r, h_r = CATEGORY_SHAPES[cat]
        for _ in range(count):
            for _try in range(50):
                a, c = rng.uniform(*long_r), rng.uniform(*short_r)
                w, d = (a, c) if rng.random() < 0.5 else (c, a)
                m = cfg.boundary_margin
                if b.x1 - b.x0 - 2 * m < w or b.y1 - b.y0 - 2 * m < d:
                    continue
                x0 = rng.uniform(b.x0 + m, b.x1 - m - w)
                y0 = rng.uniform(b.y0 + m, b.y1 - m - d)
                rect = Rect(float(x0), float(y0), float(x0 + w), float(y0 + d))
                if any(rect.gap(o.footprint) < cfg.object_clearance for o in objects):
                    continue
                if any(rect_segment_distance(rect, wl) < cfg.wall_clearance + 0.5 * wl.thickness for wl in walls):
                    continue
                objects.append(ObjectInstance(next_id, cat, rect, float(rng.uniform(*h_r))))
                next_id += 1
                break
    return objects


def _has_wall_occlusion(scene: Scene, rng: np.random.Generator, cfg: SceneConfig) -> bool:
    """True if some object is partly hidden by an interior wall from some free
    cell at 3-6 m, looking at the object."""
    from .episodes import AGENT_RADIUS, GRID_RESOLUTION, SPAWN_BAND
    from .render import Camera, Pose, render_target_with_walls

    interior = scene.interior_walls()
    if not interior:
        return False
    grid = rasterize_occupancy(scene, GRID_RESOLUTION, AGENT_RADIUS)
    free = grid.free_cells()
    centers = np.column_stack(grid.center(free[:, 0], free[:, 1]))
    camera = Camera()
    for obj in scene.objects:
        ox, oy = obj.footprint.center
        dist = np.hypot(centers[:, 0] - ox, centers[:, 1] - oy)
        band = centers[(dist >= SPAWN_BAND[0]) & (dist <= SPAWN_BAND[1])]
        if len(band) == 0:
            continue
        picks = rng.choice(len(band), size=min(cfg.occlusion_probes, len(band)), replace=False)
        for k in picks:
            x, y = band[k]
            heading = math.degrees(math.atan2(oy - y, ox - x)) % 360.0
            alone, with_walls = render_target_with_walls(scene, Pose(float(x), float(y), heading), camera, obj.id, interior)
            if alone > 0 and 0 < with_walls < alone:
                return True
    return False


def generate_scene(seed: int, config: SceneConfig | None = None, scene_id: int | None = None) -> Scene:
    cfg = config or SceneConfig()
    if cfg.wall_count[1] <= 0:
        raise GenerationFailure("occlusion requirement unsatisfiable: configuration allows no interior walls")
    rng = np.random.default_rng(seed)
    b = Rect(0.0, 0.0, float(cfg.size[0]), float(cfg.size[1]))
    for _attempt in range(cfg.max_attempts):
        walls = _place_walls(rng, cfg, b)
        objects = _place_objects(rng, cfg, b, walls)
        if not objects:
            continue
        scene = Scene(
            id=seed if scene_id is None else scene_id,
            bounds=b,
            walls=tuple(_boundary_walls(b, cfg.boundary_height) + walls),
            objects=tuple(objects),
            rng_seed=seed,
        )
        if _has_wall_occlusion(scene, rng, cfg):
            return scene
    raise GenerationFailure(f"no valid scene for seed {seed} after {cfg.max_attempts} attempts")


def check_scene(scene: Scene) -> None:
    """Raise ValueError if a type invariant is violated."""
    b = scene.bounds
    ids = [o.id for o in scene.objects]
    if len(set(ids)) != len(ids):
        raise ValueError("duplicate object ids")
    for o in scene.objects:
        f = o.footprint
        if f.area <= 0 or o.height <= 0:
            raise ValueError(f"object {o.id}: degenerate footprint or height")
        if f.x0 < b.x0 or f.y0 < b.y0 or f.x1 > b.x1 or f.y1 > b.y1:
            raise ValueError(f"object {o.id}: footprint outside bounds")
    for i, a in enumerate(scene.objects):
        for c in scene.objects[i + 1:]:
            if a.footprint.overlap_area(c.footprint) > 0:
                raise ValueError(f"objects {a.id} and {c.id} overlap")
    for w in scene.walls:
        if w.length <= 0 or w.height <= 0 or w.thickness < 0:
            raise ValueError("degenerate wall")


# -- scene files ---------------------------------------------------------------
# Field order is fixed: id, rng_seed, bounds, walls, objects. Walls are
# [x0, y0, x1, y1, height, thickness]; objects are
# [id, category code, x0, y0, x1, y1, height]. Floats use shortest
# round-trip repr, so a given Scene always serialises to the same bytes.
def scene_to_text(scene: Scene) -> str:
    b = scene.bounds
    body = {
        "id": scene.id,
        "rng_seed": scene.rng_seed,
        "bounds": [b.x0, b.y0, b.x1, b.y1],
        "walls": [[w.x0, w.y0, w.x1, w.y1, w.height, w.thickness] for w in scene.walls],
        "objects": [[o.id, int(o.category), o.footprint.x0, o.footprint.y0, o.footprint.x1, o.footprint.y1, o.height]
                    for o in scene.objects],
    }
    return f"{SCENE_FORMAT} {SCENE_VERSION}\n" + json.dumps(body, indent=1) + "\n"


def scene_from_text(text: str) -> Scene:
    header, sep, rest = text.partition("\n")
    parts = header.split()
    if not sep or len(parts) != 2 or parts[0] != SCENE_FORMAT:
        raise SceneFormatError("parse error at byte 0: missing scene header")
    if parts[1] != str(SCENE_VERSION):
        raise SceneFormatError(f"unsupported scene version {parts[1]}")
    offset = len(header.encode()) + 1
    try:
        body = json.loads(rest)
    except json.JSONDecodeError as exc:
        byte = offset + len(rest[:exc.pos].encode())
        raise SceneFormatError(f"parse error at byte {byte}: {exc.msg}") from None
    try:
        b = Rect(*map(float, body["bounds"]))
        walls = []
        for i, w in enumerate(body["walls"]):
            if len(w) != 6:
                raise SceneFormatError(f"walls[{i}]: expected 6 fields, got {len(w)}")
            walls.append(Wall(*map(float, w)))
        objects = []
        for i, o in enumerate(body["objects"]):
            if len(o) != 7:
                raise SceneFormatError(f"objects[{i}]: expected 7 fields, got {len(o)}")
            code = o[1]
            if not isinstance(code, int) or code not in Category._value2member_map_:
                raise SceneFormatError(f"objects[{i}].category: unknown category code {code!r}")
            objects.append(ObjectInstance(int(o[0]), Category(code), Rect(*map(float, o[2:6])), float(o[6])))
        return Scene(int(body["id"]), b, tuple(walls), tuple(objects), int(body["rng_seed"]))
    except (KeyError, TypeError, ValueError) as exc:
        if isinstance(exc, SceneFormatError):
            raise
        raise SceneFormatError(f"invalid scene body: {exc!r}") from None


def save_scene(scene: Scene, path) -> None:
    Path(path).write_text(scene_to_text(scene), encoding="ascii")


def load_scene(path) -> Scene:
    return scene_from_text(Path(path).read_bytes().decode("ascii", errors="replace"))


def scene_dict(scene: Scene) -> dict:
    return asdict(scene)
