"""Agent kinematics, spawn sampling, shortest paths and dataset files."""
from __future__ import annotations

import hashlib
import heapq
import json
import math
from dataclasses import dataclass, field
from enum import IntEnum
from pathlib import Path
from typing import Sequence

import numpy as np

from . import rle
from .render import AmodalTruth, Camera, Frame, NoVisiblePixels, Pose, mask_bbox, render_amodal, render_frame, visible_bbox
from .world import OccupancyGrid, Scene, SceneConfig, generate_scene, load_scene, rasterize_occupancy, rect_blocked_cells, save_scene

STEP_SIZE = 0.25
ROTATION_STEP = 2.0
GRID_RESOLUTION = 0.125
AGENT_RADIUS = 0.2
SPAWN_BAND = (3.0, 6.0)
MIN_VISIBILITY = 0.2
HARD_VISIBILITY = 0.5
HORIZON = 10
CATEGORY_CAP = 6
DATASET_VERSION = 1

# positions and headings are kept on a dyadic lattice so that opposite
# translations and rotations cancel exactly in floating point
_QUANTUM = 2.0 ** -20


def _q(v: float) -> float:
    return round(v / _QUANTUM) * _QUANTUM


class Action(IntEnum):
    MoveForward = 0
    MoveBackward = 1
    MoveLeft = 2
    MoveRight = 3
    RotateLeft = 4
    RotateRight = 5


START_TOKEN = len(Action)

_TRANSLATIONS = {
    Action.MoveForward: (1.0, 0.0),
    Action.MoveBackward: (-1.0, 0.0),
    Action.MoveLeft: (0.0, -1.0),
    Action.MoveRight: (0.0, 1.0),
}


class NoPath(RuntimeError):
    pass


class DatasetError(ValueError):
    pass


def translation_delta(heading: float, action: Action) -> tuple[float, float]:
    fwd, side = _TRANSLATIONS[action]
    h = math.radians(heading)
    # side axis points to the camera's right: heading + 90 degrees
    dx = STEP_SIZE * (fwd * math.cos(h) - side * math.sin(h))
    dy = STEP_SIZE * (fwd * math.sin(h) + side * math.cos(h))
    return _q(dx), _q(dy)


def step(pose: Pose, action: Action, grid: OccupancyGrid) -> Pose:
    action = Action(action)
    if action is Action.RotateLeft:
        return Pose(pose.x, pose.y, (pose.heading - ROTATION_STEP) % 360.0)
    if action is Action.RotateRight:
        return Pose(pose.x, pose.y, (pose.heading + ROTATION_STEP) % 360.0)
    dx, dy = translation_delta(pose.heading, action)
    nx, ny = pose.x + dx, pose.y + dy
    if not grid.is_free(nx, ny):
        return pose
    return Pose(nx, ny, pose.heading)


def bearing(pose: Pose, x: float, y: float) -> float:
    """Signed angle in degrees from the view axis to the point, in (-180, 180]."""
    b = math.degrees(math.atan2(y - pose.y, x - pose.x))
    d = (b - pose.heading) % 360.0
    return d - 360.0 if d > 180.0 else d


# -- planning ----------------------------------------------------------------
_NEIGHBOURS = ((1, 0), (-1, 0), (0, 1), (0, -1))


def astar(grid: OccupancyGrid, start: tuple[int, int], goals: Sequence[tuple[int, int]]) -> list[tuple[int, int]]:
    """Shortest 4-connected cell path from ``start`` to the nearest goal cell.

    Unit step costs; the heuristic is the Euclidean distance (in cells) to the
    closest goal, which never overestimates a 4-connected path length.
    """
    goal_arr = np.array(list(goals), dtype=float).reshape(-1, 2)
    if len(goal_arr) == 0:
        raise NoPath("empty goal set")
    goal_set = {tuple(map(int, g)) for g in goal_arr}
    if not grid.inside(*start) or grid.blocked[start[1], start[0]]:
        raise NoPath(f"start cell {start} is blocked")

    def h(c):
        return float(np.min(np.hypot(goal_arr[:, 0] - c[0], goal_arr[:, 1] - c[1])))

    g_cost = {start: 0}
    parent: dict[tuple[int, int], tuple[int, int] | None] = {start: None}
    frontier = [(h(start), 0, start)]
    counter = 0
    while frontier:
        _, _, cur = heapq.heappop(frontier)
        if cur in goal_set:
            path = [cur]
            while parent[path[-1]] is not None:
                path.append(parent[path[-1]])
            return path[::-1]
        gc = g_cost[cur]
        for dx, dy in _NEIGHBOURS:
            nb = (cur[0] + dx, cur[1] + dy)
            if not grid.inside(*nb) or grid.blocked[nb[1], nb[0]]:
                continue
            if gc + 1 < g_cost.get(nb, math.inf):
                g_cost[nb] = gc + 1
                parent[nb] = cur
                counter += 1
                heapq.heappush(frontier, (gc + 1 + h(nb), counter, nb))
    raise NoPath(f"no path from {start} to any of {len(goal_set)} goal cells")


def target_goal_cells(grid: OccupancyGrid, scene: Scene, target: int, radius: float = AGENT_RADIUS) -> list[tuple[int, int]]:
    """Free cells 4-adjacent to the cells blocked by the target's inflated footprint."""
    xs = grid.origin[0] + np.arange(grid.width) * grid.resolution
    ys = grid.origin[1] + np.arange(grid.height) * grid.resolution
    x0, y0 = np.meshgrid(xs, ys)
    cells = (x0, y0, x0 + grid.resolution, y0 + grid.resolution)
    tblock = rect_blocked_cells(scene.object(target).footprint, radius, cells)
    near = np.zeros_like(tblock)
    near[1:, :] |= tblock[:-1, :]
    near[:-1, :] |= tblock[1:, :]
    near[:, 1:] |= tblock[:, :-1]
    near[:, :-1] |= tblock[:, 1:]
    iy, ix = np.nonzero(near & ~grid.blocked)
    return list(zip(ix.tolist(), iy.tolist()))


def path_to_actions(grid: OccupancyGrid, pose: Pose, path: Sequence[tuple[int, int]], goals,
                    face: tuple[float, float] | None = None, horizon: int | None = HORIZON) -> list[Action]:
    """Turn a cell path into actions: greedy heading-fixed translations toward
    the waypoint a step ahead, then rotations until ``face`` is within one
    degree of the view axis. With a horizon the result is truncated or padded
    with alternating rotations to exactly ``horizon`` actions."""
    goal_set = set(map(tuple, goals))
    centers = [grid.center(*c) for c in path]
    stride = max(1, int(round(STEP_SIZE / grid.resolution)))
    limit = horizon if horizon is not None else 4 * len(path) + 400
    actions: list[Action] = []
    k = 0
    while len(actions) < limit:
        if grid.cell_of(pose.x, pose.y) in goal_set:
            break
        # progress index: nearest path point at or after the current one
        window = range(k, min(k + 4 * stride + 1, len(centers)))
        k = min(window, key=lambda j: math.hypot(centers[j][0] - pose.x, centers[j][1] - pose.y))
        wx, wy = centers[min(k + stride, len(centers) - 1)]
        here = math.hypot(wx - pose.x, wy - pose.y)
        best, best_d = None, here - 1e-9
        for a in _TRANSLATIONS:
            nxt = step(pose, a, grid)
            if nxt is pose:
                continue
            d = math.hypot(wx - nxt.x, wy - nxt.y)
            if d < best_d:
                best, best_d = a, d
        if best is None:
            break
        actions.append(best)
        pose = step(pose, best, grid)
    if face is not None:
        while len(actions) < limit:
            off = bearing(pose, *face)
            if abs(off) <= 1.0:
                break
            a = Action.RotateRight if off > 0 else Action.RotateLeft
            actions.append(a)
            pose = step(pose, a, grid)
    if horizon is not None:
        pad = [Action.RotateRight, Action.RotateLeft]
        i = 0
        while len(actions) < horizon:
            actions.append(pad[i % 2])
            i += 1
    return actions


def shortest_path(grid: OccupancyGrid, spawn: Pose, scene: Scene, target: int, horizon: int | None = HORIZON) -> list[Action]:
    goals = target_goal_cells(grid, scene, target)
    path = astar(grid, grid.cell_of(spawn.x, spawn.y), goals)
    return path_to_actions(grid, spawn, path, goals, face=scene.object(target).footprint.center, horizon=horizon)


# -- episodes ------------------------------------------------------------------
@dataclass(frozen=True)
class Episode:
    id: str
    scene_id: int
    spawn: Pose
    target: int
    category: int
    b0: tuple[int, int, int, int]
    difficulty: str
    split: str
    truth: AmodalTruth = field(compare=False, repr=False)
    shortest: tuple[int, ...] = ()

    @property
    def visibility(self) -> float:
        return self.truth.visibility


@dataclass
class Trajectory:
    poses: list[Pose]
    actions: list[int]
    frames: list[Frame]
    provenance: str

    @property
    def horizon(self) -> int:
        return len(self.actions)


def rollout(scene: Scene, grid: OccupancyGrid, camera: Camera, spawn: Pose, actions: Sequence[int],
            provenance: str, first_frame: Frame | None = None) -> Trajectory:
    poses = [spawn]
    frames = [first_frame if first_frame is not None else render_frame(scene, spawn, camera)]
    for a in actions:
        poses.append(step(poses[-1], Action(a), grid))
        frames.append(render_frame(scene, poses[-1], camera))
    return Trajectory(poses, [int(a) for a in actions], frames, provenance)


def sample_episodes(scene: Scene, rng: np.random.Generator, camera: Camera, grid: OccupancyGrid | None = None,
                    cap: int = CATEGORY_CAP, per_object: int = 3, attempts_per_object: int = 40,
                    horizon: int = HORIZON, split: str = "train", easy_keep: float = 1.0) -> list[Episode]:
    """Spawn poses 3-6 m from a target that sees at least a fifth of its
    amodal mask; at most ``cap`` episodes per category. Valid easy spawns are
    kept with probability ``easy_keep`` to balance the difficulty split."""
    grid = grid or rasterize_occupancy(scene, GRID_RESOLUTION, AGENT_RADIUS)
    free = grid.free_cells()
    if len(free) == 0:
        return []
    cx, cy = grid.center(free[:, 0], free[:, 1])
    per_cat: dict[int, int] = {}
    episodes: list[Episode] = []
    order = rng.permutation(len(scene.objects))
    jitter = 0.45 * camera.hfov
    for oi in order:
        obj = scene.objects[oi]
        cat = int(obj.category)
        if per_cat.get(cat, 0) >= cap:
            continue
        ox, oy = obj.footprint.center
        dist = np.hypot(cx - ox, cy - oy)
        cand = np.flatnonzero((dist >= SPAWN_BAND[0]) & (dist <= SPAWN_BAND[1]))
        if len(cand) == 0:
            continue
        cand = rng.permutation(cand)[:attempts_per_object]
        kept = 0
        for k in cand:
            if kept >= per_object or per_cat.get(cat, 0) >= cap:
                break
            x, y = float(cx[k]), float(cy[k])
            heading = _q((math.degrees(math.atan2(oy - y, ox - x)) + rng.uniform(-jitter, jitter)) % 360.0)
            pose = Pose(x, y, heading)
            frame = render_frame(scene, pose, camera)
            truth = render_amodal(scene, pose, camera, obj.id, frame)
            if truth.visibility < MIN_VISIBILITY or not truth.visible_mask.any():
                continue
            if truth.visibility >= HARD_VISIBILITY and rng.random() >= easy_keep:
                continue
            try:
                sp = shortest_path(grid, pose, scene, obj.id, horizon)
            except NoPath:
                continue
            idx = len(episodes)
            episodes.append(Episode(
                id=f"s{scene.id:04d}e{idx:03d}", scene_id=scene.id, spawn=pose, target=obj.id, category=cat,
                b0=visible_bbox(frame, obj.id),
                difficulty="hard" if truth.visibility < HARD_VISIBILITY else "easy",
                split=split, truth=truth, shortest=tuple(int(a) for a in sp),
            ))
            kept += 1
            per_cat[cat] = per_cat.get(cat, 0) + 1
    return episodes


def check_episode(ep: Episode, scene: Scene) -> None:
    ox, oy = scene.object(ep.target).footprint.center
    d = math.hypot(ep.spawn.x - ox, ep.spawn.y - oy)
    if not SPAWN_BAND[0] <= d <= SPAWN_BAND[1]:
        raise DatasetError(f"{ep.id}: spawn distance {d:.3f} outside {SPAWN_BAND}")
    if ep.truth.visibility < MIN_VISIBILITY:
        raise DatasetError(f"{ep.id}: visibility {ep.truth.visibility:.3f} below {MIN_VISIBILITY}")
    if (ep.difficulty == "hard") != (ep.truth.visibility < HARD_VISIBILITY):
        raise DatasetError(f"{ep.id}: difficulty tag disagrees with visibility")


# -- dataset files ---------------------------------------------------------------
@dataclass
class Dataset:
    root: Path
    scenes: dict[int, Scene]
    episodes: list[Episode]
    splits: dict[str, list[int]]
    camera: Camera
    meta: dict = field(default_factory=dict)
    _grids: dict[int, OccupancyGrid] = field(default_factory=dict, repr=False)

    def split(self, name: str) -> list[Episode]:
        return [e for e in self.episodes if e.split == name]

    def episode(self, episode_id: str) -> Episode:
        for e in self.episodes:
            if e.id == episode_id:
                return e
        raise KeyError(episode_id)

    def grid(self, scene_id: int) -> OccupancyGrid:
        if scene_id not in self._grids:
            self._grids[scene_id] = rasterize_occupancy(self.scenes[scene_id], GRID_RESOLUTION, AGENT_RADIUS)
        return self._grids[scene_id]


def _episode_record(ep: Episode) -> dict:
    t = ep.truth
    return {
        "id": ep.id,
        "scene_id": ep.scene_id,
        "split": ep.split,
        "spawn": [ep.spawn.x, ep.spawn.y, ep.spawn.heading],
        "target": ep.target,
        "category": ep.category,
        "b0": list(ep.b0),
        "difficulty": ep.difficulty,
        "visibility": t.visibility,
        "amodal_box": list(t.amodal_box) if t.amodal_box else None,
        "amodal_rle": rle.encode(t.amodal_mask),
        "visible_rle": rle.encode(t.visible_mask),
        "shortest": list(ep.shortest),
    }


def _episode_from_record(r: dict) -> Episode:
    amodal = rle.decode(r["amodal_rle"])
    visible = rle.decode(r["visible_rle"])
    truth = AmodalTruth(amodal, tuple(r["amodal_box"]) if r["amodal_box"] else None, visible, float(r["visibility"]))
    return Episode(r["id"], int(r["scene_id"]), Pose(*r["spawn"]), int(r["target"]), int(r["category"]),
                   tuple(r["b0"]), r["difficulty"], r["split"], truth, tuple(r["shortest"]))


def save_dataset(root, scenes: dict[int, Scene], episodes: list[Episode], splits: dict[str, list[int]],
                 camera: Camera, meta: dict | None = None) -> Path:
    root = Path(root)
    _check_splits(splits)
    (root / "scenes").mkdir(parents=True, exist_ok=True)
    for sid, sc in sorted(scenes.items()):
        save_scene(sc, root / "scenes" / f"scene_{sid:04d}.evrscene")
    with open(root / "episodes.jsonl", "w") as fh:
        for ep in episodes:
            fh.write(json.dumps(_episode_record(ep)) + "\n")
    index = {
        "format": "evrlab-dataset",
        "version": DATASET_VERSION,
        "camera": camera.__dict__,
        "splits": {k: sorted(v) for k, v in splits.items()},
        "meta": meta or {},
    }
    (root / "index.json").write_text(json.dumps(index, indent=1, sort_keys=True) + "\n")
    return root


def _check_splits(splits: dict[str, list[int]]) -> None:
    seen: dict[int, str] = {}
    for name, ids in splits.items():
        for sid in ids:
            if sid in seen:
                raise DatasetError(f"scene {sid} appears in both {seen[sid]!r} and {name!r} splits")
            seen[sid] = name


def load_dataset(root) -> Dataset:
    root = Path(root)
    try:
        index = json.loads((root / "index.json").read_text())
    except FileNotFoundError:
        raise DatasetError(f"{root}: no index.json") from None
    if index.get("format") != "evrlab-dataset":
        raise DatasetError(f"{root}: not a dataset index")
    if index.get("version") != DATASET_VERSION:
        raise DatasetError(f"{root}: dataset version {index.get('version')}, expected {DATASET_VERSION}")
    splits = {k: [int(s) for s in v] for k, v in index["splits"].items()}
    _check_splits(splits)
    owner = {sid: name for name, ids in splits.items() for sid in ids}
    scenes = {sid: load_scene(root / "scenes" / f"scene_{sid:04d}.evrscene") for sid in owner}
    episodes = []
    with open(root / "episodes.jsonl") as fh:
        for line in fh:
            ep = _episode_from_record(json.loads(line))
            if owner.get(ep.scene_id) != ep.split:
                raise DatasetError(f"{ep.id}: split {ep.split!r} but scene {ep.scene_id} is in {owner.get(ep.scene_id)!r}")
            episodes.append(ep)
    return Dataset(root, scenes, episodes, splits, Camera(**index["camera"]), index.get("meta", {}))


def scene_seed(master_seed: int, index: int) -> int:
    return int.from_bytes(hashlib.sha256(f"{master_seed}:{index}".encode()).digest()[:4], "little")


def generate_dataset(root, seed: int, counts: dict[str, int], camera: Camera | None = None,
                     scene_config: SceneConfig | None = None, horizon: int = HORIZON,
                     meta: dict | None = None, log=None, easy_keep: float = 1.0, per_object: int = 3) -> Dataset:
    """Generate scenes and episodes for each split; scene ids are global and
    every scene belongs to exactly one split."""
    camera = camera or Camera()
    scenes: dict[int, Scene] = {}
    episodes: list[Episode] = []
    splits: dict[str, list[int]] = {}
    sid = 0
    for name in ("train", "val", "test"):
        splits[name] = []
        for _ in range(counts.get(name, 0)):
            s = scene_seed(seed, sid)
            sc = generate_scene(s, scene_config, scene_id=sid)
            eps = sample_episodes(sc, np.random.default_rng(s + 1), camera, horizon=horizon, split=name,
                                  easy_keep=easy_keep, per_object=per_object)
            scenes[sid] = sc
            episodes.extend(eps)
            splits[name].append(sid)
            if log:
                log(f"scene {sid} ({name}): {len(eps)} episodes")
            sid += 1
    save_dataset(root, scenes, episodes, splits, camera, meta)
    return load_dataset(root)


def revalidate(ds: Dataset, ep: Episode) -> bool:
    """Re-render an episode's spawn view and compare with the stored truth bit for bit."""
    sc = ds.scenes[ep.scene_id]
    frame = render_frame(sc, ep.spawn, ds.camera)
    t = render_amodal(sc, ep.spawn, ds.camera, ep.target, frame)
    return (np.array_equal(t.amodal_mask, ep.truth.amodal_mask) and np.array_equal(t.visible_mask, ep.truth.visible_mask)
            and t.visibility == ep.truth.visibility and t.amodal_box == ep.truth.amodal_box
            and visible_bbox(frame, ep.target) == ep.b0)


__all__ = [
    "Action", "Episode", "Trajectory", "Dataset", "NoPath", "DatasetError", "NoVisiblePixels", "START_TOKEN",
    "step", "astar", "shortest_path", "path_to_actions", "target_goal_cells", "sample_episodes", "rollout",
    "save_dataset", "load_dataset", "generate_dataset", "revalidate", "check_episode", "bearing", "mask_bbox",
]
