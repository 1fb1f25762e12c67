import json
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from evrlab.episodes import (
    CATEGORY_CAP,
    Action,
    DatasetError,
    NoPath,
    astar,
    check_episode,
    generate_dataset,
    load_dataset,
    path_to_actions,
    revalidate,
    rollout,
    sample_episodes,
    save_dataset,
    shortest_path,
    step,
    target_goal_cells,
)
from evrlab.render import Camera, Pose, render_amodal, render_frame
from evrlab.world import Category, ObjectInstance, OccupancyGrid, Rect, Scene, generate_scene, rasterize_occupancy

from oracles import bfs_length, vector_ray_instances

CAM = Camera()


def _open_grid(n=40, res=0.25):
    return OccupancyGrid(res, n, n, (0.0, 0.0), np.zeros((n, n), bool))


# -- kinematics ------------------------------------------------------------------
def test_rotate_left_wraps():
    assert step(Pose(1, 1, 0), Action.RotateLeft, _open_grid()).heading == 358.0


def test_rotate_right_adds_two_degrees():
    assert step(Pose(1, 1, 359), Action.RotateRight, _open_grid()).heading == 1.0


def test_forward_at_ninety_moves_plus_y():
    p = step(Pose(2, 2, 90), Action.MoveForward, _open_grid())
    assert p.x == 2 and p.y == 2.25 and p.heading == 90


def test_strafes_do_not_change_heading():
    g = _open_grid()
    right = step(Pose(2, 2, 0), Action.MoveRight, g)
    left = step(Pose(2, 2, 0), Action.MoveLeft, g)
    assert (right.x, right.y, right.heading) == (2, 2.25, 0)
    assert (left.x, left.y, left.heading) == (2, 1.75, 0)


def test_blocked_translation_is_noop():
    g = _open_grid()
    g.blocked[:, 10:] = True  # x >= 2.5
    p = Pose(2.375, 1.0, 0)
    assert step(p, Action.MoveForward, g) == p


@settings(max_examples=200, deadline=None)
@given(st.floats(3, 7), st.floats(3, 7), st.floats(0, 360), st.sampled_from([(0, 1), (2, 3), (4, 5)]))
def test_opposite_actions_cancel_exactly(x, y, heading, pair):
    g = _open_grid()
    p = step(Pose(x, y, heading), Action.RotateRight, g)
    p = step(p, Action.RotateLeft, g)  # quantised heading
    a, b = pair
    q = step(step(p, Action(a), g), Action(b), g)
    assert (q.x, q.y, q.heading) == (p.x, p.y, p.heading)


def test_random_actions_stay_in_free_cells():
    scene = generate_scene(12)
    grid = rasterize_occupancy(scene, 0.125, 0.2)
    rng = np.random.default_rng(0)
    ix, iy = grid.free_cells()[0]
    pose = Pose(*grid.center(ix, iy), 0.0)
    for a in rng.integers(0, 6, size=2000):
        pose = step(pose, Action(int(a)), grid)
        assert grid.is_free(pose.x, pose.y)


# -- planning ----------------------------------------------------------------------
def _random_grid(rng, n=20, p=0.3):
    return OccupancyGrid(1.0, n, n, (0.0, 0.0), rng.random((n, n)) < p)


@pytest.mark.parametrize("case", range(100))
def test_astar_matches_bfs(case):
    rng = np.random.default_rng(case)
    grid = _random_grid(rng)
    free = np.argwhere(~grid.blocked)[:, ::-1]
    start = tuple(int(v) for v in free[rng.integers(len(free))])
    goals = [tuple(int(v) for v in free[k]) for k in rng.choice(len(free), size=3, replace=False)]
    expected = bfs_length(grid.blocked, start, goals)
    if expected is None:
        with pytest.raises(NoPath):
            astar(grid, start, goals)
        return
    path = astar(grid, start, goals)
    assert len(path) - 1 == expected
    assert path[0] == start and path[-1] in goals
    for a, b in zip(path, path[1:]):
        assert abs(a[0] - b[0]) + abs(a[1] - b[1]) == 1
        assert not grid.blocked[b[1], b[0]]


@pytest.mark.parametrize("case", range(30))
def test_path_execution_reaches_goal(case):
    rng = np.random.default_rng(1000 + case)
    n = 20
    grid = OccupancyGrid(0.25, n, n, (0.0, 0.0), rng.random((n, n)) < 0.3)
    free = np.argwhere(~grid.blocked)[:, ::-1]
    while True:
        start = tuple(int(v) for v in free[rng.integers(len(free))])
        goal = tuple(int(v) for v in free[rng.integers(len(free))])
        if bfs_length(grid.blocked, start, [goal]) is not None:
            break
    path = astar(grid, start, [goal])
    pose = Pose(*grid.center(*start), float(rng.choice([0, 90, 180, 270])))
    actions = path_to_actions(grid, pose, path, [goal], horizon=None)
    for a in actions:
        pose = step(pose, a, grid)
    assert grid.cell_of(pose.x, pose.y) == goal
    assert len(actions) == len(path) - 1


def _corridor_scene():
    # 1 m of free floor between the agent and the goal cells in front of the target
    target = ObjectInstance(1, Category.fridge, Rect(2.0, 0.0, 2.5, 1.5), 1.7)
    return Scene(0, Rect(0, 0, 3.0, 1.5), (), (target,), 0)


def test_straight_corridor_four_forward_then_align():
    scene = _corridor_scene()
    grid = rasterize_occupancy(scene, 0.125, 0.2)
    goals = target_goal_cells(grid, scene, 1)
    gx = max(c[0] for c in goals if grid.center(*c)[0] < 2.0)
    spawn_x = grid.center(gx, 0)[0] - 1.0
    spawn = Pose(spawn_x, 0.6875, 0.0)
    start = grid.cell_of(spawn.x, spawn.y)
    assert bfs_length(grid.blocked, start, goals) == 8  # 1 m in 0.125 m cells
    actions = shortest_path(grid, spawn, scene, 1, horizon=None)
    assert actions[:4] == [Action.MoveForward] * 4
    assert all(a in (Action.RotateLeft, Action.RotateRight) for a in actions[4:])
    end = spawn
    for a in actions:
        end = step(end, a, grid)
    assert grid.cell_of(end.x, end.y) in goals
    from evrlab.episodes import bearing
    assert abs(bearing(end, 2.25, 0.75)) <= 1.0


def test_adjacent_spawn_facing_target_pads_with_rotations():
    scene = _corridor_scene()
    grid = rasterize_occupancy(scene, 0.125, 0.2)
    goals = target_goal_cells(grid, scene, 1)
    cell = next(c for c in goals if abs(grid.center(*c)[1] - 0.75) < 0.07 and grid.center(*c)[0] < 2)
    x, y = grid.center(*cell)
    heading = math.degrees(math.atan2(0.75 - y, 2.25 - x))
    actions = shortest_path(grid, Pose(x, y, heading), scene, 1)
    assert len(actions) == 10
    assert actions == [Action.RotateRight, Action.RotateLeft] * 5


def test_unreachable_target_raises():
    target = ObjectInstance(1, Category.fridge, Rect(2.0, 0.5, 2.5, 1.0), 1.7)
    scene = Scene(0, Rect(0, 0, 3.0, 1.5), (), (target,), 0)
    grid = rasterize_occupancy(scene, 0.125, 0.2)
    grid.blocked[:, 6] = True  # cut the room at x = 0.75
    with pytest.raises(NoPath):
        shortest_path(grid, Pose(0.3, 0.7, 0), scene, 1)


# -- sampling ----------------------------------------------------------------------
def test_distance_band_empty_gives_no_episodes():
    obj = ObjectInstance(1, Category.chair, Rect(0.8, 0.8, 1.2, 1.2), 0.9)
    scene = Scene(0, Rect(0, 0, 2, 2), (), (obj,), 0)
    assert sample_episodes(scene, np.random.default_rng(0), CAM) == []


def test_category_cap_enforced():
    # ten chairs, each with many valid spawns
    objs = tuple(ObjectInstance(i + 1, Category.chair, Rect(1 + 0.9 * i, 9.0, 1.5 + 0.9 * i, 9.5), 0.9) for i in range(10))
    scene = Scene(0, Rect(0, 0, 11, 11), (), objs, 0)
    eps = sample_episodes(scene, np.random.default_rng(0), CAM, per_object=5, attempts_per_object=40)
    assert 0 < len(eps) <= CATEGORY_CAP


@pytest.mark.parametrize("seed", range(50))
def test_sampled_episodes_satisfy_invariants(seed):
    scene = generate_scene(500 + seed)
    grid = rasterize_occupancy(scene, 0.125, 0.2)
    eps = sample_episodes(scene, np.random.default_rng(seed), CAM, grid, per_object=1, attempts_per_object=10)
    counts = {}
    for ep in eps:
        check_episode(ep, scene)
        ox, oy = scene.object(ep.target).footprint.center
        assert 3 <= math.hypot(ep.spawn.x - ox, ep.spawn.y - oy) <= 6
        assert grid.is_free(ep.spawn.x, ep.spawn.y)
        # visibility recomputed from independent per-pixel rays
        pad = CAM.border_pad
        full = vector_ray_instances(scene, ep.spawn, CAM, range(CAM.height), range(CAM.width))
        alone = vector_ray_instances(scene, ep.spawn, CAM, range(-pad, CAM.height + pad),
                                     range(-pad, CAM.width + pad), only={ep.target}, walls=False)
        vis = (full == ep.target).sum() / (alone == ep.target).sum()
        assert vis == ep.visibility
        assert vis >= 0.2
        assert (ep.difficulty == "hard") == (vis < 0.5)
        counts[ep.category] = counts.get(ep.category, 0) + 1
        assert len(ep.shortest) == 10
    assert all(v <= CATEGORY_CAP for v in counts.values())


def test_rollout_follows_step():
    scene = generate_scene(3)
    grid = rasterize_occupancy(scene, 0.125, 0.2)
    ep = sample_episodes(scene, np.random.default_rng(0), CAM, grid, per_object=1)[0]
    traj = rollout(scene, grid, CAM, ep.spawn, ep.shortest, "shortest")
    assert traj.horizon == 10 and len(traj.frames) == 11
    for t, a in enumerate(traj.actions):
        assert traj.poses[t + 1] == step(traj.poses[t], Action(a), grid)
    np.testing.assert_array_equal(traj.frames[3].instance_id, render_frame(scene, traj.poses[3], CAM).instance_id)


# -- dataset files -------------------------------------------------------------
@pytest.fixture(scope="module")
def small_dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("ds")
    return generate_dataset(root, seed=3, counts={"train": 3, "val": 1, "test": 2})


def test_dataset_round_trip(small_dataset, tmp_path):
    ds = small_dataset
    again = load_dataset(ds.root)
    assert again.episodes == ds.episodes
    assert again.scenes == ds.scenes
    for a, b in zip(again.episodes, ds.episodes):
        np.testing.assert_array_equal(a.truth.amodal_mask, b.truth.amodal_mask)
    save_dataset(tmp_path, ds.scenes, ds.episodes, ds.splits, ds.camera)
    assert load_dataset(tmp_path).episodes == ds.episodes


def test_splits_are_disjoint_by_scene(small_dataset):
    ds = small_dataset
    train = {e.scene_id for e in ds.split("train")}
    test = {e.scene_id for e in ds.split("test")}
    assert train and test and not train & test


def test_scene_in_two_splits_rejected(small_dataset, tmp_path):
    ds = small_dataset
    bad = dict(ds.splits)
    bad["test"] = bad["test"] + [bad["train"][0]]
    with pytest.raises(DatasetError, match="both"):
        save_dataset(tmp_path, ds.scenes, ds.episodes, bad, ds.camera)


def test_version_mismatch_rejected(small_dataset, tmp_path):
    ds = small_dataset
    save_dataset(tmp_path, ds.scenes, ds.episodes, ds.splits, ds.camera)
    idx = json.loads((tmp_path / "index.json").read_text())
    idx["version"] = 99
    (tmp_path / "index.json").write_text(json.dumps(idx))
    with pytest.raises(DatasetError, match="version"):
        load_dataset(tmp_path)


def test_every_episode_revalidates(small_dataset):
    for ep in small_dataset.episodes:
        assert revalidate(small_dataset, ep)


def test_generation_is_reproducible(small_dataset, tmp_path):
    again = generate_dataset(tmp_path, seed=3, counts={"train": 3, "val": 1, "test": 2})
    assert again.episodes == small_dataset.episodes


@pytest.mark.slow
def test_default_generation_revalidates(tmp_path):
    ds = generate_dataset(tmp_path, seed=0, counts={"train": 40, "val": 5, "test": 10})
    assert ds.episodes
    for ep in ds.episodes:
        assert revalidate(ds, ep)
        truth = render_amodal(ds.scenes[ep.scene_id], ep.spawn, ds.camera, ep.target)
        assert truth.visibility == ep.visibility
