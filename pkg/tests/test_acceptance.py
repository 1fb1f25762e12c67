"""Acceptance checks, one test per criterion.

Criteria 7 to 9 read the three-seed desk benchmark written by
``evrlab pipeline --out $EVRLAB_BENCH --seeds 0 1 2`` (default ``/root/bench``)
and fail when it is missing.
"""
import json
import os
import time
from pathlib import Path

import numpy as np
import pytest

from evrlab.config import RunConfig
from evrlab.envd import ERR, RESET, STEP, EnvClient, EnvServer
from evrlab.episodes import Action, astar, generate_dataset, path_to_actions, rollout, step
from evrlab.harness.data import build_batch
from evrlab.harness.evaluate import MetricReport
from evrlab.harness.metrics import amask_occ_iou, iou_box, iou_mask
from evrlab.harness.train import perception_model, train_perception
from evrlab.perception import perception_loss
from evrlab.policy import PolicyModel, log_prob, recognition_reward, reinforce_loss
from evrlab.render import Camera, Pose, render_frame
from evrlab.world import OccupancyGrid, generate_scene

from gradcheck import check_op, coordinate_check
from oracles import bfs_length, mask_iou_by_count, vector_ray_instances
from test_harness import _cells, _occ_oracle, _random_truth
from test_perception import _images, _targets, _tiny
from test_policy import _obs, bandit
from test_render import _random_poses
from test_tensor import _primitive_cases

BENCH = Path(os.environ.get("EVRLAB_BENCH", "/root/bench"))
SEEDS = range(5)


def test_c01_gradients_of_primitives_and_networks():
    t0 = time.perf_counter()
    worst = {}
    for seed in SEEDS:
        for name, (fn, arrays) in _primitive_cases(np.random.default_rng(seed)).items():
            worst[name] = max(worst.get(name, 0.0), check_op(fn, arrays, seed=seed))
        rng = np.random.default_rng(seed)
        m = _tiny(seed)
        imgs, b0, tg = _images(rng, 2, 3), np.array([[4.0, 3.0, 20.0, 18.0], [10.0, 9.0, 33.0, 30.0]]), _targets(rng, 2)
        worst["perception"] = max(worst.get("perception", 0.0),
                                  coordinate_check(lambda: perception_loss(m.run(imgs, b0), tg), m.parameters(), seed=seed))
        pol = PolicyModel(rng, channels=(4, 4, 4, 4), embed=3, hidden=5)
        bm, i0, it = _obs(rng)

        def policy_loss():
            h = pol.initial_state(2)
            z = pol.encode(bm, i0, it)
            p1, h = pol.act(h, z, [6, 6])
            p2, _ = pol.act(h, z, [0, 3])
            return reinforce_loss([log_prob(p1, [2, 4]), log_prob(p2, [1, 5])], np.array([[0.5, -1.0], [2.0, 0.3]]), 0.2)
        worst["policy"] = max(worst.get("policy", 0.0), coordinate_check(policy_loss, pol.parameters(), seed=seed))
    elapsed = time.perf_counter() - t0
    bad = {k: v for k, v in worst.items() if not v < 1e-3}
    assert not bad, bad
    assert elapsed < 120, elapsed


def test_c02_renderer_matches_ray_oracle_on_20_scenes():
    cam = Camera()
    t0 = time.perf_counter()
    for seed in range(20):
        scene = generate_scene(1000 + seed)
        for pose in _random_poses(scene, 2, seed):
            oracle = vector_ray_instances(scene, pose, cam, range(cam.height), range(cam.width))
            np.testing.assert_array_equal(render_frame(scene, pose, cam).instance_id, oracle)
    assert time.perf_counter() - t0 < 60


def test_c03_geometry_metrics_match_enumeration():
    rng = np.random.default_rng(33)
    for _ in range(1000):
        a = np.sort(rng.integers(0, 20, size=(2, 2)), axis=0).T.reshape(-1)[[0, 2, 1, 3]]
        b = np.sort(rng.integers(0, 20, size=(2, 2)), axis=0).T.reshape(-1)[[0, 2, 1, 3]]
        ca, cb = _cells(a), _cells(b)
        assert iou_box(a, b) == (len(ca & cb) / len(ca | cb) if ca | cb else 1.0)
        shape = tuple(rng.integers(1, 12, size=2))
        ma, mb = rng.random(shape) < rng.random(), rng.random(shape) < rng.random()
        assert iou_mask(ma, mb) == mask_iou_by_count(ma, mb)
        truth = _random_truth(rng)
        pred = rng.random(truth.amodal_mask.shape) < 0.5
        assert amask_occ_iou(pred, truth, 2) == _occ_oracle(pred, truth, 2)
        n = sum(bool(v) for v in truth.amodal_mask.ravel())
        seen = sum(bool(v) for v in truth.visible_mask.ravel())
        assert truth.visibility == (seen / n if n else 0.0)


def test_c04_astar_is_shortest_and_executes():
    reached = 0
    for case in range(100):
        rng = np.random.default_rng(4000 + case)
        grid = OccupancyGrid(0.25, 20, 20, (0.0, 0.0), rng.random((20, 20)) < 0.3)
        free = np.argwhere(~grid.blocked)[:, ::-1]
        start = tuple(int(v) for v in free[rng.integers(len(free))])
        goal = tuple(int(v) for v in free[rng.integers(len(free))])
        expected = bfs_length(grid.blocked, start, [goal])
        if expected is None:
            continue
        path = astar(grid, start, [goal])
        assert len(path) - 1 == expected
        pose = Pose(*grid.center(*start), float(rng.choice([0, 90, 180, 270])))
        for a in path_to_actions(grid, pose, path, [goal], horizon=None):
            pose = step(pose, a, grid)
        assert grid.cell_of(pose.x, pose.y) == goal
        reached += 1
    assert reached >= 50


def _bench_dirs():
    dirs = sorted(BENCH.glob("seed_*"))
    assert len(dirs) >= 3, f"three-seed benchmark missing under {BENCH}"
    return dirs


def test_c05_reward_identities():
    assert recognition_reward(True, 0.5, 0.4) == pytest.approx(13.1, abs=1e-12)
    assert recognition_reward(True, 1.0, 1.0) == pytest.approx(30.1, abs=1e-12)
    count = 0
    for d in _bench_dirs():
        for line in (d / "logs" / "policy.episodes.jsonl").read_text().splitlines():
            rec = json.loads(line)
            r = rec["r"]
            assert abs(sum(rec["R"]) - (r[-1] - r[0])) <= 1e-12 * max(1.0, abs(r[-1]))
            assert len(rec["R"]) == len(r) - 1
            count += 1
    assert count > 0


@pytest.mark.slow
def test_c06a_stage1_overfits_50_episodes(tmp_path):
    ds = generate_dataset(tmp_path, seed=2018, counts={"train": 3}, easy_keep=0.45, per_object=2)
    eps = ds.split("train")[:50]
    assert len(eps) == 50
    cfg = RunConfig().override(["stage1.max_epochs=200", "stage1.patience=200"])
    batch = build_batch(ds, eps, "shortest", cfg.data.horizon)
    model = perception_model(cfg, ds, np.random.default_rng(0))
    t0 = time.perf_counter()
    res = train_perception(model, batch, batch, cfg.stage1, np.random.default_rng(0), "overfit",
                           until=lambda r: r["val_acc"] == 1.0 and r["val_mask_iou"] > 0.9)
    elapsed = time.perf_counter() - t0
    best = res.rows[res.best_epoch]
    assert best["val_acc"] == 1.0 and best["val_mask_iou"] > 0.9, best
    assert elapsed < 600, elapsed


def test_c06b_bandit_favours_action():
    t0 = time.perf_counter()
    assert bandit(0, episodes=500) > 0.9
    assert time.perf_counter() - t0 < 600


def _reports(name: str) -> list[MetricReport]:
    stem = name.replace("/", "_").replace("*", "star")
    return [MetricReport.from_json((d / "eval" / f"{stem}.json").read_text()) for d in _bench_dirs()]


def _mean_se(values):
    v = np.array(values, dtype=float)
    return v.mean(), v.std(ddof=1) / np.sqrt(v.size)


def test_c07_active_beats_passive_on_hard_occluded_iou():
    cell = {b: [r.cell("amask_occ_iou", "hard") for r in _reports(b)] for b in ("PP/PP", "SP/RP", "AP/AP")}
    (ap, ap_se), (pp, pp_se), (rp, _) = (_mean_se(cell[b]) for b in ("AP/AP", "PP/PP", "SP/RP"))
    assert ap - pp > np.hypot(ap_se, pp_se), cell
    assert rp >= pp, cell


def test_c08_active_mask_iou_rises_on_hard_split():
    curves = np.array([r.curves["amask_iou"]["hard"] for r in _reports("AP/AP")], dtype=float)
    mean = curves.mean(axis=0)
    assert mean[10] >= mean[0], mean


def test_c09_shortest_path_distance_non_increasing():
    sp = np.array([r.distance for r in _reports("SP/SP")]).mean(axis=0)
    assert np.all(np.diff(sp) <= 1e-9), sp
    ap = np.array([r.distance for r in _reports("AP/AP")])
    assert ap.shape[1] == 11 and np.isfinite(ap).all()
    rows = (BENCH / "seed_0" / "report" / "distance.csv").read_text().splitlines()
    assert any(r.startswith("AP/AP,") for r in rows)


def test_c10_loopback_replay_and_error_codes(tmp_path):
    ds = generate_dataset(tmp_path, seed=5, counts={"train": 2, "test": 1}, per_object=1)
    ep = ds.split("train")[0]
    offline = rollout(ds.scenes[ep.scene_id], ds.grid(ep.scene_id), ds.camera, ep.spawn, ep.shortest, "shortest")
    srv = EnvServer(ds)
    srv.start_background()
    codes = set()

    def err(reply):
        op, body = reply
        assert op == ERR
        codes.add(body[0])
        return body[0]
    try:
        with EnvClient(port=srv.port) as c:
            assert err(c.request(STEP, bytes([0]))) == 3
            frames = [c.reset(ep.id).rgb.tobytes()] + [c.step(a).rgb.tobytes() for a in ep.shortest]
            assert frames == [f.rgb.tobytes() for f in offline.frames]
            for _ in range(10 - len(ep.shortest)):
                c.step(Action.RotateLeft)
            assert err(c.request(STEP, bytes([0]))) == 3
            assert err(c.request(0x42, b"")) == 1
            assert err(c.request(RESET, b"no-such-episode")) == 2
            assert err(c.request(STEP, b"\x06")) == 4
        assert codes == {1, 2, 3, 4}
    finally:
        srv.shutdown()
        srv.server_close()
