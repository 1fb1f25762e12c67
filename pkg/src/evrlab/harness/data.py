"""Rendering episodes along a path into training / evaluation arrays."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from ..episodes import Action, Dataset, Episode, rollout
from ..perception import Targets, make_targets, to_continuous

PATHS = ("passive", "replicated", "random", "shortest", "active")


@dataclass
class Batch:
    episodes: list[Episode]
    images: np.ndarray     # uint8 (N, S, H, W, 3)
    actions: np.ndarray    # int (N, S - 1)
    distances: np.ndarray  # (N, S) metres from agent to target centroid
    b0: np.ndarray         # (N, 4) continuous core-canvas boxes
    b0_padded: np.ndarray  # (N, 4)
    targets: Targets

    def __len__(self) -> int:
        return len(self.episodes)

    def subset(self, idx) -> "Batch":
        idx = np.asarray(idx)
        t = self.targets
        return Batch([self.episodes[i] for i in idx], self.images[idx], self.actions[idx], self.distances[idx],
                     self.b0[idx], self.b0_padded[idx], Targets(t.cls[idx], t.deltas[idx], t.mask[idx]))


def random_actions(rng: np.random.Generator, horizon: int) -> list[int]:
    """Uniform over the six actions; collisions simply no-op."""
    return [int(a) for a in rng.integers(0, len(Action), size=horizon)]


def path_actions(ep: Episode, path: str, horizon: int, rng: np.random.Generator | None = None) -> list[int]:
    if path in ("passive", "replicated"):
        return []
    if path == "shortest":
        return list(ep.shortest[:horizon])
    if path == "random":
        if rng is None:
            raise ValueError("random paths need an rng")
        return random_actions(rng, horizon)
    raise ValueError(f"path {path!r} cannot be precomputed")


def episode_targets(episodes: list[Episode], pad: int) -> tuple[np.ndarray, np.ndarray, Targets]:
    b0 = np.stack([to_continuous(e.b0) for e in episodes])
    b0p = b0 + pad
    boxes = np.stack([to_continuous(e.truth.amodal_box) for e in episodes])
    tg = make_targets(np.array([e.category for e in episodes]), boxes, [e.truth.amodal_mask for e in episodes], b0p)
    return b0, b0p, tg


def distance(pose, scene, target: int) -> float:
    cx, cy = scene.object(target).footprint.center
    return math.hypot(pose.x - cx, pose.y - cy)


def build_batch(ds: Dataset, episodes: list[Episode], path: str, horizon: int,
                rng: np.random.Generator | None = None, actions: list[list[int]] | None = None) -> Batch:
    """Render each episode along ``path`` (or along explicit ``actions``).

    ``passive`` yields the spawn frame only; ``replicated`` repeats it
    ``horizon + 1`` times without moving.
    """
    cam = ds.camera
    frames, acts, dists = [], [], []
    for i, ep in enumerate(episodes):
        scene = ds.scenes[ep.scene_id]
        seq = actions[i] if actions is not None else path_actions(ep, path, horizon, rng)
        traj = rollout(scene, ds.grid(ep.scene_id), cam, ep.spawn, seq, path)
        imgs = [f.rgb for f in traj.frames]
        d = [distance(p, scene, ep.target) for p in traj.poses]
        if path == "replicated":
            imgs, d = imgs * (horizon + 1), d * (horizon + 1)
        frames.append(np.stack(imgs))
        acts.append(list(traj.actions))
        dists.append(d)
    b0, b0p, tg = episode_targets(episodes, cam.border_pad)
    width = max((len(a) for a in acts), default=0)
    act_arr = np.full((len(episodes), width), -1, dtype=int)
    for i, a in enumerate(acts):
        act_arr[i, :len(a)] = a
    return Batch(list(episodes), np.stack(frames), act_arr, np.array(dists), b0, b0p, tg)
