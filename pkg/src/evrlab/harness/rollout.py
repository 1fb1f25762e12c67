"""Lockstep policy rollouts over a batch of episodes."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..episodes import START_TOKEN, Action, Dataset, Episode, step
from ..perception import PerceptionModel, Prediction, decode, image_batch, to_continuous
from ..policy import PolicyModel, RewardWeights, box_raster, log_prob, recognition_reward, sample_actions
from ..render import render_frame
from ..tensor import core as T
from .metrics import iou_box, iou_mask


def reward_of(pred: Prediction, ep: Episode, w: RewardWeights) -> float:
    truth = ep.truth
    return recognition_reward(pred.category == ep.category,
                              iou_box(pred.box, to_continuous(truth.amodal_box)),
                              iou_mask(pred.canvas_mask(truth.amodal_mask.shape), truth.amodal_mask), w)


@dataclass
class Rollout:
    actions: np.ndarray                  # (N, T)
    frames: np.ndarray                   # uint8 (N, T + 1, H, W, 3)
    logps: list = field(default_factory=list)
    rewards: np.ndarray | None = None    # (N, T + 1) recognition rewards r_t


def rollout_policy(ds: Dataset, episodes: list[Episode], policy: PolicyModel, rng: np.random.Generator,
                   horizon: int, perception: PerceptionModel | None = None, weights: RewardWeights = RewardWeights(),
                   greedy: bool = False) -> Rollout:
    """Run ``policy`` on all episodes in lockstep.

    With ``perception`` given, the recognition reward r_t is computed after
    every frame (r_0 from the spawn frame alone) with the perception network
    frozen. Log-probabilities keep their tape only when gradients are enabled.
    """
    cam = ds.camera
    n = len(episodes)
    poses = [ep.spawn for ep in episodes]
    rgb = [np.stack([render_frame(ds.scenes[ep.scene_id], p, cam).rgb for ep, p in zip(episodes, poses)])]
    bm = box_raster([ep.b0 for ep in episodes], (cam.height, cam.width))[:, None]
    first = image_batch(rgb[0])
    current = first
    b0 = np.stack([to_continuous(ep.b0) for ep in episodes])
    b0p = b0 + cam.border_pad

    rewards = []
    hidden = None

    def recognise(img):
        nonlocal hidden
        with T.no_grad():
            hidden = perception.fuse(hidden, perception.extract(img))
            out = perception.head(hidden, b0)
        rewards.append([reward_of(p, ep, weights) for p, ep in zip(decode(out, b0p), episodes)])

    if perception is not None:
        recognise(first)
    state = policy.initial_state(n)
    last = np.full(n, START_TOKEN)
    acts, logps = [], []
    for _ in range(horizon):
        z = policy.encode(bm, first, current)
        probs, state = policy.act(state, z, last)
        a = sample_actions(probs.data, rng, greedy)
        logps.append(log_prob(probs, a))
        poses = [step(p, Action(int(k)), ds.grid(ep.scene_id)) for p, k, ep in zip(poses, a, episodes)]
        rgb.append(np.stack([render_frame(ds.scenes[ep.scene_id], p, cam).rgb for ep, p in zip(episodes, poses)]))
        current = image_batch(rgb[-1])
        if perception is not None:
            recognise(current)
        acts.append(a)
        last = a
    return Rollout(np.stack(acts, axis=1) if acts else np.zeros((n, 0), int), np.stack(rgb, axis=1), logps,
                   np.array(rewards).T if perception is not None else None)
