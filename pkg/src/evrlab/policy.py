"""Action policy, shaped recognition reward and REINFORCE."""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .episodes import START_TOKEN, Action
from .tensor import core as T
from .tensor.nn import BatchNorm2d, Conv2d, Embedding, GRUCell, Linear, Module
from .tensor.optim import ParamStore, rmsprop_step
from .tensor.spatial import maxpool2x2, resize_bilinear

log = logging.getLogger(__name__)

N_ACTIONS = len(Action)
INPUT_SIZE = (32, 40)


@dataclass(frozen=True)
class RewardWeights:
    cls: float = 0.1
    box: float = 10.0
    mask: float = 20.0

    def __post_init__(self):
        if min(self.cls, self.box, self.mask) < 0:
            raise ValueError("reward weights must be non-negative")


def recognition_reward(correct: bool, box_iou: float, mask_iou: float, w: RewardWeights = RewardWeights()) -> float:
    return w.cls * float(bool(correct)) + w.box * box_iou + w.mask * mask_iou


def shaped_rewards(r) -> np.ndarray:
    """R_t = r_t - r_{t-1} for t = 1..T along the last axis."""
    return np.diff(np.asarray(r, dtype=np.float64), axis=-1)


def returns(rewards) -> np.ndarray:
    """Undiscounted reward-to-go G_t = sum_{k >= t} R_k."""
    r = np.asarray(rewards, dtype=np.float64)
    return np.flip(np.cumsum(np.flip(r, axis=-1), axis=-1), axis=-1)


def box_raster(b0, shape: tuple[int, int]) -> np.ndarray:
    """Binary raster of inclusive pixel boxes; (N, H, W) float."""
    b0 = np.asarray(b0, dtype=int).reshape(-1, 4)
    out = np.zeros((len(b0),) + tuple(shape))
    for i, (c0, r0, c1, r1) in enumerate(b0):
        out[i, r0:r1 + 1, c0:c1 + 1] = 1.0
    return out


class PolicyModel(Module):
    def __init__(self, rng: np.random.Generator, channels: tuple[int, ...] = (16, 32, 32, 32),
                 embed: int = 16, hidden: int = 128):
        c = [7] + list(channels)
        self.convs = [Conv2d(c[i], c[i + 1], 5, rng) for i in range(4)]
        self.norms = [BatchNorm2d(k) for k in channels]
        h, w = INPUT_SIZE
        for _ in range(4):
            h, w = h // 2, w // 2
        self.z_dim = channels[-1] * h * w
        self.embed = Embedding(START_TOKEN + 1, embed, rng)
        self.gru = GRUCell(self.z_dim + embed, hidden, rng)
        self.out = Linear(hidden, N_ACTIONS, rng)
        self.hidden = hidden

    def encode(self, box_mask: np.ndarray, first, current) -> T.Tensor:
        """``box_mask`` (N, 1, H, W); frames (N, 3, H, W) on the core canvas."""
        first, current = T.as_tensor(first), T.as_tensor(current)
        bm = T.as_tensor(np.asarray(box_mask, dtype=first.dtype))
        if not (bm.shape[2:] == first.shape[2:] == current.shape[2:]) or bm.shape[1] != 1:
            raise T.ShapeError(f"observation shapes differ: {bm.shape}, {first.shape}, {current.shape}")
        x = resize_bilinear(T.concat([bm, first, current], axis=1), *INPUT_SIZE)
        for conv, bn in zip(self.convs, self.norms):
            x = maxpool2x2(T.relu(bn(conv(x))))
        return x.reshape(x.shape[0], -1)

    def initial_state(self, n: int) -> T.Tensor:
        return T.Tensor(np.zeros((n, self.hidden), dtype=T.get_default_dtype()))

    def act(self, state: T.Tensor, z_img: T.Tensor, last_action) -> tuple[T.Tensor, T.Tensor]:
        """Action distribution (N, 6) and the new GRU state."""
        z_act = self.embed(np.asarray(last_action, dtype=int).reshape(-1))
        h = self.gru(T.concat([z_img, z_act], axis=1), state)
        return T.softmax(self.out(h), axis=1), h


def sample_actions(probs: np.ndarray, rng: np.random.Generator, greedy: bool = False) -> np.ndarray:
    """Inverse-CDF draw per row (one uniform per row from ``rng``); argmax when greedy."""
    probs = np.asarray(probs, dtype=np.float64)
    if greedy:
        return probs.argmax(axis=1)
    cdf = np.cumsum(probs, axis=1)
    u = rng.random(len(probs)) * cdf[:, -1]
    return np.minimum((u[:, None] >= cdf).sum(axis=1), probs.shape[1] - 1)


def log_prob(probs: T.Tensor, actions) -> T.Tensor:
    actions = np.asarray(actions, dtype=int)
    p = probs[np.arange(len(actions)), actions]
    return T.log(T.clamp(p, 1e-12, None))


class RunningMean:
    def __init__(self, value: float = 0.0):
        self.value = value
        self.count = 0

    def update(self, samples) -> None:
        for x in np.asarray(samples, dtype=np.float64).ravel():
            self.count += 1
            self.value += (x - self.value) / self.count


def reinforce_loss(logps: list[T.Tensor], shaped: np.ndarray, baseline: float) -> T.Tensor:
    """-(1/N) sum_i sum_t log pi(a_t) (G_t - b); ``shaped`` is (N, T)."""
    g = returns(shaped) - baseline
    n = g.shape[0]
    total = None
    for t, lp in enumerate(logps):
        term = T.tsum(lp * g[:, t].astype(lp.dtype))
        total = term if total is None else total + term
    return -total / n


def reinforce_update(store: ParamStore, logps: list[T.Tensor], shaped: np.ndarray, baseline: RunningMean,
                     lr: float = 4e-5, eps: float = 5e-5) -> bool:
    """One RMSProp step on the REINFORCE loss; the baseline is the running
    mean of G_0 before this batch. Returns False if the step was skipped."""
    shaped = np.atleast_2d(np.asarray(shaped, dtype=np.float64))
    loss = reinforce_loss(logps, shaped, baseline.value)
    store.zero_grad()
    loss.backward()
    baseline.update(returns(shaped)[:, 0])
    if not store.grads_finite():
        log.warning("non-finite policy gradient; update skipped")
        store.zero_grad()
        return False
    rmsprop_step(store, lr, eps)
    return True
