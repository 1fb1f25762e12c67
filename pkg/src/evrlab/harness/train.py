"""The three training stages.

Stage 1 trains perception on shortest-path (or passive) sequences, stage 2
trains the policy with REINFORCE against the frozen stage-1 perception, and
stage 3 fine-tunes a copy of the stage-1 perception on trajectories sampled
from the frozen policy.
"""
from __future__ import annotations

import copy
import logging
import time
from dataclasses import dataclass, field

import numpy as np

from ..config import PerceptionStage, PolicyStage, RunConfig
from ..episodes import Dataset
from ..perception import PerceptionModel, decode, image_batch, perception_loss
from ..policy import PolicyModel, RewardWeights, RunningMean, reinforce_update, shaped_rewards
from ..tensor import core as T
from ..tensor.losses import NonFiniteLoss
from ..tensor.optim import ParamStore, adam_step, sgd_step
from .data import Batch, build_batch
from .metrics import iou_mask
from .rollout import rollout_policy

log = logging.getLogger(__name__)

PLATEAU_MIN_DELTA = 1e-4


class TrainingDiverged(RuntimeError):
    def __init__(self, batch_id: str, detail: str):
        super().__init__(f"non-finite loss at {batch_id}: {detail}")
        self.batch_id = batch_id


@dataclass
class StageResult:
    model: object
    rows: list[dict] = field(default_factory=list)
    epochs: int = 0
    best_epoch: int = -1
    seconds: float = 0.0
    stopped: str = ""
    episodes: list[dict] = field(default_factory=list)


def perception_model(cfg: RunConfig, ds: Dataset, rng: np.random.Generator) -> PerceptionModel:
    m = PerceptionModel(rng, ds.camera, tuple(cfg.perception.channels), cfg.perception.fc)
    return m.astype(np.dtype(cfg.dtype))


def policy_model(cfg: RunConfig, rng: np.random.Generator) -> PolicyModel:
    p = PolicyModel(rng, tuple(cfg.policy.channels), cfg.policy.embed, cfg.policy.hidden)
    return p.astype(np.dtype(cfg.dtype))


def reward_weights(s: PolicyStage) -> RewardWeights:
    return RewardWeights(s.reward_cls, s.reward_box, s.reward_mask)


def predict_last(model: PerceptionModel, batch: Batch, chunk: int = 16):
    """Step-final predictions for every episode of ``batch`` (eval mode, no tape)."""
    was = model.training
    model.eval()
    last = batch.images.shape[1] - 1
    preds = []
    with T.no_grad():
        for k in range(0, len(batch), chunk):
            out = model.run(image_batch(batch.images[k:k + chunk]), batch.b0[k:k + chunk], steps=[last])[0]
            preds.extend(decode(out, batch.b0_padded[k:k + chunk]))
    model.train(was)
    return preds


def validation_scores(model: PerceptionModel, batch: Batch) -> tuple[float, float]:
    preds = predict_last(model, batch)
    acc = float(np.mean([p.category == e.category for p, e in zip(preds, batch.episodes)]))
    miou = float(np.mean([iou_mask(p.canvas_mask(e.truth.amodal_mask.shape), e.truth.amodal_mask)
                          for p, e in zip(preds, batch.episodes)]))
    return acc, miou


def train_perception(model: PerceptionModel, train: Batch, val: Batch | None, s: PerceptionStage,
                     rng: np.random.Generator, stage: str, until=None) -> StageResult:
    """Minibatch training with early stopping on validation AMask-IoU.

    Stops after ``patience`` epochs without improvement, at ``max_epochs``, or
    once ``until(row)`` holds for an epoch's log row; the best validation
    state is restored.
    """
    store = ParamStore.from_module(model)
    model.train()
    res = StageResult(model)
    best, best_state, waited = -np.inf, None, 0
    t0 = time.perf_counter()
    for epoch in range(s.max_epochs):
        perm = rng.permutation(len(train))
        total, count = 0.0, 0
        for k in range(0, len(perm), s.batch):
            idx = perm[k:k + s.batch]
            sub = train.subset(idx)
            try:
                loss = perception_loss(model.run(image_batch(sub.images), sub.b0), sub.targets)
            except NonFiniteLoss as e:
                raise TrainingDiverged(f"{stage} epoch {epoch} batch {k // s.batch}", str(e)) from None
            store.zero_grad()
            loss.backward()
            if not store.grads_finite():
                raise TrainingDiverged(f"{stage} epoch {epoch} batch {k // s.batch}", "non-finite gradient")
            if s.optimizer == "adam":
                adam_step(store, s.lr, weight_decay=s.weight_decay)
            else:
                sgd_step(store, s.lr, s.momentum, s.weight_decay)
            total += loss.item() * len(idx)
            count += len(idx)
        row = {"stage": stage, "epoch": epoch, "train_loss": total / max(count, 1)}
        if val is not None and len(val):
            acc, miou = validation_scores(model, val)
            row.update(val_acc=acc, val_mask_iou=miou)
            score = miou
        else:
            score = -row["train_loss"]
        res.rows.append(row)
        log.info("%s epoch %d: %s", stage, epoch, {k: round(v, 4) for k, v in row.items() if isinstance(v, float)})
        res.epochs = epoch + 1
        if score > best + PLATEAU_MIN_DELTA:
            best, best_state, waited, res.best_epoch = score, copy.deepcopy(model.state_dict()), 0, epoch
            if until is not None and until(row):
                res.stopped = "target"
                break
        else:
            waited += 1
            if waited >= s.patience:
                res.stopped = "plateau"
                break
    else:
        res.stopped = "max_epochs"
    if best_state is not None:
        model.load_state_dict(best_state)
    res.seconds = time.perf_counter() - t0
    return res


def run_stage1(ds: Dataset, cfg: RunConfig, rng: np.random.Generator, path: str = "shortest") -> StageResult:
    """Perception from shortest-path sequences (``path="passive"`` trains the PP/PP model)."""
    horizon = cfg.data.horizon
    train = build_batch(ds, ds.split("train"), path, horizon)
    val = build_batch(ds, ds.split("val"), path, horizon)
    model = perception_model(cfg, ds, rng)
    s = cfg.stage1 if path == "shortest" else cfg.stage1_passive
    return train_perception(model, train, val, s, rng, f"stage1-{path}")


def run_stage2(ds: Dataset, perception: PerceptionModel, cfg: RunConfig, rng: np.random.Generator) -> StageResult:
    """REINFORCE with shaped rewards; perception stays frozen in eval mode."""
    s = cfg.stage2
    weights = reward_weights(s)
    policy = policy_model(cfg, rng)
    policy.train()
    perception.eval()
    store = ParamStore.from_module(policy)
    baseline = RunningMean()
    episodes = ds.split("train")
    res = StageResult(policy)
    t0 = time.perf_counter()
    update = 0
    for epoch in range(s.epochs):
        perm = rng.permutation(len(episodes))
        for k in range(0, len(perm), s.batch):
            eps = [episodes[i] for i in perm[k:k + s.batch]]
            ro = rollout_policy(ds, eps, policy, rng, cfg.data.horizon, perception, weights)
            shaped = shaped_rewards(ro.rewards)
            applied = reinforce_update(store, ro.logps, shaped, baseline, s.lr, s.eps)
            res.rows.append({"stage": "stage2", "epoch": epoch, "update": update,
                             "r0": float(ro.rewards[:, 0].mean()), "rT": float(ro.rewards[:, -1].mean()),
                             "return": float(shaped.sum(axis=1).mean()), "baseline": baseline.value,
                             "applied": int(applied)})
            for e, r, sh in zip(eps, ro.rewards, shaped):
                res.episodes.append({"update": update, "id": e.id, "r": r.tolist(), "R": sh.tolist()})
            update += 1
        tail = res.rows[-max(1, len(perm) // s.batch):]
        log.info("stage2 epoch %d: mean return %.4f", epoch, np.mean([r["return"] for r in tail]))
        res.epochs = epoch + 1
    res.seconds = time.perf_counter() - t0
    res.stopped = "epochs"
    return res


def policy_batch(ds: Dataset, episodes, policy: PolicyModel, rng: np.random.Generator, horizon: int) -> Batch:
    """Trajectories sampled from a frozen policy, as a perception training batch."""
    policy.eval()
    actions = []
    with T.no_grad():
        for k in range(0, len(episodes), 16):
            actions.extend(rollout_policy(ds, episodes[k:k + 16], policy, rng, horizon).actions.tolist())
    return build_batch(ds, episodes, "active", horizon, actions=actions)


def run_stage3(ds: Dataset, stage1: PerceptionModel, policy: PolicyModel, cfg: RunConfig,
               rng: np.random.Generator) -> StageResult:
    """Fine-tune a copy of the stage-1 perception on policy trajectories
    (sampled once per split and reused across epochs)."""
    horizon = cfg.data.horizon
    train = policy_batch(ds, ds.split("train"), policy, rng, horizon)
    val = policy_batch(ds, ds.split("val"), policy, rng, horizon)
    model = copy.deepcopy(stage1)
    return train_perception(model, train, val, cfg.stage3, rng, "stage3")
