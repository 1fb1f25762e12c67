"""Baseline grid evaluation and the metric report."""
from __future__ import annotations

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .. import rle
from ..episodes import Action, Dataset, Episode
from ..perception import PerceptionModel, decode, image_batch, to_continuous
from ..policy import PolicyModel
from ..tensor import core as T
from ..world import Category
from .data import build_batch, random_actions
from .metrics import amask_occ_iou, iou_box, iou_mask
from .rollout import rollout_policy

METRICS = ("clss_acc", "abox_iou", "amask_iou", "amask_occ_iou")
SPLITS = ("all", "easy", "hard")
CHUNK = 16
HIST_STEPS = (1, 3, 5, 7, 10)

TRAIN_PATHS = {"PP": "passive", "SP": "shortest", "AP": "active"}
TEST_PATHS = {"PP": "passive", "PP*": "replicated", "RP": "random", "SP": "shortest", "AP": "active"}
BASELINES = ("PP/PP", "SP/PP", "SP/PP*", "SP/RP", "SP/SP", "SP/AP", "AP/AP")
PERCEPTION_KEY = {"passive": "perception_pp", "shortest": "perception_sp", "active": "perception_ap"}


class MissingCheckpoint(LookupError):
    pass


@dataclass(frozen=True)
class BaselineSpec:
    train_path: str
    test_path: str

    @classmethod
    def parse(cls, name: str) -> "BaselineSpec":
        if name not in BASELINES:
            raise ValueError(f"unknown baseline {name!r}; expected one of {', '.join(BASELINES)}")
        tr, te = name.split("/")
        return cls(TRAIN_PATHS[tr], TEST_PATHS[te])

    @property
    def name(self) -> str:
        inv_tr = {v: k for k, v in TRAIN_PATHS.items()}
        inv_te = {v: k for k, v in TEST_PATHS.items()}
        return f"{inv_tr[self.train_path]}/{inv_te[self.test_path]}"

    def required(self) -> tuple[str, ...]:
        need = [PERCEPTION_KEY[self.train_path]]
        if self.test_path == "active":
            need.append("policy")
        return tuple(need)


@dataclass
class EpisodeScores:
    """Per-run, per-step scores; arrays are (runs, N, S)."""
    correct: np.ndarray
    box: np.ndarray
    mask: np.ndarray
    occ: np.ndarray       # NaN where the occluded region is empty
    distance: np.ndarray
    actions: np.ndarray   # (runs, N, T); -1 where no action was taken
    dumps: list = field(default_factory=list)


@dataclass
class MetricReport:
    baseline: str
    config_hash: str
    horizon: int
    counts: dict
    curves: dict           # metric -> split -> [value or None per step]
    per_category: dict     # category -> {"n": int, metric: value at the last step}
    action_hist: list | None  # per step 1..T, counts for the six actions
    distance: list         # mean distance to the target per step

    def cell(self, metric: str, split: str, t: int | None = None):
        return self.curves[metric][split][self.horizon if t is None else t]

    def to_json(self) -> str:
        return json.dumps(self.__dict__, sort_keys=True, indent=1) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "MetricReport":
        return cls(**json.loads(text))


def _split_mask(episodes: list[Episode], split: str) -> np.ndarray:
    if split == "all":
        return np.ones(len(episodes), bool)
    return np.array([e.difficulty == split for e in episodes])


def _mean(values: np.ndarray):
    v = values[~np.isnan(values)]
    return float(v.mean()) if v.size else None


def aggregate(baseline: str, config_hash: str, episodes: list[Episode], sc: EpisodeScores,
              horizon: int, moves: bool) -> MetricReport:
    """Average runs per episode first, then episodes within each split."""
    per_ep = {
        "clss_acc": sc.correct.mean(axis=0),
        "abox_iou": sc.box.mean(axis=0),
        "amask_iou": sc.mask.mean(axis=0),
        "amask_occ_iou": sc.occ.mean(axis=0),
    }
    curves = {m: {} for m in METRICS}
    for split in SPLITS:
        sel = _split_mask(episodes, split)
        for m in METRICS:
            curves[m][split] = [_mean(per_ep[m][sel, t]) for t in range(horizon + 1)]
    per_cat = {}
    cats = np.array([e.category for e in episodes])
    for c in Category:
        sel = cats == int(c)
        if sel.any():
            per_cat[c.name] = {"n": int(sel.sum()), **{m: _mean(per_ep[m][sel, horizon]) for m in METRICS}}
    hist = None
    if moves:
        hist = [np.bincount(sc.actions[:, :, t].ravel(), minlength=len(Action)).tolist() for t in range(horizon)]
    counts = {s: int(_split_mask(episodes, s).sum()) for s in SPLITS}
    distance = [float(v) for v in sc.distance.mean(axis=(0, 1))]
    return MetricReport(baseline, config_hash, horizon, counts, curves, per_cat, hist, distance)


def _score_chunk(model: PerceptionModel, ds: Dataset, episodes: list[Episode], batch, passive: bool,
                 horizon: int, dump: bool, run: int):
    """Scores for one chunk; passive evaluation makes a single prediction."""
    s = horizon + 1
    n = len(episodes)
    shape = ds.camera.padded_shape
    pad = ds.camera.border_pad
    with T.no_grad():
        outs = model.run(image_batch(batch.images), batch.b0, steps=[0] if passive else None)
    res = {k: np.full((n, s), np.nan) for k in ("correct", "box", "mask", "occ")}
    dumps = []
    for t, out in enumerate(outs):
        for i, (p, ep) in enumerate(zip(decode(out, batch.b0_padded), episodes)):
            truth = ep.truth
            pm = p.canvas_mask(shape)
            occ = amask_occ_iou(pm, truth, pad)
            res["correct"][i, t] = float(p.category == ep.category)
            res["box"][i, t] = iou_box(p.box, to_continuous(truth.amodal_box))
            res["mask"][i, t] = iou_mask(pm, truth.amodal_mask)
            res["occ"][i, t] = np.nan if occ is None else occ
            if dump:
                dumps.append({"id": ep.id, "run": run, "t": t, "class_probs": [float(v) for v in p.class_probs],
                              "box": [float(v) for v in p.box], "mask_rle": rle.encode(pm)})
    if passive:
        for k in res:
            res[k][:] = res[k][:, :1]
    dist = np.repeat(batch.distances[:, :1], s, axis=1) if passive else batch.distances
    acts = np.full((n, horizon), -1)
    acts[:, :batch.actions.shape[1]] = batch.actions
    return res, dist, acts, dumps


def evaluate(spec: BaselineSpec, models: dict, ds: Dataset, horizon: int, seed: int, random_runs: int = 5,
             config_hash: str = "", dump: bool = False, workers: int = 1, split: str = "test"
             ) -> tuple[MetricReport, EpisodeScores]:
    """Run the test split under ``spec.test_path`` with the perception model
    trained on ``spec.train_path``. ``models`` maps checkpoint keys to modules."""
    missing = [k for k in spec.required() if k not in models]
    if missing:
        raise MissingCheckpoint(f"{spec.name} needs {', '.join(missing)}")
    model = models[PERCEPTION_KEY[spec.train_path]].eval()
    policy = models.get("policy")
    if policy is not None:
        policy.eval()
    episodes = ds.split(split)
    path = spec.test_path
    runs = random_runs if path == "random" else 1
    chunks = [episodes[k:k + CHUNK] for k in range(0, len(episodes), CHUNK)]

    def job(run: int, ci: int):
        eps = chunks[ci]
        if path == "random":
            acts = [random_actions(np.random.default_rng([seed, run, ci * CHUNK + i]), horizon) for i in range(len(eps))]
            batch = build_batch(ds, eps, path, horizon, actions=acts)
        elif path == "active":
            with T.no_grad():
                ro = rollout_policy(ds, eps, policy, np.random.default_rng([seed, run, ci]), horizon)
            batch = build_batch(ds, eps, path, horizon, actions=ro.actions.tolist())
        else:
            batch = build_batch(ds, eps, path, horizon)
        return _score_chunk(model, ds, eps, batch, path == "passive", horizon, dump, run)

    tasks = [(r, c) for r in range(runs) for c in range(len(chunks))]
    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            results = list(pool.map(lambda rc: job(*rc), tasks))
    else:
        results = [job(*rc) for rc in tasks]

    def gather(key):
        return np.stack([np.concatenate([results[r * len(chunks) + c][0][key] for c in range(len(chunks))])
                         for r in range(runs)])
    sc = EpisodeScores(gather("correct"), gather("box"), gather("mask"), gather("occ"),
                       np.stack([np.concatenate([results[r * len(chunks) + c][1] for c in range(len(chunks))])
                                 for r in range(runs)]),
                       np.stack([np.concatenate([results[r * len(chunks) + c][2] for c in range(len(chunks))])
                                 for r in range(runs)]),
                       [d for res in results for d in res[3]])
    moves = path not in ("passive", "replicated")
    return aggregate(spec.name, config_hash, episodes, sc, horizon, moves), sc
