"""``evrlab`` command line.

Exit codes: 0 success, 2 usage error, 3 configuration error (bad config,
missing checkpoint, stage order or config-hash mismatch), 4 dataset error,
5 training diverged.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import shutil
import sys
import time
from pathlib import Path

import numpy as np

from . import rle
from .config import ConfigError, RunConfig
from .envd import EnvServer
from .episodes import DatasetError, generate_dataset, load_dataset
from .harness.data import build_batch
from .harness.evaluate import BASELINES, BaselineSpec, MetricReport, MissingCheckpoint, evaluate
from .harness.report import merge_seeds, seeds_csv, trend_checks, write_report
from .harness.rollout import rollout_policy
from .harness.train import (
    TrainingDiverged,
    perception_model,
    policy_model,
    run_stage1,
    run_stage2,
    run_stage3,
)
from .render import Camera
from .tensor import core as T
from .tensor.checkpoint import CheckpointError, load_module, read_checkpoint, save_module

log = logging.getLogger("evrlab")

EXIT_OK, EXIT_USAGE, EXIT_CONFIG, EXIT_DATA, EXIT_DIVERGED = 0, 2, 3, 4, 5

# checkpoint key -> (stage, stage-1 path)
CHECKPOINTS = {
    "perception_sp": (1, "shortest"),
    "perception_pp": (1, "passive"),
    "policy": (2, None),
    "perception_ap": (3, None),
}


class ConfigurationError(RuntimeError):
    pass


# -- run directory ------------------------------------------------------------------
class Run:
    def __init__(self, cfg: RunConfig):
        self.cfg = cfg
        self.root = Path(cfg.out)
        self.hash = cfg.hash()

    @property
    def ckpt_dir(self) -> Path:
        return self.root / "checkpoints"

    def ckpt(self, key: str) -> Path:
        return self.ckpt_dir / f"{key}.ckpt"

    def prepare(self) -> None:
        self.root.mkdir(parents=True, exist_ok=True)
        cfg_path = self.root / "config.json"
        if cfg_path.exists():
            old = RunConfig.load(cfg_path)
            if old.hash() != self.hash and self.ckpt_dir.exists() and any(self.ckpt_dir.iterdir()):
                log.warning("config changed (%s -> %s); stale checkpoints will be rejected", old.hash(), self.hash)
        self.cfg.save(cfg_path)

    def dataset(self):
        try:
            ds = load_dataset(self.cfg.dataset_dir)
        except (DatasetError, OSError) as e:
            raise DatasetError(f"dataset unavailable: {e}; run `evrlab gen` first") from None
        if ds.meta.get("data_hash") != data_hash(self.cfg):
            raise ConfigurationError(f"dataset at {self.cfg.dataset_dir} was generated from a different data config")
        return ds

    def stamp(self, key: str) -> dict:
        path = self.ckpt(key)
        if not path.exists():
            raise MissingCheckpoint(f"missing checkpoint {path}")
        _, meta = read_checkpoint(path)
        stage, _ = CHECKPOINTS[key]
        if meta.get("stage") != stage or meta.get("key") != key:
            raise ConfigurationError(f"{path}: stamped {meta.get('key')}/stage {meta.get('stage')}, expected {key}/stage {stage}")
        if meta.get("config_hash") != self.hash:
            raise ConfigurationError(f"{path}: config hash {meta.get('config_hash')} does not match {self.hash}")
        return meta

    def load(self, key: str, ds):
        self.stamp(key)
        rng = np.random.default_rng(0)
        module = policy_model(self.cfg, rng) if key == "policy" else perception_model(self.cfg, ds, rng)
        load_module(self.ckpt(key), module)
        return module.eval()

    def save(self, key: str, module, result) -> None:
        self.ckpt_dir.mkdir(parents=True, exist_ok=True)
        stage, _ = CHECKPOINTS[key]
        meta = {"key": key, "stage": stage, "config_hash": self.hash, "epochs": result.epochs,
                "best_epoch": result.best_epoch, "stopped": result.stopped}
        save_module(self.ckpt(key), module, meta)
        logs = self.root / "logs"
        logs.mkdir(exist_ok=True)
        cols = sorted({k for r in result.rows for k in r})
        lines = [",".join(cols)] + [",".join(_cell(r.get(c)) for c in cols) for r in result.rows]
        (logs / f"{key}.csv").write_text("\n".join(lines) + "\n")
        if result.episodes:
            (logs / f"{key}.episodes.jsonl").write_text("".join(json.dumps(e) + "\n" for e in result.episodes))
        timing = logs / "timings.json"
        times = json.loads(timing.read_text()) if timing.exists() else {}
        times[key] = {"seconds": round(result.seconds, 1), "epochs": result.epochs, "stopped": result.stopped}
        timing.write_text(json.dumps(times, indent=1, sort_keys=True) + "\n")

    def fresh(self, key: str) -> bool:
        try:
            self.stamp(key)
            return True
        except (MissingCheckpoint, ConfigurationError, CheckpointError):
            return False


def _cell(v) -> str:
    if v is None:
        return ""
    return f"{v:.6g}" if isinstance(v, float) else str(v)


def data_hash(cfg: RunConfig) -> str:
    return hashlib.sha256(json.dumps(cfg.to_dict()["data"], sort_keys=True).encode()).hexdigest()[:16]


def dataset_digest(root) -> str:
    h = hashlib.sha256()
    for p in sorted(Path(root).rglob("*")):
        if p.is_file():
            h.update(str(p.relative_to(root)).encode())
            h.update(p.read_bytes())
    return h.hexdigest()


def camera_of(cfg: RunConfig) -> Camera:
    d = cfg.data
    return Camera(hfov=d.hfov, width=d.width, height=d.height, border_pad=d.border_pad)


def _seeded(cfg: RunConfig, *tags: int) -> np.random.Generator:
    return np.random.default_rng([cfg.seed, *tags])


# -- commands -----------------------------------------------------------------------------
def cmd_gen(run: Run, args) -> int:
    cfg = run.cfg
    root = cfg.dataset_dir
    want = data_hash(cfg)
    try:
        ds = load_dataset(root)
        if ds.meta.get("data_hash") == want and not args.force:
            print(f"dataset up to date: {root} sha256={dataset_digest(root)}")
            return EXIT_OK
    except DatasetError:
        pass
    if (root / "index.json").exists():
        shutil.rmtree(root / "scenes", ignore_errors=True)  # no stale scene files in the digest
    d = cfg.data
    generate_dataset(root, d.seed, dict(d.scenes), camera_of(cfg), None, d.horizon,
                     meta={"data_hash": want}, log=log.info, easy_keep=d.easy_keep, per_object=d.per_object)
    ds = load_dataset(root)
    counts = {s: len(ds.split(s)) for s in ("train", "val", "test")}
    hard = sum(e.difficulty == "hard" for e in ds.split("test"))
    print(f"dataset {root}: {counts}, {hard} hard test episodes, sha256={dataset_digest(root)}")
    return EXIT_OK


def cmd_train(run: Run, args) -> int:
    ds = run.dataset()
    cfg = run.cfg
    if args.stage == 1:
        key = "perception_pp" if args.path == "passive" else "perception_sp"
        if run.fresh(key) and not args.force:
            print(f"{key} up to date")
            return EXIT_OK
        res = run_stage1(ds, cfg, _seeded(cfg, 1, 0 if key == "perception_sp" else 1), args.path)
        run.save(key, res.model, res)
    elif args.stage == 2:
        perception = run.load("perception_sp", ds)
        if run.fresh("policy") and not args.force:
            print("policy up to date")
            return EXIT_OK
        res = run_stage2(ds, perception, cfg, _seeded(cfg, 2))
        key = "policy"
        run.save(key, res.model, res)
    else:
        perception = run.load("perception_sp", ds)
        policy = run.load("policy", ds)
        if run.fresh("perception_ap") and not args.force:
            print("perception_ap up to date")
            return EXIT_OK
        res = run_stage3(ds, perception, policy, cfg, _seeded(cfg, 3))
        key = "perception_ap"
        run.save(key, res.model, res)
    print(f"{key}: {res.epochs} epochs ({res.stopped}), best epoch {res.best_epoch}, {res.seconds:.0f}s")
    return EXIT_OK


def cmd_eval(run: Run, args) -> int:
    ds = run.dataset()
    cfg = run.cfg
    names = BASELINES if args.baseline == "all" else [args.baseline]
    specs = [BaselineSpec.parse(n) for n in names]
    models = {}
    for key in sorted({k for s in specs for k in s.required()}):
        models[key] = run.load(key, ds)
    out = run.root / "eval"
    out.mkdir(parents=True, exist_ok=True)
    for spec in specs:
        report, scores = evaluate(spec, models, ds, cfg.data.horizon, cfg.eval.seed, cfg.eval.random_runs,
                                  run.hash, cfg.eval.dump_predictions or args.dump, args.workers or cfg.eval.workers)
        stem = spec.name.replace("/", "_").replace("*", "star")
        (out / f"{stem}.json").write_text(report.to_json())
        if scores.dumps:
            with open(out / f"{stem}.predictions.jsonl", "w") as fh:
                for rec in scores.dumps:
                    fh.write(json.dumps(rec, sort_keys=True) + "\n")
        t = cfg.data.horizon
        print(f"{spec.name}: acc={_cell(report.cell('clss_acc', 'all'))} mask={_cell(report.cell('amask_iou', 'all'))} "
              f"occ(hard)={_cell(report.cell('amask_occ_iou', 'hard'))} at t={t}")
    return EXIT_OK


def load_reports(root: Path) -> list[MetricReport]:
    reps = [MetricReport.from_json(p.read_text()) for p in sorted((root / "eval").glob("*.json"))]
    return sorted(reps, key=lambda r: BASELINES.index(r.baseline))


def cmd_report(run: Run, args) -> int:
    reports = load_reports(run.root)
    if not reports:
        raise MissingCheckpoint(f"no evaluation results under {run.root / 'eval'}; run `evrlab eval` first")
    stale = [r.baseline for r in reports if r.config_hash != run.hash]
    if stale:
        raise ConfigurationError(f"reports {stale} were produced under a different config hash")
    written = write_report(reports, run.root / "report", plots=not args.no_plots)
    write_manifest(run.root)
    print(f"wrote {len(written)} report files to {run.root / 'report'}")
    return EXIT_OK


def write_manifest(root: Path) -> None:
    entries = {}
    for p in sorted(root.rglob("*")):
        if p.is_file() and p.name != "manifest.json" and "dataset" not in p.relative_to(root).parts:
            entries[str(p.relative_to(root))] = hashlib.sha256(p.read_bytes()).hexdigest()
    (root / "manifest.json").write_text(json.dumps(entries, indent=1, sort_keys=True) + "\n")


def cmd_serve(run: Run, args) -> int:
    ds = run.dataset()
    srv = EnvServer(ds, (args.host, args.port), run.cfg.data.horizon, args.expose_test_truth)
    print(f"serving {len(ds.episodes)} episodes on {args.host}:{srv.port}", flush=True)
    try:
        srv.serve_forever()
    except KeyboardInterrupt:
        pass
    finally:
        srv.server_close()
    return EXIT_OK


def cmd_replay(run: Run, args) -> int:
    ds = run.dataset()
    try:
        ep = ds.episode(args.episode)
    except (KeyError, DatasetError):
        raise DatasetError(f"unknown episode {args.episode!r}") from None
    horizon = run.cfg.data.horizon
    if args.path == "active":
        policy = run.load("policy", ds)
        with T.no_grad():
            acts = rollout_policy(ds, [ep], policy, _seeded(run.cfg, 9), horizon).actions.tolist()
        batch = build_batch(ds, [ep], "active", horizon, actions=acts)
    else:
        batch = build_batch(ds, [ep], args.path, horizon, rng=_seeded(run.cfg, 9))
    out = Path(args.out or run.root / "replay" / f"{ep.id}_{args.path}")
    out.mkdir(parents=True, exist_ok=True)
    for t, img in enumerate(batch.images[0]):
        rle.write_ppm(out / f"frame_{t:02d}.ppm", img)
    truth = ep.truth
    rle.write_pgm(out / "amodal.pgm", truth.amodal_mask.astype(np.uint8) * 255)
    rle.write_pgm(out / "visible.pgm", truth.visible_mask.astype(np.uint8) * 255)
    rle.write_mask(out / "amodal.rle", truth.amodal_mask)
    (out / "actions.json").write_text(json.dumps({"episode": ep.id, "path": args.path,
                                                  "actions": batch.actions[0].tolist()}) + "\n")
    print(f"wrote {len(batch.images[0])} frames to {out}")
    return EXIT_OK


STEPS = [("gen", {}), ("train", {"stage": 1, "path": "shortest"}), ("train", {"stage": 1, "path": "passive"}),
         ("train", {"stage": 2}), ("train", {"stage": 3}), ("eval", {"baseline": "all"}), ("report", {})]


def cmd_pipeline(run: Run, args) -> int:
    seeds = args.seeds or [run.cfg.seed]
    all_reports = []
    for seed in seeds:
        cfg = run.cfg.override([f"seed={seed}"]) if len(seeds) > 1 or seed != run.cfg.seed else run.cfg
        if len(seeds) > 1:
            cfg.out = str(run.root / f"seed_{seed}")
            cfg.dataset = str(run.cfg.dataset_dir)
        sub = Run(cfg)
        sub.prepare()
        for name, extra in STEPS:
            t0 = time.perf_counter()
            opts = {"force": args.force, "dump": args.dump, "workers": None, "no_plots": False, "path": "shortest"}
            ns = argparse.Namespace(**{**opts, **extra})
            COMMANDS[name](sub, ns)
            log.info("seed %s: %s %s done in %.0fs", seed, name, extra, time.perf_counter() - t0)
        all_reports.append(load_reports(sub.root))
    if len(seeds) > 1:
        merged = merge_seeds(all_reports)
        (run.root / "seeds.csv").write_text(seeds_csv(merged))
        trends = trend_checks(merged)
        (run.root / "trends.json").write_text(json.dumps({"seeds": seeds, "merged": merged, "checks": trends},
                                                         indent=1, sort_keys=True) + "\n")
        print(json.dumps(trends, indent=1, sort_keys=True))
    return EXIT_OK


COMMANDS = {"gen": cmd_gen, "train": cmd_train, "eval": cmd_eval, "report": cmd_report,
            "serve": cmd_serve, "replay": cmd_replay, "pipeline": cmd_pipeline}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="evrlab", description=__doc__.split("\n\n")[0])
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run config (defaults apply when omitted)")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override a config value, e.g. --set stage1.max_epochs=5")
    common.add_argument("--out", help="run directory (overrides config 'out')")
    common.add_argument("--dataset", help="dataset directory (overrides config 'dataset')")
    common.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", parents=[common], help="generate scenes and episodes")
    g.add_argument("--force", action="store_true")

    t = sub.add_parser("train", parents=[common], help="run one training stage")
    t.add_argument("--stage", type=int, choices=(1, 2, 3), required=True)
    t.add_argument("--path", choices=("shortest", "passive"), default="shortest",
                   help="stage-1 training path (passive gives the PP/PP model)")
    t.add_argument("--force", action="store_true")

    e = sub.add_parser("eval", parents=[common], help="evaluate one baseline or all")
    e.add_argument("--baseline", choices=BASELINES + ("all",), required=True)
    e.add_argument("--workers", type=int)
    e.add_argument("--dump", action="store_true", help="write per-episode prediction dumps")

    r = sub.add_parser("report", parents=[common], help="merge evaluation CSVs and plot")
    r.add_argument("--no-plots", action="store_true")

    s = sub.add_parser("serve", parents=[common], help="serve episodes over the binary protocol")
    s.add_argument("--host", default="127.0.0.1")
    s.add_argument("--port", type=int, default=7878)
    s.add_argument("--expose-test-truth", action="store_true")

    rp = sub.add_parser("replay", parents=[common], help="dump an episode's frames and masks")
    rp.add_argument("--episode", required=True)
    rp.add_argument("--path", choices=("passive", "replicated", "random", "shortest", "active"), default="shortest")
    rp.add_argument("--dir", dest="out_dir")

    pl = sub.add_parser("pipeline", parents=[common], help="gen, three stages, all baselines, report")
    pl.add_argument("--seeds", type=int, nargs="+", help="run once per seed and merge (shared dataset)")
    pl.add_argument("--force", action="store_true")
    pl.add_argument("--dump", action="store_true")
    return p


def load_config(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    cfg = cfg.override(args.set)
    if args.out:
        cfg.out = args.out
    if args.dataset:
        cfg.dataset = args.dataset
    return cfg


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        cfg = load_config(args)
        T.set_default_dtype(np.dtype(cfg.dtype))
        run = Run(cfg)
        if args.command == "replay":
            args.out = args.out_dir
        if args.command not in ("serve", "replay"):
            run.prepare()
        return COMMANDS[args.command](run, args)
    except (ConfigError, ConfigurationError, MissingCheckpoint, CheckpointError) as e:
        print(f"configuration error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except DatasetError as e:
        print(f"dataset error: {e}", file=sys.stderr)
        return EXIT_DATA
    except TrainingDiverged as e:
        print(f"training diverged: {e}", file=sys.stderr)
        return EXIT_DIVERGED


if __name__ == "__main__":
    sys.exit(main())
