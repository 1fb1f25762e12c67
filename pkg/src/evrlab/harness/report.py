"""Report files: CSV tables, JSON summaries and SVG figures."""
from __future__ import annotations

import csv
import io
import json
from pathlib import Path

import numpy as np

from ..episodes import Action
from .evaluate import BASELINES, HIST_STEPS, METRICS, SPLITS, MetricReport


def _fmt(v) -> str:
    return "" if v is None else f"{v:.6f}"


def curves_csv(reports: list[MetricReport]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["baseline", "metric", "split", "t", "value"])
    for r in reports:
        for m in METRICS:
            for s in SPLITS:
                for t, v in enumerate(r.curves[m][s]):
                    w.writerow([r.baseline, m, s, t, _fmt(v)])
    return buf.getvalue()


def table1_csv(reports: list[MetricReport]) -> str:
    """One row per baseline; columns metric x split at the last step."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["baseline"] + [f"{m}_{s}" for m in METRICS for s in SPLITS])
    for r in sorted(reports, key=lambda r: BASELINES.index(r.baseline)):
        w.writerow([r.baseline] + [_fmt(r.cell(m, s)) for m in METRICS for s in SPLITS])
    return buf.getvalue()


def category_csv(reports: list[MetricReport]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["baseline", "category", "n"] + list(METRICS))
    for r in reports:
        for cat, row in sorted(r.per_category.items()):
            w.writerow([r.baseline, cat, row["n"]] + [_fmt(row[m]) for m in METRICS])
    return buf.getvalue()


def actions_csv(reports: list[MetricReport]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["baseline", "t"] + [a.name for a in Action])
    for r in reports:
        for t, counts in enumerate(r.action_hist or [], start=1):
            w.writerow([r.baseline, t] + counts)
    return buf.getvalue()


def distance_csv(reports: list[MetricReport]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["baseline", "t", "mean_distance"])
    for r in reports:
        for t, d in enumerate(r.distance):
            w.writerow([r.baseline, t, f"{d:.6f}"])
    return buf.getvalue()


def merge_seeds(per_seed: list[list[MetricReport]]) -> dict:
    """Mean and standard error over seeds of every last-step cell."""
    out = {}
    for name in BASELINES:
        reps = [r for rs in per_seed for r in rs if r.baseline == name]
        if not reps:
            continue
        cells = {}
        for m in METRICS:
            for s in SPLITS:
                vals = np.array([r.cell(m, s) for r in reps if r.cell(m, s) is not None], dtype=float)
                if vals.size:
                    se = float(vals.std(ddof=1) / np.sqrt(vals.size)) if vals.size > 1 else 0.0
                    cells[f"{m}_{s}"] = {"mean": float(vals.mean()), "se": se, "n": int(vals.size),
                                         "values": vals.tolist()}
        out[name] = cells
    return out


def seeds_csv(merged: dict) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["baseline", "cell", "mean", "se", "n_seeds"])
    for name, cells in merged.items():
        for cell, v in cells.items():
            w.writerow([name, cell, f"{v['mean']:.6f}", f"{v['se']:.6f}", v["n"]])
    return buf.getvalue()


def trend_checks(merged: dict) -> dict:
    """The benchmark direction checks on hard-split AMask-Occ-IoU."""
    key = "amask_occ_iou_hard"

    def get(b):
        return merged.get(b, {}).get(key)
    ap, pp, rp = get("AP/AP"), get("PP/PP"), get("SP/RP")
    res = {}
    if ap and pp:
        gap = ap["mean"] - pp["mean"]
        se = float(np.hypot(ap["se"], pp["se"]))
        res["ap_over_pp"] = {"gap": gap, "se": se, "pass": bool(gap > se)}
    if rp and pp:
        res["rp_over_pp"] = {"gap": rp["mean"] - pp["mean"], "pass": bool(rp["mean"] >= pp["mean"])}
    return res


def _svg(fig) -> bytes:
    buf = io.BytesIO()
    fig.savefig(buf, format="svg", metadata={"Date": None, "Creator": None})
    return buf.getvalue()


def figures(reports: list[MetricReport]) -> dict[str, bytes]:
    """Step curves, action histograms and distance curves as SVG bytes."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    matplotlib.rcParams["svg.hashsalt"] = "evrlab"

    out = {}
    by_name = sorted(reports, key=lambda r: BASELINES.index(r.baseline))
    for m in METRICS:
        fig, axes = plt.subplots(1, 3, figsize=(12, 3.4), sharey=True)
        for ax, s in zip(axes, SPLITS):
            for r in by_name:
                ys = [np.nan if v is None else v for v in r.curves[m][s]]
                ax.plot(range(len(ys)), ys, marker="o", ms=3, label=r.baseline)
            ax.set_title(f"{m} ({s})")
            ax.set_xlabel("step")
        axes[0].legend(fontsize=7)
        fig.tight_layout()
        out[f"curves_{m}.svg"] = _svg(fig)
        plt.close(fig)

    movers = [r for r in by_name if r.action_hist]
    if movers:
        fig, axes = plt.subplots(len(movers), len(HIST_STEPS), figsize=(2.4 * len(HIST_STEPS), 2 * len(movers)),
                                 squeeze=False)
        for row, r in zip(axes, movers):
            for ax, t in zip(row, HIST_STEPS):
                if t <= len(r.action_hist):
                    counts = np.array(r.action_hist[t - 1], float)
                    ax.bar(range(len(counts)), counts / max(counts.sum(), 1))
                ax.set_xticks(range(len(Action)), [a.name.replace("Move", "M").replace("Rotate", "R") for a in Action],
                              fontsize=6, rotation=60)
                ax.set_title(f"{r.baseline} t={t}", fontsize=8)
        fig.tight_layout()
        out["actions.svg"] = _svg(fig)
        plt.close(fig)

    fig, ax = plt.subplots(figsize=(5, 3.4))
    for r in by_name:
        ax.plot(range(len(r.distance)), r.distance, marker="o", ms=3, label=r.baseline)
    ax.set_xlabel("step")
    ax.set_ylabel("mean distance to target (m)")
    ax.legend(fontsize=7)
    fig.tight_layout()
    out["distance.svg"] = _svg(fig)
    plt.close(fig)
    return out


def write_report(reports: list[MetricReport], out_dir, plots: bool = True) -> list[Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    files = {
        "table1.csv": table1_csv(reports),
        "curves.csv": curves_csv(reports),
        "categories.csv": category_csv(reports),
        "actions.csv": actions_csv(reports),
        "distance.csv": distance_csv(reports),
        "summary.json": json.dumps({
            "config_hash": sorted({r.config_hash for r in reports}),
            "baselines": [r.baseline for r in reports],
            "counts": reports[0].counts if reports else {},
            "table1": {r.baseline: {f"{m}_{s}": r.cell(m, s) for m in METRICS for s in SPLITS} for r in reports},
        }, sort_keys=True, indent=1) + "\n",
    }
    written = []
    for name, text in files.items():
        (out_dir / name).write_text(text)
        written.append(out_dir / name)
    if plots and reports:
        for name, data in figures(reports).items():
            (out_dir / name).write_bytes(data)
            written.append(out_dir / name)
    return written
