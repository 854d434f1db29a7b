"""Result files: per-epoch metrics CSV, run summaries, comparison tables.

Metrics CSV columns, in this order::

    epoch, train_acc, test_acc, overflow_count, overflow_total,
    pruned_<layer> (one per parameterised layer), wall_time

Epoch 0 is the model before any training step.  ``wall_time`` is the only
non-deterministic column; :func:`deterministic_rows` drops it.
"""
import csv
import io
import json
import math
import statistics
from collections import defaultdict
from pathlib import Path

from .dataio import atomic_write
from .train import estimate_footprint

TIMING_COLUMNS = ("wall_time",)


def metrics_columns(layer_names):
    return (["epoch", "train_acc", "test_acc", "overflow_count", "overflow_total"]
            + [f"pruned_{n}" for n in layer_names] + ["wall_time"])


def _fmt(v):
    if isinstance(v, float):
        return "nan" if math.isnan(v) else f"{v:.6f}"
    return str(v)


def metrics_csv(result):
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(metrics_columns(result.layer_names))
    for m in result.history:
        writer.writerow([m.epoch, _fmt(m.train_acc), _fmt(m.test_acc), m.overflow_count,
                         m.overflow_total, *m.pruned, f"{m.wall_time:.3f}"])
    return buf.getvalue()


def write_metrics_csv(result, path, force=False):
    atomic_write(path, metrics_csv(result).encode(), force=force)


def read_metrics_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def deterministic_rows(path):
    """Metrics rows without the timing columns, for run-to-run comparison."""
    return [{k: v for k, v in row.items() if k not in TIMING_COLUMNS}
            for row in read_metrics_csv(path)]


# --------------------------------------------------------------------------
# summaries


def run_summary(result, angle, spec):
    cfg = result.config
    s = result.summary()
    s.update(angle=float(angle), seed=cfg.seed, threshold=cfg.threshold,
             pruning_rate=cfg.pruning_rate if cfg.method == "priot_s" else None,
             selection=cfg.selection if cfg.method == "priot_s" else None,
             epochs=cfg.epochs,
             footprint_bytes=estimate_footprint(spec, cfg.method, cfg.pruning_rate),
             history=[{"epoch": m.epoch, "train_acc": m.train_acc, "test_acc": m.test_acc,
                       "overflow_fraction": m.overflow_fraction} for m in result.history])
    return s


def write_summary(summary, directory, force=False):
    directory = Path(directory)
    atomic_write(directory / "summary.json",
                 (json.dumps(summary, indent=2, sort_keys=True) + "\n").encode(), force=force)
    atomic_write(directory / "summary.txt", summary_text(summary).encode(), force=force)


def summary_text(s):
    lines = [f"method          {method_label(s)}",
             f"angle           {s['angle']:g}",
             f"seed            {s['seed']}",
             f"best epoch      {s['best_epoch']} (by train accuracy)",
             f"test accuracy   {100 * s['test_acc']:.2f}%",
             f"before transfer {100 * s['pre_transfer_test_acc']:.2f}%",
             f"delta           {s['delta_pp']:+.2f} p.p.",
             f"max overflow    {100 * s['max_overflow_fraction']:.2f}% of outputs in an epoch",
             f"footprint       {s['footprint_bytes']:,} bytes"]
    return "\n".join(lines) + "\n"


def load_summaries(paths):
    """Read summary.json files; directories are searched recursively."""
    out = []
    for p in map(Path, paths):
        files = sorted(p.rglob("summary.json")) if p.is_dir() else [p]
        for f in files:
            out.append(json.loads(f.read_text()))
    return out


def method_label(s):
    if s["method"] == "priot_s":
        return f"priot_s(p={100 * s['pruning_rate']:.0f}%,{s['selection']})"
    return s["method"]


_ORDER = {"niti_dynamic": 0, "niti_static": 1, "priot": 2, "priot_s": 3}


def _group_key(s):
    return (_ORDER.get(s["method"], 9), -(s.get("pruning_rate") or 0), s.get("selection") or "",
            method_label(s))


def _mean_std(values):
    if len(values) == 1:
        return values[0], 0.0
    return statistics.fmean(values), statistics.stdev(values)


def comparison_rows(summaries):
    """One row per (method label, angle) with accuracy statistics over seeds."""
    groups = defaultdict(list)
    for s in summaries:
        groups[(_group_key(s), s["angle"])].append(s)
    angles = sorted({s["angle"] for s in summaries})
    rows = []
    for key in sorted({k for k, _ in groups}):
        row = {"method": key[3], "cells": {}, "footprint_bytes": None}
        for a in angles:
            runs = groups.get((key, a))
            if not runs:
                continue
            acc = [100 * r["test_acc"] for r in runs]
            mean, std = _mean_std(acc)
            row["cells"][a] = {"mean": mean, "std": std, "median": statistics.median(acc),
                               "n": len(acc),
                               "pre": statistics.fmean(100 * r["pre_transfer_test_acc"] for r in runs)}
            row["footprint_bytes"] = runs[0]["footprint_bytes"]
        rows.append(row)
    return angles, rows


def comparison_table(summaries):
    """Plain-text table: best test accuracy mean (std) per angle, plus footprint."""
    angles, rows = comparison_rows(summaries)
    head = ["method"] + [f"{a:g} deg" for a in angles] + ["footprint (B)"]
    body = []
    if rows:
        pre = ["before transfer"]
        for a in angles:
            cell = next((r["cells"][a] for r in rows if a in r["cells"]), None)
            pre.append(f"{cell['pre']:.2f}" if cell else "-")
        body.append(pre + ["-"])
    for r in rows:
        cells = []
        for a in angles:
            c = r["cells"].get(a)
            cells.append(f"{c['mean']:.2f} ({c['std']:.2f}) n={c['n']}" if c else "-")
        body.append([r["method"]] + cells + [f"{r['footprint_bytes']:,}"])
    widths = [max(len(x[i]) for x in [head] + body) for i in range(len(head))]
    fmt = lambda cols: "  ".join(c.ljust(w) for c, w in zip(cols, widths)).rstrip()
    lines = [fmt(head), fmt(["-" * w for w in widths])] + [fmt(b) for b in body]
    return "\n".join(lines) + "\n"


def history_csv(summaries):
    """Mean test accuracy per epoch for every (method label, angle) group."""
    groups = defaultdict(list)
    for s in summaries:
        groups[f"{method_label(s)}@{s['angle']:g}"].append(s["history"])
    names = sorted(groups)
    n_epochs = max((len(h) for hs in groups.values() for h in hs), default=0)
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["epoch"] + names)
    for e in range(n_epochs):
        row = [e]
        for name in names:
            vals = [h[e]["test_acc"] for h in groups[name] if len(h) > e]
            row.append(_fmt(statistics.fmean(vals)) if vals else "")
        writer.writerow(row)
    return buf.getvalue()
