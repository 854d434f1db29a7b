"""Acceptance suite: one test and one printed PASS/FAIL line per criterion.

The transfer-learning grid (static NITI, PRIOT and PRIOT-S on rotated digits,
1024 train / 1024 test images, 30 epochs, batch size 1) takes roughly half an
hour on one core.  Its per-epoch metrics are cached under pytest's cache
directory, keyed on a hash of the package sources, so re-running after a
test-only edit is quick.  ``pytest --cache-clear`` forces fresh runs.
"""
import hashlib
import json
import os
import subprocess
import sys
import time
from importlib import resources
from pathlib import Path
from statistics import median

import numpy as np
import pytest

from priot.cli import ExperimentConfig, fixture_checkpoint_path, main, transfer_data
from priot.dataio import load_checkpoint
from priot.layers import tiny_cnn
from priot.report import deterministic_rows
from priot.scores import SparseScores
from priot.train import estimate_footprint, run_experiment

TESTS = Path(__file__).parent
SEEDS = range(5)
ANGLES = (30, 45)
RESULTS = {}


def report(number, ok, detail):
    line = f"{'PASS' if ok else 'FAIL'}  criterion {number}: {detail}"
    RESULTS[number] = line
    print(line)
    return ok


# ---------------------------------------------------------------- grid

GRID = ([("niti_static", a, 0, {}) for a in ANGLES]
        + [("priot", a, s, {}) for a in ANGLES for s in SEEDS]
        + [("priot_s", 45, s, dict(pruning_rate=p, selection="random"))
           for p in (0.8, 0.9) for s in SEEDS])


def _key(method, angle, seed, extra):
    tail = "".join(f"_{k}={v}" for k, v in sorted(extra.items()))
    return f"{method}_a{angle}_s{seed}{tail}"


def _source_hash():
    h = hashlib.sha256()
    pkg = resources.files("priot")
    for name in sorted(p.name for p in pkg.iterdir() if p.name.endswith(".py")):
        h.update((pkg / name).read_bytes())
    h.update((pkg / "data" / "fixture.ckpt").read_bytes())
    return h.hexdigest()[:16]


class _Auditor:
    """Independent per-epoch checks on a score-training run."""

    def __init__(self, ckpt):
        self.reference = [w.tobytes() for w in ckpt.weights]
        self.weights_ok = True
        self.unscored_ok = True
        self.epochs = 0

    def __call__(self, epoch, weights, scores):
        self.epochs += 1
        self.weights_ok &= [w.tobytes() for w in weights] == self.reference
        for s in scores or []:
            if isinstance(s, SparseScores):
                size = int(np.prod(s.shape))
                unscored = np.setdiff1d(np.arange(size), s.coords)
                self.unscored_ok &= bool(s.mask().ravel()[unscored].all())


def _run(ckpt, data, method, angle, seed, extra):
    cfg = ExperimentConfig(method=method, angle=angle, seed=seed, **extra)
    audit = _Auditor(ckpt)
    train, test = data
    result = run_experiment(cfg.trainer_config(), ckpt, train.to_int8(), train.labels,
                            test.to_int8(), test.labels, inspect=audit)
    return {
        "test_acc": result.test_acc,
        "pre_test": result.pre_transfer_test_acc,
        "best_epoch": result.best_epoch,
        "history": [(m.epoch, m.train_acc, m.test_acc, m.overflow_fraction)
                    for m in result.history],
        "final_weights_equal": all(a.tobytes() == b.tobytes()
                                   for a, b in zip(result.best_checkpoint.weights, ckpt.weights)),
        "audit_weights": audit.weights_ok,
        "audit_unscored": audit.unscored_ok,
        "audit_epochs": audit.epochs,
    }


@pytest.fixture(scope="module")
def grid(request):
    cache_key = f"priot/acceptance/{_source_hash()}"
    cached = request.config.cache.get(cache_key, None) or {}
    ckpt = load_checkpoint(fixture_checkpoint_path())
    data = {}
    for method, angle, seed, extra in GRID:
        key = _key(method, angle, seed, extra)
        if key in cached:
            continue
        if angle not in data:
            data[angle] = transfer_data(ExperimentConfig(angle=angle))
        t0 = time.perf_counter()
        cached[key] = _run(ckpt, data[angle], method, angle, seed, extra)
        print(f"  {key}: best {100 * cached[key]['test_acc']:.2f}% "
              f"({time.perf_counter() - t0:.0f}s)", file=sys.stderr)
        request.config.cache.set(cache_key, cached)
    return cached


def _median(grid, method, angle, extra=None):
    return median(grid[_key(method, angle, s, extra or {})]["test_acc"] for s in SEEDS)


# ---------------------------------------------------------------- criteria

def test_c1_oracle_equivalence():
    sys.path.insert(0, str(TESTS))
    import test_oracle as T
    kernels = [name for name in dir(T) if name.startswith("test_")]
    t0 = time.perf_counter()
    runs = 0
    for name in kernels:
        fn = getattr(T, name)
        params = getattr(fn, "pytestmark", [])
        variants = [v for m in params if m.name == "parametrize" for v in m.args[1]] or [None]
        for v in variants:
            fn() if v is None else fn(v)
            runs += 1
    elapsed = time.perf_counter() - t0
    ok = report(1, elapsed < 60 and T.N_CASES >= 500,
                f"{runs} kernel suites x {T.N_CASES} cases bit-exact in {elapsed:.1f}s "
                f"(need >=500 each, <60s)")
    assert ok


@pytest.mark.slow
def test_c2_static_niti_does_not_improve(grid):
    deltas = {a: 100 * (grid[_key("niti_static", a, 0, {})]["test_acc"]
                        - grid[_key("niti_static", a, 0, {})]["pre_test"]) for a in ANGLES}
    ok = report(2, all(d < 3 for d in deltas.values()),
                "static NITI gain over pre-transfer "
                + ", ".join(f"{a} deg {d:+.2f} p.p." for a, d in deltas.items()) + " (need <3)")
    assert ok


@pytest.mark.slow
def test_c3_priot_beats_static_niti(grid):
    need = {30: 5, 45: 20}
    gaps = {a: 100 * (_median(grid, "priot", a) - grid[_key("niti_static", a, 0, {})]["test_acc"])
            for a in ANGLES}
    ok = report(3, all(gaps[a] >= need[a] for a in ANGLES),
                "PRIOT median minus static NITI "
                + ", ".join(f"{a} deg {gaps[a]:+.2f} p.p. (need >={need[a]})" for a in ANGLES))
    assert ok


@pytest.mark.slow
def test_c4_priot_s_ordering(grid):
    s80 = 100 * _median(grid, "priot_s", 45, dict(pruning_rate=0.8, selection="random"))
    s90 = 100 * _median(grid, "priot_s", 45, dict(pruning_rate=0.9, selection="random"))
    full = 100 * _median(grid, "priot", 45)
    ok = s80 >= s90 - 2 and s80 <= full + 2 and s90 <= full + 2
    report(4, ok, f"45 deg medians: PRIOT-S p80 {s80:.2f}, PRIOT-S p90 {s90:.2f}, PRIOT {full:.2f} "
                  "(need p80 >= p90-2, both <= PRIOT+2)")
    assert ok


def collapse_windows(history, drop=0.20):
    """Epoch pairs (i, j), i < j, where test accuracy falls by more than ``drop``."""
    return [(i, j) for i in range(len(history)) for j in range(i + 1, len(history))
            if history[i][2] - history[j][2] > drop]


def has_overflow_crossing(history, i, j, low=0.05, high=0.50):
    """Inside epochs i..j some epoch is below ``low`` and a later one above ``high``.

    Epoch 0 runs no training steps, so its recorded fraction is 0.
    """
    fractions = [history[e][3] for e in range(i, j + 1)]
    return any(fractions[a] < low and any(f > high for f in fractions[a + 1:])
               for a in range(len(fractions)))


def test_collapse_window_helpers():
    flat = [(e, 0.8, 0.8, 0.0) for e in range(4)]
    assert collapse_windows(flat) == []
    crash = [(0, .8, .8, 0.0), (1, .8, .79, 0.01), (2, .1, .1, 0.9), (3, .1, .1, 0.95)]
    assert (1, 2) in collapse_windows(crash) and has_overflow_crossing(crash, 1, 2)
    quiet = [(0, .8, .8, 0.0), (1, .1, .1, 0.0)]
    assert collapse_windows(quiet) == [(0, 1)] and not has_overflow_crossing(quiet, 0, 1)


@pytest.mark.slow
def test_c5_collapse_signature(grid):
    checked, bad = 0, []
    for a in ANGLES:
        hist = grid[_key("niti_static", a, 0, {})]["history"]
        for i, j in collapse_windows(hist):
            checked += 1
            if not has_overflow_crossing(hist, i, j):
                bad.append((a, i, j, max(h[3] for h in hist[i:j + 1])))
    if checked == 0:
        detail = "no static-NITI collapse observed (vacuous)"
    else:
        worst = bad[0] if bad else None
        detail = (f"{checked} collapse windows, {len(bad)} without a <5% -> >50% saturation "
                  "crossing" + (f"; e.g. {worst[0]} deg epochs {worst[1]}-{worst[2]}, peak "
                                f"saturated fraction {100 * worst[3]:.2f}%" if worst else ""))
    ok = report(5, not bad, detail)
    assert ok


@pytest.mark.slow
def test_c6_weights_frozen_and_unscored_edges_kept(grid):
    runs = [v for k, v in grid.items() if k.startswith("priot")]
    weights = all(r["final_weights_equal"] and r["audit_weights"] for r in runs)
    unscored = all(r["audit_unscored"] for r in runs)
    epochs = sum(r["audit_epochs"] for r in runs)
    ok = report(6, weights and unscored and all(r["audit_epochs"] == 30 for r in runs),
                f"{len(runs)} PRIOT/PRIOT-S runs, {epochs} audited epochs: weights byte-equal "
                f"{weights}, unscored edges never pruned {unscored}")
    assert ok


def test_c7_footprint_orderings():
    spec = tiny_cnn()
    niti = estimate_footprint(spec, "niti_static")
    priot = estimate_footprint(spec, "priot")
    s90 = estimate_footprint(spec, "priot_s", 0.9)
    s80 = estimate_footprint(spec, "priot_s", 0.8)
    ratio = priot / niti
    ok = priot > niti and s90 < s80 < priot and 1.3 <= ratio <= 2.2
    report(7, ok, f"NITI {niti:,} B, PRIOT {priot:,} B, PRIOT-S p90 {s90:,} B, p80 {s80:,} B, "
                  f"ratio {ratio:.3f} (need [1.3, 2.2])")
    assert ok


@pytest.mark.slow
def test_c8_reproduce_is_deterministic(tmp_path, capsys):
    args = ["--angles", "30,45", "--methods", "niti_static,priot,priot_s",
            "--pruning-rates", "0.9,0.8", "--selections", "random,weight_based", "--seeds", "2",
            "--epochs", "3", "--n-train", "256", "--n-test", "256"]
    outs = [tmp_path / "first", tmp_path / "second"]
    codes = [main(["reproduce", "--out", str(o), *args]) for o in outs]
    capsys.readouterr()
    runs = sorted(p.name for p in (outs[0] / "runs").iterdir())
    same = all(deterministic_rows(outs[0] / "runs" / r / "metrics.csv")
               == deterministic_rows(outs[1] / "runs" / r / "metrics.csv") for r in runs)
    same_table = (outs[0] / "table.txt").read_bytes() == (outs[1] / "table.txt").read_bytes()
    ok = report(8, codes == [0, 0] and same and same_table and len(runs) == 2 * (1 + 2 + 8),
                f"two reproduce executions, {len(runs)} runs: metrics CSVs identical "
                f"without wall time {same}, tables identical {same_table}")
    assert ok


def test_c9_property_suites(tmp_path):
    log = tmp_path / "cases.json"
    t0 = time.perf_counter()
    proc = subprocess.run([sys.executable, "-m", "pytest", "-q", "-p", "no:cacheprovider",
                           str(TESTS / "test_properties.py")],
                          env=dict(os.environ, PRIOT_CASE_LOG=str(log)),
                          capture_output=True, text=True)
    elapsed = time.perf_counter() - t0
    cases = json.loads(log.read_text()) if log.exists() else {}
    total = sum(cases.values())
    ok = report(9, proc.returncode == 0 and total >= 10_000 and elapsed < 120,
                f"{len(cases)} property suites, {total:,} cases, exit {proc.returncode}, "
                f"{elapsed:.1f}s (need >=10,000 cases, <120s)")
    assert ok, proc.stdout[-2000:]
