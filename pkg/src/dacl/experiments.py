"""Ablation grid: every ablation row x seed, trained and scored in worker processes."""

from __future__ import annotations

import math
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .config import ABLATION_ROWS, apply_ablation, desk_config, load_config
from .cotrain import Trainer, embeddings_for
from .density import compactness_report
from .errors import UndefinedMetricError
from .synthdata import make_split

ROW_ORDER = ("I", "II", "III", "IV", "V", "VI")


@dataclass
class RunResult:
    ablation: str
    seed: int
    macro: dict
    compactness: dict
    seconds: float


@dataclass
class GridResult:
    runs: list = field(default_factory=list)
    wall_seconds: float = 0.0

    def by_ablation(self, name):
        return [r for r in self.runs if r.ablation == name]

    def dice(self, name):
        return np.array([r.macro["dice"] for r in self.by_ablation(name)])

    def summary(self):
        """Per-row mean/std of macro Dice and the seed-mean compactness metrics."""
        out = {}
        for row in ROW_ORDER:
            name = ABLATION_ROWS[row]
            runs = self.by_ablation(name)
            if not runs:
                continue
            d = self.dice(name)
            comp = {}
            for key in ("silhouette", "davies_bouldin", "v_measure"):
                vals = [r.compactness[key] for r in runs if key in r.compactness]
                if vals:
                    comp[key] = float(np.mean(vals))
            out[row] = {
                "ablation": name,
                "dice_mean": float(d.mean()),
                "dice_std": float(d.std(ddof=1)) if len(d) > 1 else 0.0,
                "compactness": comp,
            }
        return out


def pooled_std(a, b):
    """Equal-weight pooled sample standard deviation of two groups."""
    va = np.var(a, ddof=1) if len(a) > 1 else 0.0
    vb = np.var(b, ddof=1) if len(b) > 1 else 0.0
    return math.sqrt((va + vb) / 2.0)


def run_one(ablation, seed, n_scenes=100, labeled_fraction=0.05, iterations=None, config_path=None):
    """Train one (ablation, seed) cell from scratch and score it on the test split."""
    cfg = load_config(config_path) if config_path else desk_config()
    cfg = cfg.replace(seed=seed)
    if iterations is not None:
        cfg = cfg.replace(iterations=iterations)
    cfg = apply_ablation(cfg, ablation).validate()
    split = make_split(n_scenes, labeled_fraction, seed)
    start = time.perf_counter()
    trainer = Trainer(cfg, split)
    report = trainer.run()
    try:
        comp = compactness_report(embeddings_for(trainer, split.test, cfg.phi))
    except UndefinedMetricError:
        comp = {}
    return RunResult(ablation, seed, report.macro, comp, time.perf_counter() - start)


def _star(args):
    return run_one(*args)


def default_workers():
    raw = os.environ.get("DACL_THREADS")
    return max(1, int(raw)) if raw else (os.cpu_count() or 1)


def run_grid(ablations, seeds, n_scenes=100, labeled_fraction=0.05, iterations=None,
             config_path=None, workers=None, progress=None):
    jobs = [(a, s, n_scenes, labeled_fraction, iterations, config_path) for a in ablations for s in seeds]
    workers = workers or default_workers()
    start = time.perf_counter()
    result = GridResult()
    if workers == 1:
        results = map(_star, jobs)
    else:
        pool = ProcessPoolExecutor(max_workers=workers)
        results = pool.map(_star, jobs)
    try:
        for r in results:
            result.runs.append(r)
            if progress:
                progress(r)
    finally:
        if workers != 1:
            pool.shutdown()
    result.wall_seconds = time.perf_counter() - start
    return result


def directional_checks(grid, margin=2.0):
    """The ablation-trend claims as booleans with the numbers behind them."""
    s = grid.summary()
    full, base = s["VI"]["dice_mean"], s["I"]["dice_mean"]
    steps = []
    for prev, cur in zip(ROW_ORDER[1:-1], ROW_ORDER[2:]):
        a, b = grid.dice(ABLATION_ROWS[prev]), grid.dice(ABLATION_ROWS[cur])
        tol = pooled_std(a, b)
        steps.append({"from": prev, "to": cur, "delta": float(b.mean() - a.mean()), "pooled_std": tol,
                      "ok": bool(b.mean() >= a.mean() - tol)})
    cb, cf = s["I"]["compactness"], s["VI"]["compactness"]
    compact = {
        "silhouette": cf.get("silhouette", -np.inf) > cb.get("silhouette", np.inf),
        "davies_bouldin": cf.get("davies_bouldin", np.inf) < cb.get("davies_bouldin", -np.inf),
        "v_measure": cf.get("v_measure", -np.inf) > cb.get("v_measure", np.inf),
    }
    return {
        "gain": full - base,
        "gain_ok": full >= base + margin,
        "steps": steps,
        "monotone_ok": all(st["ok"] for st in steps),
        "compactness": compact,
        "compactness_ok": all(compact.values()),
    }
