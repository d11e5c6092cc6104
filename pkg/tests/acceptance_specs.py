"""Shared sweep definitions for the acceptance suite.

The acceptance tests compare trained-model scores across sampling regimes.
All sweeps pull from one run cache keyed by config fingerprint, so points
shared between sweeps (for example the gamma=4 baseline, which is also the
scarcity=1 point) are trained exactly once.  scripts/
populate_acceptance_cache.py fills the cache ahead of time; with a complete
cache the tests only aggregate, with an incomplete one they train the
missing runs inline (slow on a small machine, but always correct).
"""

from dataclasses import replace
from pathlib import Path

import numpy as np

import treatcast.evalx as ev

CACHE_DIR = Path(__file__).resolve().parent / "acceptance_cache"
RUNS_DIR = CACHE_DIR / "runs"
TABLES_DIR = CACHE_DIR / "tables"

N_SEEDS = 10
BASE = ev.RunConfig()  # gamma=4, scarcity=1, outcome-driven sampling, desk scale
BASE_G6 = replace(BASE, gamma=6.0)

GAMMA = ev.SweepSpec(
    axis="gamma",
    values=(0.0, 2.0, 4.0, 6.0, 8.0),
    variants=("tecde", "multitask"),
    n_seeds=N_SEEDS,
    base=BASE,
)
SCARCITY = ev.SweepSpec(
    axis="scarcity",
    values=(1.0, 2.0, 3.0, 4.0),
    n_seeds=N_SEEDS,
    base=BASE,  # all three variants at gamma=4
)
UNRELATED = ev.SweepSpec(
    axis="unrelated_gamma",
    values=(0.0, 2.0, 4.0, 6.0, 8.0),
    n_seeds=N_SEEDS,
    base=BASE,
)
ALPHA = ev.SweepSpec(
    axis="alpha",
    values=(0.2, 0.5, 0.8, 0.95),
    variants=("multitask",),
    n_seeds=N_SEEDS,
    base=BASE_G6,
)
TAU = ev.SweepSpec(
    axis="tau",
    values=(1, 2, 3, 4, 5),
    variants=("tecde", "multitask"),
    n_seeds=N_SEEDS,
    base=BASE_G6,
)

ALL_SPECS = {
    "gamma": GAMMA,
    "scarcity": SCARCITY,
    "unrelated": UNRELATED,
    "alpha": ALPHA,
    "tau": TAU,
}


def seed_metrics(spec: ev.SweepSpec, results: dict, value, variant: str,
                 metric) -> list:
    """Per-seed metric values for one sweep point, skipping failed runs.

    metric is "overall" (RMSE over every grid cell), "brier", or an integer
    forecast day (1-based) selecting that day's RMSE."""
    out = []
    for seed in range(spec.n_seeds):
        cfg = ev.axis_config(spec.base, spec.axis, value, variant, seed)
        res = results.get(ev.run_fingerprint(cfg))
        if res is None or res.failed:
            continue
        if metric == "overall":
            out.append(res.rmse_overall)
        elif metric == "brier":
            if res.brier is not None:
                out.append(res.brier)
        else:
            out.append(res.rmse_per_tau[int(metric) - 1])
    return out


def mean_se(values) -> tuple:
    """Mean and standard error (ddof=1) of a metric list; SE is 0 for a
    single value and nan for an empty list."""
    arr = np.asarray(list(values), dtype=float)
    if arr.size == 0:
        return float("nan"), float("nan")
    se = float(arr.std(ddof=1) / np.sqrt(arr.size)) if arr.size > 1 else 0.0
    return float(arr.mean()), se


def combined_se(se_a: float, se_b: float) -> float:
    """Standard error of a difference of two independent means."""
    return float(np.sqrt(se_a**2 + se_b**2))
