"""Forecast evaluation and the experiment harness.

Evaluation scores a trained model on a dataset's test split: volume RMSE in
cm^3 over every (patient, forecast origin, horizon day, treatment arm) cell
with a ground-truth target, split out per horizon day and per arm, plus the
Brier score of the predicted observation intensity against the intensity the
simulator actually used (factual arm only).

The harness runs (dataset -> train -> evaluate) jobs addressed by a content
fingerprint of their configuration, caches each result as a small JSON file,
and aggregates sweeps along one axis (sampling informativeness, observation
scarcity, multitask weight, horizon day) into mean +/- standard-error tables
ready for plotting. Re-running a sweep only executes jobs whose cache file
is missing, so interrupted sweeps resume where they stopped.
"""
from __future__ import annotations

import csv
import dataclasses
import hashlib
import json
import time
from concurrent.futures import ProcessPoolExecutor, as_completed
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import cdeflow as cf
from . import datastore as ds
from . import sampler as sp
from . import simkit as sk
from . import trainer as tr


class EvalError(ValueError):
    """Invalid evaluation or sweep configuration."""


# ---------------------------------------------------------------------------
# scoring


def _score_pass(trained: tr.TrainedModel, windows, dataset: ds.Dataset,
                arm: str | None, chunk_size: int):
    """One full pass over windows under a single treatment arm (or each
    window's own realized arm when arm is None).

    Returns per-tau squared-error sums and counts (volume scale, cm^3) and
    the factual-row Brier sums: intensity is only scored on windows whose
    realized arm matches the pass arm, because only there did the simulator
    draw observations from the intensity being predicted."""
    horizon = trained.model_config.horizon
    sq_sum = np.zeros(horizon)
    sq_cnt = np.zeros(horizon)
    brier_sum = 0.0
    brier_cnt = 0.0
    for lo in range(0, len(windows), chunk_size):
        chunk = windows[lo:lo + chunk_size]
        batch = cf.prepare(chunk, trained.model_config, dataset.vol_scale,
                           dataset.time_scale, arm=arm)
        y_hat, lam_hat = tr.predict_batch(trained, batch)
        y_cm3 = y_hat * dataset.vol_scale
        raw = np.stack([w.targets[arm or w.arm] for w in chunk])
        valid = (~np.isnan(raw)).astype(float)
        err2 = (y_cm3 - np.where(np.isnan(raw), 0.0, raw)) ** 2 * valid
        sq_sum += err2.sum(axis=0)
        sq_cnt += valid.sum(axis=0)
        if lam_hat is not None:
            factual = np.array([arm is None or w.arm == arm for w in chunk], dtype=bool)
            if factual.any():
                lam_true = np.stack([np.where(np.isnan(w.lambda_true), 0.0, w.lambda_true)
                                     for w in chunk])
                lam_valid = np.stack([~np.isnan(w.lambda_true) for w in chunk]).astype(float)
                lam_valid *= factual[:, None]
                brier_sum += (((lam_hat - lam_true) ** 2) * lam_valid).sum()
                brier_cnt += lam_valid.sum()
    return sq_sum, sq_cnt, brier_sum, brier_cnt


def evaluate(trained: tr.TrainedModel, dataset: ds.Dataset,
             chunk_size: int = 4096, split: str = "test") -> dict:
    """Score a trained model over both treatment arms of a dataset split.

    Returns rmse_per_tau (list, one per horizon day), rmse_overall,
    rmse_per_arm, brier (None when the model has no intensity head), and
    n_cells (number of scored volume cells)."""
    windows = list(ds.windows(dataset, split))
    if not windows:
        raise EvalError(f"dataset split {split!r} has no forecast windows")
    horizon = trained.model_config.horizon
    per_arm = {}
    sq_sum = np.zeros(horizon)
    sq_cnt = np.zeros(horizon)
    brier_sum = 0.0
    brier_cnt = 0.0
    arms = sk.ARMS if split == "test" else (None,)
    for arm in arms:
        a_sum, a_cnt, b_sum, b_cnt = _score_pass(trained, windows, dataset, arm, chunk_size)
        sq_sum += a_sum
        sq_cnt += a_cnt
        brier_sum += b_sum
        brier_cnt += b_cnt
        per_arm[arm or "factual"] = float(np.sqrt(a_sum.sum() / max(a_cnt.sum(), 1.0)))
    has_intensity = trained.intensity_params is not None
    return {
        "rmse_per_tau": list(np.sqrt(sq_sum / np.maximum(sq_cnt, 1.0))),
        "rmse_overall": float(np.sqrt(sq_sum.sum() / max(sq_cnt.sum(), 1.0))),
        "rmse_per_arm": per_arm,
        "brier": float(brier_sum / brier_cnt) if has_intensity and brier_cnt else None,
        "n_cells": float(sq_cnt.sum()),
    }


def _pooled_targets(dataset: ds.Dataset, split: str = "test") -> np.ndarray:
    vals = []
    windows = list(ds.windows(dataset, split))
    arms = sk.ARMS if split == "test" else None
    for w in windows:
        for arm in (arms or (w.arm,)):
            t = w.targets[arm]
            vals.append(t[~np.isnan(t)])
    return np.concatenate(vals) if vals else np.zeros(0)


def constant_prediction_rmse(dataset: ds.Dataset, split: str = "test") -> float:
    """RMSE of always predicting the mean target volume: the standard
    deviation of the pooled targets. A floor any useful model should beat."""
    t = _pooled_targets(dataset, split)
    if t.size == 0:
        raise EvalError(f"dataset split {split!r} has no targets")
    return float(np.sqrt(np.mean((t - t.mean()) ** 2)))


def constant_half_brier(dataset: ds.Dataset, split: str = "test") -> float:
    """Brier score of the uninformed intensity guess 0.5 on factual cells."""
    total = 0.0
    count = 0.0
    for w in ds.windows(dataset, split):
        lam = w.lambda_true
        ok = ~np.isnan(lam)
        total += ((lam[ok] - 0.5) ** 2).sum()
        count += ok.sum()
    if count == 0:
        raise EvalError(f"dataset split {split!r} has no intensity cells")
    return float(total / count)


# ---------------------------------------------------------------------------
# single runs


@dataclass(frozen=True)
class RunConfig:
    """Everything one experiment run depends on: data, model, training."""

    variant: str = "multitask"
    seed: int = 0
    gamma: float = 4.0
    scarcity: float = 1.0
    mode: str = sp.MODE_SAR_OUTCOME
    alpha: float = 0.8
    n_train: int = 200
    n_val: int = 50
    n_test: int = 100
    t_days: int = 120
    max_epochs: int = 600
    patience: int = 50
    batch_size: int = 128
    lr: float = 5e-4
    latent_dim: int = 32
    hidden: int = 8

    def __post_init__(self):
        if self.variant not in tr.VARIANTS:
            raise EvalError(f"unknown variant {self.variant!r}; pick from {tr.VARIANTS}")

    def dataset_config(self) -> ds.DatasetConfig:
        return ds.DatasetConfig(
            n_train=self.n_train, n_val=self.n_val, n_test=self.n_test,
            t_days=self.t_days, mode=self.mode, gamma=self.gamma,
            scarcity=self.scarcity, seed=self.seed,
        )

    def train_config(self) -> tr.TrainConfig:
        return tr.TrainConfig(
            variant=self.variant, batch_size=self.batch_size, lr=self.lr,
            max_epochs=self.max_epochs, patience=self.patience,
            alpha=self.alpha, seed=self.seed,
        )

    def model_config(self) -> cf.ModelConfig:
        return cf.ModelConfig(latent_dim=self.latent_dim, hidden=self.hidden)


def run_fingerprint(cfg: RunConfig) -> str:
    blob = json.dumps(dataclasses.asdict(cfg), sort_keys=True)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


@dataclass
class RunResult:
    variant: str
    seed: int
    fingerprint: str
    rmse_per_tau: list = field(default_factory=list)
    rmse_overall: float = float("nan")
    rmse_per_arm: dict = field(default_factory=dict)
    brier: float | None = None
    stopped_epoch: int = 0
    wall_time: float = 0.0
    failed: bool = False
    error: str = ""


def run_one(cfg: RunConfig) -> RunResult:
    """Generate the dataset, train the requested variant, score it.

    The dataset seed equals the run seed, so runs that differ only in the
    sampling parameters share the same underlying trajectories (common
    random numbers across sweep points)."""
    t0 = time.perf_counter()
    data = ds.generate_dataset(cfg.dataset_config())
    trained = tr.train(data, cfg.model_config(), cfg.train_config())
    scores = evaluate(trained, data)
    return RunResult(
        variant=cfg.variant,
        seed=cfg.seed,
        fingerprint=run_fingerprint(cfg),
        rmse_per_tau=[float(v) for v in scores["rmse_per_tau"]],
        rmse_overall=scores["rmse_overall"],
        rmse_per_arm=scores["rmse_per_arm"],
        brier=scores["brier"],
        stopped_epoch=trained.stopped_epoch,
        wall_time=time.perf_counter() - t0,
    )


def _run_guarded(cfg: RunConfig) -> RunResult:
    try:
        return run_one(cfg)
    except Exception as exc:  # noqa: BLE001 - cache the failure, keep sweeping
        return RunResult(
            variant=cfg.variant, seed=cfg.seed, fingerprint=run_fingerprint(cfg),
            failed=True, error=f"{type(exc).__name__}: {exc}",
        )


# ---------------------------------------------------------------------------
# sweeps


AXES = ("gamma", "scarcity", "alpha", "unrelated_gamma", "tau")


def axis_config(base: RunConfig, axis: str, value, variant: str, seed: int) -> RunConfig:
    """The run configuration of one sweep point. The tau axis selects a
    reporting column, not a configuration change, so it returns the base."""
    cfg = replace(base, variant=variant, seed=seed)
    if axis == "gamma":
        return replace(cfg, gamma=float(value))
    if axis == "scarcity":
        return replace(cfg, scarcity=float(value))
    if axis == "alpha":
        return replace(cfg, alpha=float(value))
    if axis == "unrelated_gamma":
        return replace(cfg, gamma=float(value), mode=sp.MODE_SAR_UNRELATED)
    return cfg


@dataclass(frozen=True)
class SweepSpec:
    """One-axis sweep: which knob to move, its values, and who competes."""

    axis: str
    values: tuple
    variants: tuple = tr.VARIANTS
    n_seeds: int = 10
    base: RunConfig = field(default_factory=RunConfig)

    def __post_init__(self):
        if self.axis not in AXES:
            raise EvalError(f"unknown sweep axis {self.axis!r}; pick from {AXES}")
        if not self.values:
            raise EvalError("sweep needs at least one axis value")
        if self.n_seeds < 1:
            raise EvalError("n_seeds must be positive")
        for v in self.variants:
            if v not in tr.VARIANTS:
                raise EvalError(f"unknown variant {v!r}; pick from {tr.VARIANTS}")
        if self.axis == "alpha" and tuple(self.variants) != ("multitask",):
            raise EvalError("the alpha axis only applies to the multitask variant")
        if self.axis == "tau":
            horizon = 5
            bad = [v for v in self.values if int(v) != v or not 1 <= v <= horizon]
            if bad:
                raise EvalError(f"tau values must be whole days in 1..{horizon}, got {bad}")

    def jobs(self) -> list:
        """Expand to (axis_value, RunConfig) pairs, deduplicated but ordered.

        The tau axis reads different columns of the same runs, so it expands
        to a single sweep point per (variant, seed)."""
        out = []
        seen = set()
        values = self.values if self.axis != "tau" else (self.base.gamma,)
        for value in values:
            for variant in self.variants:
                for seed in range(self.n_seeds):
                    cfg = axis_config(self.base, self.axis, value, variant, seed)
                    fp = run_fingerprint(cfg)
                    if fp not in seen:
                        seen.add(fp)
                        out.append((value, cfg))
        return out


def _mean_se(values) -> tuple:
    arr = np.asarray([v for v in values if v is not None and np.isfinite(v)], dtype=float)
    if arr.size == 0:
        return float("nan"), float("nan"), 0
    se = float(arr.std(ddof=1) / np.sqrt(arr.size)) if arr.size > 1 else 0.0
    return float(arr.mean()), se, int(arr.size)


def _result_path(cache_dir: Path, fingerprint: str) -> Path:
    return cache_dir / f"{fingerprint}.json"


def _load_result(path: Path) -> RunResult:
    payload = json.loads(path.read_text())
    return RunResult(**payload)


def _store_result(path: Path, result: RunResult) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(".tmp")
    tmp.write_text(json.dumps(dataclasses.asdict(result), indent=1))
    tmp.replace(path)


def _write_manifest(out_dir: Path, spec: SweepSpec, status: dict) -> None:
    done = sum(1 for s in status.values() if s["status"] in ("ok", "failed"))
    failed = sum(1 for s in status.values() if s["status"] == "failed")
    payload = {
        "axis": spec.axis,
        "values": list(spec.values),
        "variants": list(spec.variants),
        "n_seeds": spec.n_seeds,
        "total": len(status),
        "done": done,
        "failed": failed,
        "complete": done == len(status),
        "runs": status,
    }
    tmp = out_dir / "manifest.tmp"
    tmp.write_text(json.dumps(payload, indent=1))
    tmp.replace(out_dir / "manifest.json")


def _tau_metric(result: RunResult, tau) -> float | None:
    idx = int(tau) - 1
    if result.failed or idx >= len(result.rmse_per_tau):
        return None
    return result.rmse_per_tau[idx]


def sweep_table(spec: SweepSpec, results: dict) -> list:
    """Aggregate cached results into one row per axis value: per-variant
    RMSE mean/SE/run-count and Brier mean/SE. results maps fingerprints to
    RunResults; failed runs are excluded from the statistics."""
    rows = []
    for value in spec.values:
        row = {"value": float(value)}
        for variant in spec.variants:
            picked = []
            for seed in range(spec.n_seeds):
                cfg = axis_config(spec.base, spec.axis, value, variant, seed)
                res = results.get(run_fingerprint(cfg))
                if res is not None:
                    picked.append(res)
            ok = [r for r in picked if not r.failed]
            if spec.axis == "tau":
                rmse_vals = [_tau_metric(r, value) for r in ok]
            else:
                rmse_vals = [r.rmse_overall for r in ok]
            mean, se, n = _mean_se(rmse_vals)
            b_mean, b_se, _ = _mean_se([r.brier for r in ok])
            row[f"{variant}_rmse_mean"] = mean
            row[f"{variant}_rmse_se"] = se
            row[f"{variant}_n"] = n
            row[f"{variant}_failed"] = len(picked) - len(ok)
            row[f"{variant}_brier_mean"] = b_mean
            row[f"{variant}_brier_se"] = b_se
        rows.append(row)
    return rows


def _write_table_csv(path: Path, rows: list) -> None:
    if not rows:
        return
    with path.open("w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0]))
        writer.writeheader()
        writer.writerows(rows)


def _write_results_csv(path: Path, spec: SweepSpec, jobs: list, results: dict) -> None:
    horizon = 5
    names = ["value", "variant", "seed", "fingerprint", "rmse_overall"]
    names += [f"rmse_tau_{t}" for t in range(1, horizon + 1)]
    names += ["brier", "stopped_epoch", "wall_time", "failed", "error"]
    with path.open("w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=names)
        writer.writeheader()
        for value, cfg in jobs:
            res = results.get(run_fingerprint(cfg))
            if res is None:
                continue
            row = {
                "value": value, "variant": res.variant, "seed": res.seed,
                "fingerprint": res.fingerprint, "rmse_overall": res.rmse_overall,
                "brier": "" if res.brier is None else res.brier,
                "stopped_epoch": res.stopped_epoch, "wall_time": round(res.wall_time, 3),
                "failed": int(res.failed), "error": res.error,
            }
            for t in range(1, horizon + 1):
                row[f"rmse_tau_{t}"] = (res.rmse_per_tau[t - 1]
                                        if len(res.rmse_per_tau) >= t else "")
            writer.writerow(row)


def run_sweep(spec: SweepSpec, out_dir, threads: int = 1, progress=None,
              cache_dir=None) -> dict:
    """Run every job of a sweep, reusing cached results keyed by config
    fingerprint, and write results.csv, plot_<axis>.csv, and manifest.json
    under out_dir. Runs are cached as JSON under cache_dir (default
    out_dir/runs); sweeps pointed at the same cache share identical runs.
    A cached failure is returned as-is; delete its JSON file to retry.
    Returns {"table": rows, "results": {...}}."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    cache_dir = out_dir / "runs" if cache_dir is None else Path(cache_dir)
    jobs = spec.jobs()
    status = {}
    results = {}
    pending = []
    for value, cfg in jobs:
        fp = run_fingerprint(cfg)
        path = _result_path(cache_dir, fp)
        entry = {"variant": cfg.variant, "seed": cfg.seed, "value": value,
                 "status": "pending"}
        if path.exists():
            res = _load_result(path)
            results[fp] = res
            entry["status"] = "failed" if res.failed else "ok"
        else:
            pending.append((fp, cfg))
        status[fp] = entry
    _write_manifest(out_dir, spec, status)

    def finish(fp: str, res: RunResult) -> None:
        _store_result(_result_path(cache_dir, fp), res)
        results[fp] = res
        status[fp]["status"] = "failed" if res.failed else "ok"
        _write_manifest(out_dir, spec, status)
        if progress is not None:
            progress(fp, res)

    if threads > 1 and pending:
        with ProcessPoolExecutor(max_workers=threads) as pool:
            futures = {pool.submit(_run_guarded, cfg): fp for fp, cfg in pending}
            for fut in as_completed(futures):
                finish(futures[fut], fut.result())
    else:
        for fp, cfg in pending:
            finish(fp, _run_guarded(cfg))

    table = sweep_table(spec, results)
    _write_table_csv(out_dir / f"plot_{spec.axis}.csv", table)
    _write_results_csv(out_dir / "results.csv", spec, jobs, results)
    return {"table": table, "results": results}


AXIS_LABELS = {
    "gamma": "sampling informativeness (gamma)",
    "scarcity": "observation scarcity divisor",
    "alpha": "multitask intensity weight (alpha)",
    "unrelated_gamma": "unrelated-process informativeness (gamma)",
    "tau": "forecast horizon (days ahead)",
}


def write_sweep_svg(table: list, spec: SweepSpec, path) -> None:
    """Line plot with mean +/- SE bands per variant, one point per axis value."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(6.0, 4.0))
    xs = [row["value"] for row in table]
    for variant in spec.variants:
        mean = np.array([row[f"{variant}_rmse_mean"] for row in table])
        se = np.array([row[f"{variant}_rmse_se"] for row in table])
        ax.plot(xs, mean, marker="o", label=variant)
        ax.fill_between(xs, mean - se, mean + se, alpha=0.25)
    ax.set_xlabel(AXIS_LABELS.get(spec.axis, spec.axis))
    ax.set_ylabel("test RMSE (cm^3)")
    ax.legend()
    ax.grid(True, alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, format="svg")
    plt.close(fig)
