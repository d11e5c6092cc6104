"""Dataset assembly, splits, forecasting windows, and on-disk files.

A dataset bundles simulated patients into train/val/test splits. Train
and val patients are observed irregularly through the sampling process;
test patients are observed every day and additionally carry the other
arm's potential-outcome trajectory, so forecasts can be scored against
both arms.

Forecast windows slide over each patient: at origin day t the model sees
the observed history in [t - lookback, t] plus the treatment plan over
(t, t + horizon], and is scored on the horizon days that were observed.
Windows with no observed tumor size in the lookback are dropped; the
interpolation needs at least one knot.

On-disk layout (one directory per dataset):
  observations.csv  one row per (patient, day) with the observation mask,
                    recorded tumor size, treatment indicators, the true
                    intensity, and static covariates
  truth.csv         full daily ground truth for both arms plus noise
  patients.csv      per-patient parameters, group, arm, split
  meta.json         config echo, seeds, normalization constants, schema
"""
from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import sampler as sp
from . import simkit as sk

__all__ = [
    "DataError",
    "DatasetConfig",
    "PatientData",
    "Dataset",
    "ForecastWindow",
    "generate_dataset",
    "windows",
    "save",
    "load",
    "datasets_equal",
]

SCHEMA_VERSION = 1
SPLITS = ("train", "val", "test")


class DataError(ValueError):
    """Configuration or file-format problem in dataset handling."""


@dataclass(frozen=True)
class DatasetConfig:
    t_days: int = 120
    n_train: int = 200
    n_val: int = 50
    n_test: int = 200
    mode: str = sp.MODE_SAR_OUTCOME
    gamma: float = 0.0
    scarcity: float = 1.0
    n_static: int = sp.N_STATIC
    lookback: int = 7
    horizon: int = 5
    seed: int = 0

    def __post_init__(self):
        if min(self.n_train, self.n_val, self.n_test) < 0 or self.n_train + self.n_val + self.n_test == 0:
            raise DataError("split sizes must be nonnegative and sum to at least one patient")
        if self.t_days < 70:
            raise DataError("t_days must be at least 70 for the treatment plans")
        if not (0 < self.lookback and 0 < self.horizon and self.lookback + self.horizon < self.t_days):
            raise DataError("lookback/horizon do not fit the horizon")
        # surface sampling-parameter errors at configuration time
        sp.IntensitySpec(mode=self.mode, gamma=self.gamma, scarcity=self.scarcity, n_static=self.n_static)

    def intensity_spec(self) -> sp.IntensitySpec:
        return sp.IntensitySpec(
            mode=self.mode, gamma=self.gamma, scarcity=self.scarcity, n_static=self.n_static
        )


@dataclass
class PatientData:
    patient_id: int
    split: str
    traj: sk.PatientTrajectory
    schedule: sk.TreatmentSchedule
    observed: np.ndarray      # (T,) int8 observation mask
    lambda_true: np.ndarray   # (T,) intensity used for the mask
    x_static: np.ndarray | None

    @property
    def arm(self) -> str:
        return self.traj.params.arm


@dataclass
class Dataset:
    config: DatasetConfig
    patients: list
    coeffs: np.ndarray | None   # dataset-level coefficients, unrelated mode only
    vol_scale: float
    time_scale: float
    schema_version: int = SCHEMA_VERSION

    def split(self, name: str) -> list:
        if name not in SPLITS:
            raise DataError(f"unknown split {name!r}")
        return [p for p in self.patients if p.split == name]


@dataclass(frozen=True)
class ForecastWindow:
    patient_id: int
    origin: int
    arm: str
    obs_times: np.ndarray     # (k,) observed days within [origin-lookback, origin]
    obs_y: np.ndarray         # (k,) cm^3
    treat_chemo: np.ndarray   # (lookback+1,) indicators for days origin-lookback..origin
    treat_radio: np.ndarray
    x_static: np.ndarray | None
    plans: dict               # arm -> (chemo, radio) indicators for days origin..origin+horizon
    targets: dict             # arm -> (horizon,) cm^3, nan where the day is out of range
    dn: np.ndarray            # (horizon,) observation indicator at origin+tau
    grid_mask: np.ndarray     # (horizon,) 1 where origin+tau < t_days
    lambda_true: np.ndarray   # (horizon,) factual intensity, nan out of range


def generate_dataset(config: DatasetConfig) -> Dataset:
    """Simulate, sample, and split patients; deterministic per config.seed.

    Patient trajectories and observation draws depend only on the seed
    and split sizes, not on the intensity settings, so datasets generated
    with the same seed at different gamma or scarcity share trajectories.
    """
    spec = config.intensity_spec()
    root = np.random.SeedSequence(config.seed)
    patients_ss, sampling_ss, coeffs_ss, static_ss = root.spawn(4)

    n_total = config.n_train + config.n_val + config.n_test
    patient_seeds = patients_ss.generate_state(n_total, dtype=np.uint64)
    sampling_rng = np.random.default_rng(sampling_ss)
    static_rng = np.random.default_rng(static_ss)

    coeffs = None
    if config.mode == sp.MODE_SAR_UNRELATED:
        coeffs = np.random.default_rng(coeffs_ss).uniform(-1.0, 1.0, size=config.n_static)

    patients = []
    for i in range(n_total):
        split = "train" if i < config.n_train else ("val" if i < config.n_train + config.n_val else "test")
        params = sk.sample_patient_params(int(patient_seeds[i]))
        schedule = sk.build_schedule(params.arm, config.t_days)
        traj = sk.simulate_trajectory(params, schedule, config.t_days, patient_id=i)
        x_static = None
        if config.mode == sp.MODE_SAR_UNRELATED:
            x_static = static_rng.normal(size=config.n_static)
        records = sp.realize_observations(
            traj,
            spec,
            sampling_rng,
            schedule,
            x_static=x_static,
            coeffs=coeffs,
            force_daily=(split == "test"),
        )
        patients.append(
            PatientData(
                patient_id=i,
                split=split,
                traj=traj,
                schedule=schedule,
                observed=np.array([r.observed for r in records], dtype=np.int8),
                lambda_true=np.array([r.lambda_true for r in records]),
                x_static=x_static,
            )
        )
    return Dataset(
        config=config,
        patients=patients,
        coeffs=coeffs,
        vol_scale=sk.VOL_MAX,
        time_scale=float(config.t_days),
    )


def _plan_indicators(arm: str, origin: int, horizon: int, t_days: int):
    sched = sk.build_schedule(arm, t_days)
    days = range(origin, origin + horizon + 1)
    chemo = np.array([1 if d in sched.chemo_days and d < t_days else 0 for d in days], dtype=np.int8)
    radio = np.array([1 if d in sched.radio_days and d < t_days else 0 for d in days], dtype=np.int8)
    return chemo, radio


def windows(dataset: Dataset, split: str):
    """Yield forecasting windows; pure and repeatable for a fixed dataset."""
    cfg = dataset.config
    lb, hz, t_days = cfg.lookback, cfg.horizon, cfg.t_days
    both_arms = split == "test"
    plan_cache = {}

    def plan_for(arm, t):
        key = (arm, t)
        if key not in plan_cache:
            plan_cache[key] = _plan_indicators(arm, t, hz, t_days)
        return plan_cache[key]

    for p in dataset.split(split):
        arms = sk.ARMS if both_arms else (p.arm,)
        chemo_ind = p.schedule.chemo_indicator(t_days)
        radio_ind = p.schedule.radio_indicator(t_days)
        for t in range(lb, t_days - hz + 1):
            lo = t - lb
            local_obs = np.nonzero(p.observed[lo : t + 1])[0]
            if local_obs.size == 0:
                continue
            obs_times = local_obs + lo
            taus = np.arange(1, hz + 1)
            days = t + taus
            grid = (days < t_days).astype(np.int8)
            dn = np.where(grid == 1, p.observed[np.minimum(days, t_days - 1)], 0).astype(np.int8)
            lam = np.where(grid == 1, p.lambda_true[np.minimum(days, t_days - 1)], np.nan)
            targets = {}
            plans = {}
            for arm in arms:
                y = p.traj.y_factual if arm == p.arm else p.traj.y_counterfactual
                targets[arm] = np.where(grid == 1, y[np.minimum(days, t_days - 1)], np.nan)
                plans[arm] = plan_for(arm, t)
            yield ForecastWindow(
                patient_id=p.patient_id,
                origin=t,
                arm=p.arm,
                obs_times=obs_times,
                obs_y=p.traj.y_factual[obs_times],
                treat_chemo=chemo_ind[lo : t + 1],
                treat_radio=radio_ind[lo : t + 1],
                x_static=p.x_static,
                plans=plans,
                targets=targets,
                dn=dn,
                grid_mask=grid,
                lambda_true=lam,
            )


def _fmt(x: float) -> str:
    return repr(float(x))


def save(dataset: Dataset, path) -> None:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    cfg = dataset.config
    n_static = cfg.n_static

    meta = {
        "schema_version": dataset.schema_version,
        "config": asdict(cfg),
        "vol_scale": dataset.vol_scale,
        "time_scale": dataset.time_scale,
        "coeffs": None if dataset.coeffs is None else [float(c) for c in dataset.coeffs],
        "n_patients": len(dataset.patients),
    }
    (path / "meta.json").write_text(json.dumps(meta, indent=2))

    with open(path / "observations.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(
            ["patient_id", "split", "arm", "t", "observed", "y_observed", "chemo", "radio", "lambda_true"]
            + [f"x_static_{j}" for j in range(n_static)]
        )
        for p in dataset.patients:
            chemo = p.schedule.chemo_indicator(cfg.t_days)
            radio = p.schedule.radio_indicator(cfg.t_days)
            xs = [_fmt(v) for v in p.x_static] if p.x_static is not None else ["0"] * n_static
            for t in range(cfg.t_days):
                obs = int(p.observed[t])
                w.writerow(
                    [
                        p.patient_id,
                        p.split,
                        p.arm,
                        t,
                        obs,
                        _fmt(p.traj.y_factual[t]) if obs else "",
                        int(chemo[t]),
                        int(radio[t]),
                        _fmt(p.lambda_true[t]),
                    ]
                    + xs
                )

    with open(path / "truth.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["patient_id", "t", "y_factual", "y_counterfactual", "noise"])
        for p in dataset.patients:
            for t in range(cfg.t_days):
                w.writerow(
                    [
                        p.patient_id,
                        t,
                        _fmt(p.traj.y_factual[t]),
                        _fmt(p.traj.y_counterfactual[t]),
                        _fmt(p.traj.noise[t]),
                    ]
                )

    with open(path / "patients.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(
            ["patient_id", "split", "arm", "group", "seed", "rho", "K", "beta_c", "alpha_r", "beta_r"]
        )
        for p in dataset.patients:
            prm = p.traj.params
            w.writerow(
                [
                    p.patient_id,
                    p.split,
                    p.arm,
                    prm.group,
                    prm.seed,
                    _fmt(prm.rho),
                    _fmt(prm.K),
                    _fmt(prm.beta_c),
                    _fmt(prm.alpha_r),
                    _fmt(prm.beta_r),
                ]
            )


def _read_rows(path: Path, expected_header: list):
    if not path.exists():
        raise DataError(f"dataset file missing: {path}")
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"{path.name}: empty file") from None
        if header != expected_header:
            raise DataError(f"{path.name}: unexpected header {header!r}")
        for lineno, row in enumerate(reader, start=2):
            if len(row) != len(expected_header):
                raise DataError(f"{path.name} line {lineno}: expected {len(expected_header)} fields, got {len(row)}")
            yield lineno, row


def load(path) -> Dataset:
    path = Path(path)
    meta_path = path / "meta.json"
    if not meta_path.exists():
        raise DataError(f"metadata sidecar missing: {meta_path}")
    try:
        meta = json.loads(meta_path.read_text())
    except json.JSONDecodeError as e:
        raise DataError(f"meta.json: {e}") from None
    if meta.get("schema_version") != SCHEMA_VERSION:
        raise DataError(f"unsupported schema version {meta.get('schema_version')!r}")
    cfg = DatasetConfig(**meta["config"])
    t_days = cfg.t_days
    n_static = cfg.n_static

    params_by_pid = {}
    split_by_pid = {}
    obs_header = (
        ["patient_id", "split", "arm", "t", "observed", "y_observed", "chemo", "radio", "lambda_true"]
        + [f"x_static_{j}" for j in range(n_static)]
    )
    try:
        for lineno, row in _read_rows(path / "patients.csv",
                                      ["patient_id", "split", "arm", "group", "seed",
                                       "rho", "K", "beta_c", "alpha_r", "beta_r"]):
            pid = int(row[0])
            split_by_pid[pid] = row[1]
            params_by_pid[pid] = sk.PatientParams(
                rho=float(row[5]), K=float(row[6]), beta_c=float(row[7]),
                alpha_r=float(row[8]), beta_r=float(row[9]),
                group=int(row[3]), arm=row[2], seed=int(row[4]),
            )

        y_f = {pid: np.empty(t_days) for pid in params_by_pid}
        y_cf = {pid: np.empty(t_days) for pid in params_by_pid}
        noise = {pid: np.empty(t_days) for pid in params_by_pid}
        truth_rows = 0
        for lineno, row in _read_rows(path / "truth.csv",
                                      ["patient_id", "t", "y_factual", "y_counterfactual", "noise"]):
            pid, t = int(row[0]), int(row[1])
            if pid not in params_by_pid or not 0 <= t < t_days:
                raise DataError(f"truth.csv line {lineno}: unknown patient or day ({pid}, {t})")
            y_f[pid][t] = float(row[2])
            y_cf[pid][t] = float(row[3])
            noise[pid][t] = float(row[4])
            truth_rows += 1
        if truth_rows != len(params_by_pid) * t_days:
            raise DataError(f"truth.csv: expected {len(params_by_pid) * t_days} rows, found {truth_rows}")

        observed = {pid: np.zeros(t_days, dtype=np.int8) for pid in params_by_pid}
        lam = {pid: np.empty(t_days) for pid in params_by_pid}
        xs = {pid: None for pid in params_by_pid}
        obs_rows = 0
        for lineno, row in _read_rows(path / "observations.csv", obs_header):
            pid, t = int(row[0]), int(row[3])
            if pid not in params_by_pid or not 0 <= t < t_days:
                raise DataError(f"observations.csv line {lineno}: unknown patient or day ({pid}, {t})")
            obs = int(row[4])
            observed[pid][t] = obs
            lam[pid][t] = float(row[8])
            if obs and row[5] == "":
                raise DataError(f"observations.csv line {lineno}: observed day without y_observed")
            if cfg.mode == sp.MODE_SAR_UNRELATED:
                xs[pid] = np.array([float(v) for v in row[9 : 9 + n_static]])
            obs_rows += 1
        if obs_rows != len(params_by_pid) * t_days:
            raise DataError(f"observations.csv: expected {len(params_by_pid) * t_days} rows, found {obs_rows}")
    except (ValueError, IndexError) as e:
        if isinstance(e, DataError):
            raise
        raise DataError(f"malformed dataset file under {path}: {e}") from None

    patients = []
    for pid in sorted(params_by_pid):
        prm = params_by_pid[pid]
        schedule = sk.build_schedule(prm.arm, t_days)
        traj = sk.PatientTrajectory(
            patient_id=pid, params=prm, y_factual=y_f[pid],
            y_counterfactual=y_cf[pid], noise=noise[pid], T=t_days,
        )
        patients.append(
            PatientData(
                patient_id=pid,
                split=split_by_pid[pid],
                traj=traj,
                schedule=schedule,
                observed=observed[pid],
                lambda_true=lam[pid],
                x_static=xs[pid],
            )
        )
    coeffs = None if meta["coeffs"] is None else np.array(meta["coeffs"])
    return Dataset(
        config=cfg,
        patients=patients,
        coeffs=coeffs,
        vol_scale=float(meta["vol_scale"]),
        time_scale=float(meta["time_scale"]),
        schema_version=meta["schema_version"],
    )


def datasets_equal(a: Dataset, b: Dataset) -> bool:
    if a.config != b.config or a.schema_version != b.schema_version:
        return False
    if (a.coeffs is None) != (b.coeffs is None):
        return False
    if a.coeffs is not None and not np.array_equal(a.coeffs, b.coeffs):
        return False
    if len(a.patients) != len(b.patients):
        return False
    for pa, pb in zip(a.patients, b.patients):
        if (pa.patient_id, pa.split, pa.arm) != (pb.patient_id, pb.split, pb.arm):
            return False
        if pa.traj.params != pb.traj.params:
            return False
        for fa, fb in (
            (pa.traj.y_factual, pb.traj.y_factual),
            (pa.traj.y_counterfactual, pb.traj.y_counterfactual),
            (pa.traj.noise, pb.traj.noise),
            (pa.observed, pb.observed),
            (pa.lambda_true, pb.lambda_true),
        ):
            if not np.array_equal(fa, fb):
                return False
        if (pa.x_static is None) != (pb.x_static is None):
            return False
        if pa.x_static is not None and not np.array_equal(pa.x_static, pb.x_static):
            return False
    return True
