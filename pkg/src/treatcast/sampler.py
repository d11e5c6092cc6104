"""Observation process: turns latent daily trajectories into irregular records.

Observation of day t is a Bernoulli draw with probability lambda(t), the
per-day intensity (minimal sampling interval of one day). Modes:

  regular       every day observed, intensity recorded as 1
  scar          lambda = 0.5, unrelated to anything (sampling completely
                at random)
  sar_outcome   lambda(t) = sigmoid(gamma * (Dbar(t-)/D_MAX - 1/2)) where
                Dbar(t-) is the mean tumor diameter over the 15 days
                strictly before t (day 0 falls back to its own diameter)
  sar_unrelated lambda = sigmoid(gamma * sum_j c_j x_j) driven by static
                covariates x ~ N(0,1) per patient with dataset-level
                coefficients c ~ U(-1,1); constant over time

A scarcity divisor S >= 1 rescales every intensity to lambda/S.
Treatment administration is always recorded, observed or not; tumor size
is recorded only on observed days.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .simkit import PatientTrajectory, SimError, TreatmentSchedule, diameter_from_volume

__all__ = [
    "MODES",
    "D_MAX_CM",
    "DIAM_WINDOW_DAYS",
    "N_STATIC",
    "IntensitySpec",
    "ObservationRecord",
    "sigmoid",
    "intensity_outcome",
    "rolling_diameter",
    "intensity_unrelated",
    "apply_scarcity",
    "intensity_path",
    "realize_observations",
]

MODE_REGULAR = "regular"
MODE_SCAR = "scar"
MODE_SAR_OUTCOME = "sar_outcome"
MODE_SAR_UNRELATED = "sar_unrelated"
MODES = (MODE_REGULAR, MODE_SCAR, MODE_SAR_OUTCOME, MODE_SAR_UNRELATED)

D_MAX_CM = 13.0
DIAM_WINDOW_DAYS = 15
N_STATIC = 10


@dataclass(frozen=True)
class IntensitySpec:
    mode: str = MODE_SAR_OUTCOME
    gamma: float = 0.0
    scarcity: float = 1.0
    d_max: float = D_MAX_CM
    window: int = DIAM_WINDOW_DAYS
    n_static: int = N_STATIC

    def __post_init__(self):
        if self.mode not in MODES:
            raise SimError(f"unknown sampling mode {self.mode!r}")
        if self.gamma < 0:
            raise SimError("gamma must be nonnegative")
        if self.scarcity < 1:
            raise SimError("scarcity divisor must be >= 1")


@dataclass(frozen=True)
class ObservationRecord:
    t: int
    observed: int
    lambda_true: float
    treatment_chemo: int
    treatment_radio: int
    y_observed: float | None
    x_static: np.ndarray | None = None


def sigmoid(x):
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out if out.ndim else float(out)


def intensity_outcome(diam_avg: float, gamma: float, d_max: float = D_MAX_CM) -> float:
    if not 0.0 <= diam_avg <= d_max:
        raise SimError(f"average diameter {diam_avg} outside [0, {d_max}]")
    return float(sigmoid(gamma * (diam_avg / d_max - 0.5)))


def rolling_diameter(y_history: np.ndarray, t: int, window: int = DIAM_WINDOW_DAYS) -> float:
    """Mean diameter over the window days strictly before t; day 0 uses itself."""
    if t < 0:
        raise SimError("day index must be nonnegative")
    diam = diameter_from_volume(np.asarray(y_history))
    if t == 0:
        return float(diam[0])
    lo = max(0, t - window)
    return float(np.mean(diam[lo:t]))


def intensity_unrelated(x_static: np.ndarray, coeffs: np.ndarray, gamma: float) -> float:
    return float(sigmoid(gamma * float(np.dot(x_static, coeffs))))


def apply_scarcity(lam: float, s: float) -> float:
    if s < 1:
        raise SimError("scarcity divisor must be >= 1")
    return lam / s


def intensity_path(
    y_factual: np.ndarray,
    spec: IntensitySpec,
    x_static: np.ndarray | None = None,
    coeffs: np.ndarray | None = None,
) -> np.ndarray:
    """Per-day intensity (after scarcity scaling) for one patient."""
    t_days = len(y_factual)
    if spec.mode == MODE_REGULAR:
        return np.ones(t_days)
    if spec.mode == MODE_SCAR:
        lam = np.full(t_days, 0.5)
    elif spec.mode == MODE_SAR_OUTCOME:
        lam = np.array(
            [
                intensity_outcome(
                    min(rolling_diameter(y_factual, t, spec.window), spec.d_max),
                    spec.gamma,
                    spec.d_max,
                )
                for t in range(t_days)
            ]
        )
    elif spec.mode == MODE_SAR_UNRELATED:
        if x_static is None or coeffs is None:
            raise SimError("sar_unrelated mode needs static covariates and coefficients")
        lam = np.full(t_days, intensity_unrelated(x_static, coeffs, spec.gamma))
    else:  # pragma: no cover - guarded by IntensitySpec
        raise SimError(f"unknown sampling mode {spec.mode!r}")
    return lam / spec.scarcity


def realize_observations(
    traj: PatientTrajectory,
    spec: IntensitySpec,
    rng: np.random.Generator,
    schedule: TreatmentSchedule,
    x_static: np.ndarray | None = None,
    coeffs: np.ndarray | None = None,
    force_daily: bool = False,
) -> list:
    """Draw dN(t) ~ Bernoulli(lambda(t)) per day off the factual trajectory.

    force_daily keeps the true intensity in the records but marks every
    day observed (used for test-split patients).
    """
    t_days = traj.T
    lam = intensity_path(traj.y_factual, spec, x_static=x_static, coeffs=coeffs)
    draws = rng.random(t_days)
    chemo = schedule.chemo_indicator(t_days)
    radio = schedule.radio_indicator(t_days)
    records = []
    for t in range(t_days):
        observed = 1 if (force_daily or spec.mode == MODE_REGULAR or draws[t] < lam[t]) else 0
        records.append(
            ObservationRecord(
                t=t,
                observed=observed,
                lambda_true=float(lam[t]),
                treatment_chemo=int(chemo[t]),
                treatment_radio=int(radio[t]),
                y_observed=float(traj.y_factual[t]) if observed else None,
                x_static=x_static,
            )
        )
    return records
