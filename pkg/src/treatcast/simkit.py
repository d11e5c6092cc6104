"""Tumor-growth simulator with chemo/radio response and patient heterogeneity.

Units: volumes in cm^3, diameters in cm, radiotherapy doses in Gy, chemo
concentration in arbitrary concentration units, time in days.

Daily update, applied as a multiplicative one-day step:

    Y(t+1) = (1 + rho*log(K/Y(t)) - beta_c*C(t) - (alpha_r*d(t) + beta_r*d(t)^2) + eps(t)) * Y(t)

Chemo concentration decays with a one-day half-life and a fixed dose is
added on administration days: C(t) = 0.5*C(t-1) + 5.0*[chemo day t].
Radiotherapy delivers d(t) = 2.0 Gy on its administration days.

Volumes are clamped to [VOL_MIN, VOL_MAX] where VOL_MAX is the volume at
a 13 cm diameter; the carrying capacity K is the volume of a 30 cm
diameter sphere. Patient groups tilt treatment sensitivity: group 1 gets
a 10% larger mean radio sensitivity, group 3 a 10% larger mean chemo
sensitivity.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

__all__ = [
    "SimError",
    "ARM_SEQUENTIAL",
    "ARM_CONCURRENT",
    "ARMS",
    "T_DAYS",
    "CHEMO_DOSE",
    "RADIO_DOSE",
    "CHEMO_CARRY",
    "VOL_MIN",
    "VOL_MAX",
    "K_VOLUME",
    "volume_from_diameter",
    "diameter_from_volume",
    "PatientParams",
    "TreatmentSchedule",
    "PatientTrajectory",
    "sample_patient_params",
    "build_schedule",
    "opposite_arm",
    "chemo_concentration",
    "radio_doses",
    "step_tumor",
    "simulate_trajectory",
]


class SimError(ValueError):
    """Domain or configuration error in the simulator."""


ARM_SEQUENTIAL = "sequential"
ARM_CONCURRENT = "concurrent"
ARMS = (ARM_SEQUENTIAL, ARM_CONCURRENT)

T_DAYS = 120
CHEMO_DOSE = 5.0
RADIO_DOSE = 2.0
CHEMO_CARRY = 0.5  # concentration fraction surviving one day (half-life 1 day)
VOL_MIN = 0.01

RHO_MEAN, RHO_STD = 7.00e-5, 7.23e-3
BETA_C_MEAN, BETA_C_STD = 0.028, 0.0007
ALPHA_R_MEAN, ALPHA_R_STD = 0.0398, 0.168
GROUP_SENSITIVITY_BOOST = 1.1
NOISE_STD = 0.01
INIT_DIAM_RANGE = (1.0, 4.0)


def volume_from_diameter(diam_cm: float):
    return (4.0 / 3.0) * np.pi * (np.asarray(diam_cm) / 2.0) ** 3


def diameter_from_volume(vol_cm3: float):
    return 2.0 * (3.0 * np.asarray(vol_cm3) / (4.0 * np.pi)) ** (1.0 / 3.0)


K_VOLUME = float(volume_from_diameter(30.0))
VOL_MAX = float(volume_from_diameter(13.0))


@dataclass(frozen=True)
class PatientParams:
    rho: float          # growth rate, 1/day
    K: float            # carrying capacity, cm^3
    beta_c: float       # chemo sensitivity, 1/(day*concentration)
    alpha_r: float      # radio linear coefficient, 1/(day*Gy)
    beta_r: float       # radio quadratic coefficient, 1/(day*Gy^2)
    group: int
    arm: str
    seed: int

    def __post_init__(self):
        if self.K <= 0:
            raise SimError("carrying capacity must be positive")
        if self.group not in (1, 2, 3):
            raise SimError("group must be 1, 2 or 3")
        if self.arm not in ARMS:
            raise SimError(f"unknown arm {self.arm!r}")
        if abs(self.beta_r - self.alpha_r / 10.0) > 1e-12 * max(1.0, abs(self.alpha_r)):
            raise SimError("beta_r must equal alpha_r / 10")


@dataclass(frozen=True)
class TreatmentSchedule:
    chemo_days: frozenset
    radio_days: frozenset
    chemo_dose: float = CHEMO_DOSE
    radio_dose: float = RADIO_DOSE

    def chemo_indicator(self, t_days: int) -> np.ndarray:
        ind = np.zeros(t_days, dtype=np.int8)
        ind[sorted(d for d in self.chemo_days if d < t_days)] = 1
        return ind

    def radio_indicator(self, t_days: int) -> np.ndarray:
        ind = np.zeros(t_days, dtype=np.int8)
        ind[sorted(d for d in self.radio_days if d < t_days)] = 1
        return ind


@dataclass(frozen=True)
class PatientTrajectory:
    patient_id: int
    params: PatientParams
    y_factual: np.ndarray         # (T,) cm^3, day 0..T-1
    y_counterfactual: np.ndarray  # (T,) cm^3 under the other arm, same noise
    noise: np.ndarray             # (T,) eps draws; noise[t] drives the t -> t+1 step
    T: int


def _positive_normal(rng: np.random.Generator, mean: float, std: float) -> float:
    # resample until positive; negative sensitivity would invert treatment effects
    while True:
        x = rng.normal(mean, std)
        if x > 0:
            return x


def sample_patient_params(rng_seed: int) -> PatientParams:
    rng = np.random.default_rng(np.random.SeedSequence(entropy=rng_seed, spawn_key=(0,)))
    group = int(rng.integers(1, 4))
    arm = ARM_SEQUENTIAL if rng.random() < 0.5 else ARM_CONCURRENT
    rho = float(rng.normal(RHO_MEAN, RHO_STD))
    beta_c_mean = BETA_C_MEAN * (GROUP_SENSITIVITY_BOOST if group == 3 else 1.0)
    alpha_r_mean = ALPHA_R_MEAN * (GROUP_SENSITIVITY_BOOST if group == 1 else 1.0)
    beta_c = _positive_normal(rng, beta_c_mean, BETA_C_STD)
    alpha_r = _positive_normal(rng, alpha_r_mean, ALPHA_R_STD)
    return PatientParams(
        rho=rho,
        K=K_VOLUME,
        beta_c=beta_c,
        alpha_r=alpha_r,
        beta_r=alpha_r / 10.0,
        group=group,
        arm=arm,
        seed=int(rng_seed),
    )


def build_schedule(arm: str, t_days: int) -> TreatmentSchedule:
    if t_days < 70:
        raise SimError(f"horizon {t_days} too short for the treatment plans (need >= 70 days)")
    if arm == ARM_SEQUENTIAL:
        chemo = frozenset(range(0, 35, 7))
        radio = frozenset(range(35, 70, 7))
    elif arm == ARM_CONCURRENT:
        days = frozenset(d for d in range(0, 140, 14) if d < t_days)
        chemo = radio = days
    else:
        raise SimError(f"unknown arm {arm!r}")
    return TreatmentSchedule(chemo_days=chemo, radio_days=radio)


def opposite_arm(arm: str) -> str:
    if arm not in ARMS:
        raise SimError(f"unknown arm {arm!r}")
    return ARM_CONCURRENT if arm == ARM_SEQUENTIAL else ARM_SEQUENTIAL


def chemo_concentration(schedule: TreatmentSchedule, t_days: int) -> np.ndarray:
    """Concentration present on each day, including that day's dose."""
    conc = np.zeros(t_days)
    level = 0.0
    for t in range(t_days):
        level = CHEMO_CARRY * level + (schedule.chemo_dose if t in schedule.chemo_days else 0.0)
        conc[t] = level
    return conc


def radio_doses(schedule: TreatmentSchedule, t_days: int) -> np.ndarray:
    dose = np.zeros(t_days)
    for t in schedule.radio_days:
        if 0 <= t < t_days:
            dose[t] = schedule.radio_dose
    return dose


def step_tumor(y: float, params: PatientParams, chemo_conc: float, radio_dose: float, eps: float) -> float:
    if y <= 0:
        raise SimError("tumor volume must be positive")
    factor = (
        1.0
        + params.rho * math.log(params.K / y)
        - params.beta_c * chemo_conc
        - (params.alpha_r * radio_dose + params.beta_r * radio_dose * radio_dose)
        + eps
    )
    return min(max(factor * y, VOL_MIN), VOL_MAX)


def _roll(y0: float, params: PatientParams, schedule: TreatmentSchedule, noise: np.ndarray, t_days: int) -> np.ndarray:
    conc = chemo_concentration(schedule, t_days)
    dose = radio_doses(schedule, t_days)
    y = np.empty(t_days)
    y[0] = min(max(y0, VOL_MIN), VOL_MAX)
    for t in range(t_days - 1):
        y[t + 1] = step_tumor(y[t], params, conc[t], dose[t], noise[t])
    return y


def simulate_trajectory(
    params: PatientParams,
    schedule: TreatmentSchedule,
    t_days: int = T_DAYS,
    patient_id: int = 0,
) -> PatientTrajectory:
    """Roll the factual arm's trajectory plus the other arm's under shared noise.

    The initial volume (diameter uniform in INIT_DIAM_RANGE) and the daily
    eps draws come from a stream derived from params.seed, so a given
    patient is fully determined by their parameter record. The passed
    schedule must belong to params.arm; the counterfactual arm's schedule
    is built internally.
    """
    rng = np.random.default_rng(np.random.SeedSequence(entropy=params.seed, spawn_key=(1,)))
    y0 = float(volume_from_diameter(rng.uniform(*INIT_DIAM_RANGE)))
    noise = rng.normal(0.0, NOISE_STD, size=t_days)
    y_f = _roll(y0, params, schedule, noise, t_days)
    sched_cf = build_schedule(opposite_arm(params.arm), t_days)
    y_cf = _roll(y0, params, sched_cf, noise, t_days)
    return PatientTrajectory(
        patient_id=patient_id,
        params=params,
        y_factual=y_f,
        y_counterfactual=y_cf,
        noise=noise,
        T=t_days,
    )
