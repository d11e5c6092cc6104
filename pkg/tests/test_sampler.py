"""Sampler tests: frozen sigmoid values, rolling-diameter boundary rules,
scarcity scaling, Bernoulli realization statistics."""
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from treatcast import sampler as sp
from treatcast import simkit as sk


def test_intensity_outcome_frozen_sigma2():
    # diam 13, gamma 4 puts sigmoid at exactly 2
    assert abs(sp.intensity_outcome(13.0, 4.0) - 0.880797) < 1e-6
    assert abs(sp.intensity_outcome(13.0, 4.0) - 0.8807970779778823) < 1e-12


def test_intensity_outcome_gamma_zero_is_half():
    for diam in (0.0, 3.3, 13.0):
        assert sp.intensity_outcome(diam, 0.0) == 0.5


def test_intensity_outcome_midpoint_is_half():
    assert sp.intensity_outcome(6.5, 17.0) == 0.5


def test_intensity_outcome_domain_checked():
    with pytest.raises(sk.SimError, match="diameter"):
        sp.intensity_outcome(13.5, 1.0)
    with pytest.raises(sk.SimError, match="diameter"):
        sp.intensity_outcome(-0.1, 1.0)


@settings(max_examples=40, deadline=None)
@given(st.floats(0.0, 13.0), st.sampled_from([0.0, 1.0, 2.0, 4.0, 8.0]))
def test_intensity_strictly_inside_unit_interval(diam, gamma):
    lam = sp.intensity_outcome(diam, gamma)
    assert 0.0 < lam < 1.0


def test_intensity_monotone_in_gamma():
    grid = [0.0, 1.0, 2.0, 4.0, 8.0]
    big = [sp.intensity_outcome(10.0, g) for g in grid]
    small = [sp.intensity_outcome(2.0, g) for g in grid]
    assert all(b2 > b1 for b1, b2 in zip(big, big[1:]))
    assert all(s2 < s1 for s1, s2 in zip(small, small[1:]))


def test_rolling_diameter_constant_history():
    y = np.full(40, float(sk.volume_from_diameter(5.0)))
    assert abs(sp.rolling_diameter(y, 20) - 5.0) < 1e-9


def test_rolling_diameter_at_vol_max_is_13():
    y = np.full(40, 1150.347)
    assert abs(sp.rolling_diameter(y, 30) - 13.0) < 1e-4


def test_rolling_diameter_short_prefix():
    y = np.array([float(sk.volume_from_diameter(d)) for d in (2.0, 4.0, 6.0)])
    assert abs(sp.rolling_diameter(y, 2) - 3.0) < 1e-9


def test_rolling_diameter_day_zero_uses_itself():
    y = np.array([float(sk.volume_from_diameter(3.0)), 999.0])
    assert abs(sp.rolling_diameter(y, 0) - 3.0) < 1e-9


def test_rolling_diameter_excludes_day_t():
    base = np.full(30, float(sk.volume_from_diameter(4.0)))
    spiked = base.copy()
    spiked[20] = float(sk.volume_from_diameter(12.0))
    assert sp.rolling_diameter(spiked, 20) == sp.rolling_diameter(base, 20)


def test_rolling_diameter_window_span():
    # days 0..14 diameter 2, day 15 onward diameter 8; at t=31 only the
    # last 15 days (16..30) matter
    y = np.concatenate(
        [
            np.full(15, float(sk.volume_from_diameter(2.0))),
            np.full(25, float(sk.volume_from_diameter(8.0))),
        ]
    )
    assert abs(sp.rolling_diameter(y, 31) - 8.0) < 1e-9


def test_intensity_unrelated_frozen_values():
    x = np.zeros(10)
    assert sp.intensity_unrelated(x, np.ones(10), 3.0) == 0.5
    x1 = np.ones(10) / 10.0
    assert abs(sp.intensity_unrelated(x1, np.ones(10), 1.0) - 0.731059) < 1e-6
    assert sp.intensity_unrelated(np.ones(10), np.ones(10), 0.0) == 0.5


def test_apply_scarcity():
    assert sp.apply_scarcity(0.5, 2.0) == 0.25
    assert sp.apply_scarcity(0.7, 1.0) == 0.7
    assert abs(sp.apply_scarcity(0.880797, 4.0) - 0.220199) < 1e-6
    with pytest.raises(sk.SimError, match=">= 1"):
        sp.apply_scarcity(0.5, 0.5)


def test_intensity_spec_validation():
    with pytest.raises(sk.SimError, match="mode"):
        sp.IntensitySpec(mode="bogus")
    with pytest.raises(sk.SimError, match="gamma"):
        sp.IntensitySpec(gamma=-1.0)
    with pytest.raises(sk.SimError, match="scarcity"):
        sp.IntensitySpec(scarcity=0.0)


def _trajectory(seed):
    params = sk.sample_patient_params(seed)
    sched = sk.build_schedule(params.arm, 120)
    return sk.simulate_trajectory(params, sched, 120), sched


def test_scar_equals_sar_outcome_at_gamma_zero():
    traj, _ = _trajectory(0)
    lam_scar = sp.intensity_path(traj.y_factual, sp.IntensitySpec(mode="scar"))
    lam_sar = sp.intensity_path(traj.y_factual, sp.IntensitySpec(mode="sar_outcome", gamma=0.0))
    assert np.array_equal(lam_scar, lam_sar)


def test_regular_mode_observes_every_day():
    traj, sched = _trajectory(1)
    rng = np.random.default_rng(0)
    recs = sp.realize_observations(traj, sp.IntensitySpec(mode="regular"), rng, sched)
    assert len(recs) == 120
    assert all(r.observed == 1 for r in recs)


def test_treatments_always_recorded_and_y_only_when_observed():
    traj, sched = _trajectory(2)
    spec = sp.IntensitySpec(mode="sar_outcome", gamma=8.0)
    recs = sp.realize_observations(traj, spec, np.random.default_rng(3), sched)
    chemo = sched.chemo_indicator(120)
    radio = sched.radio_indicator(120)
    for r in recs:
        assert r.treatment_chemo == chemo[r.t]
        assert r.treatment_radio == radio[r.t]
        if r.observed:
            assert r.y_observed == traj.y_factual[r.t]
        else:
            assert r.y_observed is None


def test_force_daily_keeps_true_intensity():
    traj, sched = _trajectory(4)
    spec = sp.IntensitySpec(mode="sar_outcome", gamma=4.0)
    recs = sp.realize_observations(traj, spec, np.random.default_rng(5), sched, force_daily=True)
    lam = sp.intensity_path(traj.y_factual, spec)
    assert all(r.observed == 1 for r in recs)
    assert np.allclose([r.lambda_true for r in recs], lam)


def test_scar_expected_observation_count():
    # gamma=0, S=1: each patient's count is Binomial(120, 0.5); the mean
    # over 200 patients stays within 3 sigma of 60
    rng = np.random.default_rng(99)
    spec = sp.IntensitySpec(mode="sar_outcome", gamma=0.0)
    counts = []
    for seed in range(200):
        traj, sched = _trajectory(seed)
        recs = sp.realize_observations(traj, spec, rng, sched)
        counts.append(sum(r.observed for r in recs))
    three_sigma = 3.0 * np.sqrt(120 * 0.25 / 200)
    assert abs(np.mean(counts) - 60.0) < three_sigma


def test_scarcity_halves_observation_rate():
    rng = np.random.default_rng(7)
    spec1 = sp.IntensitySpec(mode="scar", scarcity=1.0)
    spec2 = sp.IntensitySpec(mode="scar", scarcity=2.0)
    traj, sched = _trajectory(5)
    n1 = sum(
        sum(r.observed for r in sp.realize_observations(traj, spec1, rng, sched))
        for _ in range(50)
    )
    n2 = sum(
        sum(r.observed for r in sp.realize_observations(traj, spec2, rng, sched))
        for _ in range(50)
    )
    # expected 3000 vs 1500 observations; allow generous slack
    assert n2 < 0.65 * n1


def test_bernoulli_concentration():
    lam = 0.3
    draws = np.random.default_rng(11).random(10_000) < lam
    se = np.sqrt(lam * (1 - lam) / 10_000)
    assert abs(draws.mean() - lam) < 3 * se


def test_high_gamma_spreads_intensities():
    spec2 = sp.IntensitySpec(mode="sar_outcome", gamma=2.0)
    spec8 = sp.IntensitySpec(mode="sar_outcome", gamma=8.0)
    lams2, lams8 = [], []
    for seed in range(50):
        traj, _ = _trajectory(seed)
        lams2.append(sp.intensity_path(traj.y_factual, spec2))
        lams8.append(sp.intensity_path(traj.y_factual, spec8))
    assert np.std(np.concatenate(lams8)) > np.std(np.concatenate(lams2))


def test_unrelated_mode_requires_covariates():
    traj, _ = _trajectory(6)
    with pytest.raises(sk.SimError, match="static"):
        sp.intensity_path(traj.y_factual, sp.IntensitySpec(mode="sar_unrelated", gamma=1.0))


def test_unrelated_mode_constant_over_time():
    traj, _ = _trajectory(6)
    rng = np.random.default_rng(13)
    x = rng.normal(size=10)
    c = rng.uniform(-1, 1, size=10)
    lam = sp.intensity_path(
        traj.y_factual, sp.IntensitySpec(mode="sar_unrelated", gamma=2.0), x_static=x, coeffs=c
    )
    assert np.all(lam == lam[0])
    assert abs(lam[0] - sp.sigmoid(2.0 * float(x @ c))) < 1e-15
