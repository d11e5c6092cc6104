"""Dataset tests: split policy, window extraction rules, file round trips."""
import csv
import json

import numpy as np
import pytest

from treatcast import datastore as ds
from treatcast import simkit as sk


@pytest.fixture(scope="module")
def small_dataset():
    cfg = ds.DatasetConfig(n_train=6, n_val=2, n_test=3, gamma=4.0, seed=5)
    return ds.generate_dataset(cfg)


def test_default_config_sizes():
    data = ds.generate_dataset(ds.DatasetConfig(seed=1))
    assert len(data.patients) == 450
    assert len(data.split("train")) == 200
    assert len(data.split("val")) == 50
    assert len(data.split("test")) == 200
    assert data.config.t_days == 120
    assert data.vol_scale == sk.VOL_MAX
    assert data.time_scale == 120.0


def test_invalid_sizes_rejected():
    with pytest.raises(ds.DataError, match="split sizes"):
        ds.DatasetConfig(n_train=-1)
    with pytest.raises(ds.DataError, match="split sizes"):
        ds.DatasetConfig(n_train=0, n_val=0, n_test=0)
    with pytest.raises(ds.DataError, match="70"):
        ds.DatasetConfig(t_days=60)


def test_split_disjoint_and_deterministic(small_dataset):
    ids = [p.patient_id for p in small_dataset.patients]
    assert len(set(ids)) == len(ids)
    again = ds.generate_dataset(small_dataset.config)
    assert ds.datasets_equal(small_dataset, again)


def test_same_seed_shares_trajectories_across_gamma():
    a = ds.generate_dataset(ds.DatasetConfig(n_train=3, n_val=1, n_test=1, gamma=0.0, seed=9))
    b = ds.generate_dataset(ds.DatasetConfig(n_train=3, n_val=1, n_test=1, gamma=8.0, seed=9))
    for pa, pb in zip(a.patients, b.patients):
        assert np.array_equal(pa.traj.y_factual, pb.traj.y_factual)
    # intensities differ once gamma does
    assert not np.allclose(a.patients[0].lambda_true, b.patients[0].lambda_true)


def test_test_split_observed_daily_with_true_intensity(small_dataset):
    for p in small_dataset.split("test"):
        assert p.observed.sum() == 120
        assert np.all((p.lambda_true > 0) & (p.lambda_true < 1))


def test_train_expected_observations_at_gamma_zero():
    cfg = ds.DatasetConfig(n_train=200, n_val=0, n_test=0, gamma=0.0, seed=3)
    data = ds.generate_dataset(cfg)
    counts = [p.observed.sum() for p in data.split("train")]
    three_sigma = 3.0 * np.sqrt(120 * 0.25 / 200)
    assert abs(np.mean(counts) - 60.0) < three_sigma


def test_windows_count_on_dense_patient(small_dataset):
    p = small_dataset.split("test")[0]
    wins = [w for w in ds.windows(small_dataset, "test") if w.patient_id == p.patient_id]
    assert len(wins) == 109
    assert wins[0].origin == 7
    assert wins[-1].origin == 115


def test_windows_drop_empty_lookback(small_dataset):
    import copy

    data = copy.deepcopy(small_dataset)
    p = data.split("train")[0]
    p.observed[:] = 1
    p.observed[20:40] = 0
    expected_dropped = {
        t for t in range(7, 116) if p.observed[t - 7 : t + 1].sum() == 0
    }
    assert expected_dropped  # the edit really creates empty lookbacks
    origins = {w.origin for w in ds.windows(data, "train") if w.patient_id == p.patient_id}
    assert origins == set(range(7, 116)) - expected_dropped


def test_window_fields_train(small_dataset):
    w = next(iter(ds.windows(small_dataset, "train")))
    assert set(w.plans) == {w.arm}
    assert set(w.targets) == {w.arm}
    assert w.obs_times.min() >= w.origin - 7
    assert w.obs_times.max() <= w.origin
    assert w.treat_chemo.shape == (8,)
    assert w.dn.shape == (5,)
    # dn marks exactly the observed horizon days
    p = {p.patient_id: p for p in small_dataset.patients}[w.patient_id]
    for tau in range(1, 6):
        day = w.origin + tau
        want = int(p.observed[day]) if day < 120 else 0
        assert w.dn[tau - 1] == want


def test_window_grid_mask_at_tail(small_dataset):
    tail = [w for w in ds.windows(small_dataset, "test") if w.origin == 115][0]
    # day 120 does not exist; only taus 1..4 are on the grid
    assert list(tail.grid_mask) == [1, 1, 1, 1, 0]
    assert np.isnan(tail.targets[tail.arm][4])
    assert np.isnan(tail.lambda_true[4])


def test_window_targets_test_split_both_arms(small_dataset):
    w = next(iter(ds.windows(small_dataset, "test")))
    assert set(w.targets) == set(sk.ARMS)
    p = {p.patient_id: p for p in small_dataset.patients}[w.patient_id]
    t = w.origin
    assert w.targets[p.arm][0] == p.traj.y_factual[t + 1]
    other = sk.opposite_arm(p.arm)
    assert w.targets[other][0] == p.traj.y_counterfactual[t + 1]


def test_window_plan_matches_schedule(small_dataset):
    w = [w for w in ds.windows(small_dataset, "test") if w.origin == 33][0]
    seq_chemo, seq_radio = w.plans[sk.ARM_SEQUENTIAL]
    # sequential radio lands on day 35 = origin + 2
    assert seq_radio[2] == 1
    assert seq_chemo.sum() == 0
    conc_chemo, conc_radio = w.plans[sk.ARM_CONCURRENT]
    assert np.array_equal(conc_chemo, conc_radio)


def test_windows_pure(small_dataset):
    a = list(ds.windows(small_dataset, "val"))
    b = list(ds.windows(small_dataset, "val"))
    assert len(a) == len(b)
    for wa, wb in zip(a, b):
        assert wa.patient_id == wb.patient_id and wa.origin == wb.origin
        assert np.array_equal(wa.obs_y, wb.obs_y)
        assert np.array_equal(wa.dn, wb.dn)


def test_save_load_round_trip(tmp_path, small_dataset):
    ds.save(small_dataset, tmp_path / "d")
    loaded = ds.load(tmp_path / "d")
    assert ds.datasets_equal(small_dataset, loaded)


def test_save_load_round_trip_unrelated(tmp_path):
    cfg = ds.DatasetConfig(n_train=3, n_val=1, n_test=2, mode="sar_unrelated", gamma=2.0, seed=8)
    data = ds.generate_dataset(cfg)
    assert data.coeffs is not None and len(data.coeffs) == 10
    assert data.patients[0].x_static is not None
    ds.save(data, tmp_path / "d")
    loaded = ds.load(tmp_path / "d")
    assert ds.datasets_equal(data, loaded)


def test_missing_sidecar_rejected(tmp_path, small_dataset):
    ds.save(small_dataset, tmp_path / "d")
    (tmp_path / "d" / "meta.json").unlink()
    with pytest.raises(ds.DataError, match="sidecar"):
        ds.load(tmp_path / "d")


def test_malformed_row_reports_line(tmp_path, small_dataset):
    ds.save(small_dataset, tmp_path / "d")
    obs = tmp_path / "d" / "observations.csv"
    lines = obs.read_text().splitlines()
    lines[3] = lines[3].rsplit(",", 1)[0]  # drop one field on data line 3
    obs.write_text("\n".join(lines) + "\n")
    with pytest.raises(ds.DataError, match="line 4"):
        ds.load(tmp_path / "d")


def test_hand_built_two_patient_file(tmp_path):
    root = tmp_path / "d"
    root.mkdir()
    t_days = 70
    cfg = dict(
        t_days=t_days, n_train=1, n_val=0, n_test=1, mode="sar_outcome",
        gamma=0.0, scarcity=1.0, n_static=10, lookback=7, horizon=5, seed=0,
    )
    (root / "meta.json").write_text(
        json.dumps(
            {
                "schema_version": 1,
                "config": cfg,
                "vol_scale": sk.VOL_MAX,
                "time_scale": float(t_days),
                "coeffs": None,
                "n_patients": 2,
            }
        )
    )
    with open(root / "patients.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["patient_id", "split", "arm", "group", "seed",
                    "rho", "K", "beta_c", "alpha_r", "beta_r"])
        w.writerow([0, "train", "sequential", 1, 0, "7e-05", repr(sk.K_VOLUME), "0.028", "0.04", "0.004"])
        w.writerow([1, "test", "concurrent", 2, 1, "7e-05", repr(sk.K_VOLUME), "0.028", "0.04", "0.004"])
    with open(root / "truth.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["patient_id", "t", "y_factual", "y_counterfactual", "noise"])
        for pid in (0, 1):
            for t in range(t_days):
                w.writerow([pid, t, "5.0", "4.0", "0.0"])
    with open(root / "observations.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["patient_id", "split", "arm", "t", "observed", "y_observed",
                    "chemo", "radio", "lambda_true"] + [f"x_static_{j}" for j in range(10)])
        for pid, split, arm in ((0, "train", "sequential"), (1, "test", "concurrent")):
            for t in range(t_days):
                observed = 1 if (pid == 1 or t % 2 == 0) else 0
                w.writerow([pid, split, arm, t, observed, "5.0" if observed else "",
                            0, 0, "0.5"] + ["0"] * 10)
    loaded = ds.load(root)
    assert len(loaded.patients) == 2
    assert loaded.split("train")[0].observed.sum() == 35
    assert loaded.split("test")[0].observed.sum() == t_days
    assert loaded.patients[0].traj.y_factual.shape == (t_days,)
    assert loaded.patients[0].traj.y_factual[10] == 5.0
    assert loaded.patients[1].arm == "concurrent"
