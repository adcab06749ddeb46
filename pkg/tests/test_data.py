import numpy as np
import pytest

from koopmhe.data import (
    InputPolicy,
    Scaler,
    TrajectoryDataset,
    dataset_from_trajectory,
    fit_scaler,
    generate_dataset,
    load_scaler,
    read_dataset_csv,
    save_scaler,
    write_dataset_csv,
)
from koopmhe.errors import ConfigError, NumericalError
from koopmhe.process import U_MAX, U_MIN, DisturbanceConfig, ProcessParams, Trajectory

P = ProcessParams()
DIST = DisturbanceConfig(sigma=np.full(9, 1e-3), bound=np.full(9, 5e-3))


def small_dataset(n_windows=50, H=20, seed=3):
    return generate_dataset(n_windows, H, DIST, P, seed=seed)


def test_window_counts():
    ds = small_dataset(n_windows=50, H=20)
    assert ds.n_samples == 70
    assert ds.n_windows == 50
    X, U = ds.windows()
    assert X.shape == (50, 21, 9)
    assert U.shape == (50, 20, 3)


def test_single_window_single_pair():
    ds = generate_dataset(1, 1, DIST, P, seed=5)
    X, U = ds.windows()
    assert X.shape == (1, 2, 9)
    assert U.shape == (1, 1, 3)


def test_split_is_80_20():
    ds = small_dataset(n_windows=100)
    assert len(ds.train_idx) == 80
    assert len(ds.val_idx) == 20
    assert set(ds.train_idx) | set(ds.val_idx) == set(range(100))
    assert set(ds.train_idx) & set(ds.val_idx) == set()


def test_inputs_respect_bounds():
    ds = small_dataset(n_windows=200)
    assert np.all(ds.inputs >= U_MIN) and np.all(ds.inputs <= U_MAX)
    assert np.all(ds.inputs[:, 0] >= 2.8e6) and np.all(ds.inputs[:, 0] <= 3.2e6)


def test_input_policy_dwell_structure():
    policy = InputPolicy(dwell=10, jitter_std=0.0)
    u = policy.sample(np.random.default_rng(0), 35)
    assert u.shape == (35, 3)
    for block in range(3):
        seg = u[block * 10: (block + 1) * 10]
        assert np.all(seg == seg[0])


def test_generate_dataset_determinism():
    a = small_dataset(seed=9)
    b = small_dataset(seed=9)
    assert np.array_equal(a.states, b.states)
    assert np.array_equal(a.inputs, b.inputs)
    assert np.array_equal(a.train_idx, b.train_idx)


def test_generate_dataset_validates():
    with pytest.raises(ConfigError):
        generate_dataset(0, 20, DIST, P, seed=1)


def test_scaler_round_trip_and_train_mean():
    ds = small_dataset()
    scaler = fit_scaler(ds)
    X, U = ds.train_windows()
    xs = scaler.scale_x(X.reshape(-1, 9))
    assert np.abs(xs.mean(axis=0)).max() < 1e-10
    assert np.abs(xs.std(axis=0) - 1.0).max() < 1e-10
    back = scaler.unscale_x(xs)
    np.testing.assert_allclose(back, X.reshape(-1, 9), rtol=1e-12, atol=1e-12)
    us = scaler.scale_u(U.reshape(-1, 3))
    np.testing.assert_allclose(scaler.unscale_u(us), U.reshape(-1, 3),
                               rtol=1e-12)


def test_scaler_rejects_constant_column():
    states = np.tile(np.linspace(1.0, 2.0, 30)[:, None], (1, 9))
    states[:, 4] = 0.5  # constant column
    inputs = np.random.default_rng(0).uniform(1.0, 2.0, (29, 3))
    ds = dataset_from_trajectory(Trajectory(states, inputs, 0.001), H=5)
    with pytest.raises(NumericalError):
        fit_scaler(ds)


def test_scaler_file_round_trip(tmp_path):
    ds = small_dataset()
    scaler = fit_scaler(ds)
    path = tmp_path / "scaler.txt"
    save_scaler(scaler, path)
    loaded = load_scaler(path)
    for name in ("x_mean", "x_std", "u_mean", "u_std"):
        assert np.array_equal(getattr(scaler, name), getattr(loaded, name))


def test_dataset_csv_round_trip(tmp_path):
    ds = small_dataset()
    path = tmp_path / "data.csv"
    write_dataset_csv(path, ds.states, ds.inputs, config_hash="abc123")
    states, inputs = read_dataset_csv(path)
    assert np.array_equal(states, ds.states)
    assert np.array_equal(inputs, ds.inputs)
    lines = path.read_text().splitlines()
    assert lines[0] == "# config_hash=abc123"
    assert len(lines) == ds.n_samples + 2  # hash comment + column header


def test_dataset_csv_rejects_garbage(tmp_path):
    path = tmp_path / "bad.csv"
    path.write_text("k,nope\n1,2\n")
    with pytest.raises(ConfigError):
        read_dataset_csv(path)
