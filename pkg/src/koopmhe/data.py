"""Trajectory datasets, input excitation, scaling, and CSV formats."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, NumericalError
from .process import (
    U_MAX,
    U_MIN,
    X_STEADY,
    DisturbanceConfig,
    ProcessParams,
    Trajectory,
    sample_truncated_gaussian,
    simulate,
)
from .rng import substream

DATASET_HEADER = "k,xA1,xB1,T1,xA2,xB2,T2,xA3,xB3,T3,Q1,Q2,Q3"


@dataclass
class InputPolicy:
    """Piecewise-constant random heating levels with bounded jitter.

    Levels are drawn uniformly in [u_min, u_max] and held for ``dwell``
    steps. Jitter is a truncated Gaussian expressed in units of the input
    half-range, added per step and clipped back into the box.
    """

    u_min: np.ndarray = field(default_factory=lambda: U_MIN.copy())
    u_max: np.ndarray = field(default_factory=lambda: U_MAX.copy())
    dwell: int = 20
    jitter_std: float = float(np.sqrt(0.1))
    jitter_bound: float = 1.0

    def __post_init__(self):
        self.u_min = np.asarray(self.u_min, dtype=np.float64)
        self.u_max = np.asarray(self.u_max, dtype=np.float64)
        if self.u_min.shape != self.u_max.shape:
            raise ConfigError("u_min and u_max shapes differ")
        if np.any(self.u_min > self.u_max):
            raise ConfigError("u_min exceeds u_max")
        if self.dwell < 1:
            raise ConfigError("dwell must be at least 1 step")

    def sample(self, rng: np.random.Generator, n_steps: int) -> np.ndarray:
        nu = self.u_min.shape[0]
        n_levels = -(-n_steps // self.dwell)
        levels = rng.uniform(self.u_min, self.u_max, size=(n_levels, nu))
        u = np.repeat(levels, self.dwell, axis=0)[:n_steps]
        if self.jitter_std > 0.0:
            half = 0.5 * (self.u_max - self.u_min)
            eps = sample_truncated_gaussian(
                rng, self.jitter_std, self.jitter_bound, (n_steps, nu)
            )
            u = u + eps * half
        return np.clip(u, self.u_min, self.u_max)


@dataclass
class TrajectoryDataset:
    """Sampled run plus the window bookkeeping used for training.

    Windows are overlapping slices of H+1 states and H inputs. The
    train/validation split is a seeded 80/20 permutation of window start
    indices, fixed at construction.
    """

    states: np.ndarray       # (n_samples, n_x)
    inputs: np.ndarray       # (n_samples - 1, n_u)
    dt: float
    H: int
    train_idx: np.ndarray
    val_idx: np.ndarray

    @property
    def n_samples(self) -> int:
        return self.states.shape[0]

    @property
    def n_windows(self) -> int:
        return self.n_samples - self.H

    def windows(self, idx=None) -> tuple[np.ndarray, np.ndarray]:
        """Return (X, U) with X (N, H+1, n_x) and U (N, H, n_u)."""
        if idx is None:
            idx = np.arange(self.n_windows)
        idx = np.asarray(idx, dtype=np.intp)
        offs_x = np.arange(self.H + 1)
        offs_u = np.arange(self.H)
        return self.states[idx[:, None] + offs_x], self.inputs[idx[:, None] + offs_u]

    def train_windows(self):
        return self.windows(self.train_idx)

    def val_windows(self):
        return self.windows(self.val_idx)


def dataset_from_trajectory(traj: Trajectory, H: int, split_rng=None,
                            train_fraction: float = 0.8) -> TrajectoryDataset:
    n_windows = len(traj.states) - H
    if n_windows < 1:
        raise ConfigError("trajectory too short for the requested window length")
    if split_rng is None:
        perm = np.arange(n_windows)
    else:
        perm = split_rng.permutation(n_windows)
    n_train = int(round(train_fraction * n_windows))
    return TrajectoryDataset(
        states=traj.states,
        inputs=traj.inputs,
        dt=traj.dt,
        H=H,
        train_idx=np.sort(perm[:n_train]),
        val_idx=np.sort(perm[n_train:]),
    )


def generate_dataset(
    n_windows: int,
    H: int,
    dist: DisturbanceConfig,
    params: ProcessParams,
    seed: int,
    dt: float = 0.001,
    x0_low=None,
    x0_high=None,
    policy: InputPolicy | None = None,
    train_fraction: float = 0.8,
    settle: int = 0,
) -> TrajectoryDataset:
    """Simulate one open-loop run and slice it into training windows.

    The initial state is sampled uniformly in [x0_low, x0_high]
    (defaults: [x_s, 1.2 x_s]). With ``settle`` > 0 the first ``settle``
    samples are simulated but discarded, so the recorded run starts after
    the initial transient has mixed into the excitation-driven region.
    The kept run is n_windows + H samples long, giving exactly
    ``n_windows`` overlapping windows of length H+1.
    """
    if n_windows < 1 or H < 1:
        raise ConfigError("n_windows and H must be at least 1")
    if settle < 0:
        raise ConfigError("settle must be nonnegative")
    if x0_low is None:
        x0_low = X_STEADY
    if x0_high is None:
        x0_high = 1.2 * X_STEADY
    if policy is None:
        policy = InputPolicy()
    n_steps = settle + n_windows + H - 1
    x0 = substream(seed, "x0").uniform(np.asarray(x0_low), np.asarray(x0_high))
    u = policy.sample(substream(seed, "inputs"), n_steps)
    traj = simulate(x0, u, dt, params, dist, rng=substream(seed, "disturbance"))
    kept = Trajectory(traj.states[settle:], traj.inputs[settle:], dt)
    return dataset_from_trajectory(kept, H, substream(seed, "split"), train_fraction)


@dataclass
class Scaler:
    """Componentwise zero-mean unit-variance transform fitted on training data."""

    x_mean: np.ndarray
    x_std: np.ndarray
    u_mean: np.ndarray
    u_std: np.ndarray

    def scale_x(self, x):
        return (np.asarray(x, dtype=np.float64) - self.x_mean) / self.x_std

    def unscale_x(self, xs):
        return np.asarray(xs, dtype=np.float64) * self.x_std + self.x_mean

    def scale_u(self, u):
        return (np.asarray(u, dtype=np.float64) - self.u_mean) / self.u_std

    def unscale_u(self, us):
        return np.asarray(us, dtype=np.float64) * self.u_std + self.u_mean

    def scale_measurement(self, y, measured_indices):
        idx = list(measured_indices)
        return (np.asarray(y, dtype=np.float64) - self.x_mean[idx]) / self.x_std[idx]


def fit_scaler(dataset: TrajectoryDataset) -> Scaler:
    """Fit per-component mean/std on the training split only."""
    X, U = dataset.train_windows()
    if X.size == 0:
        raise ConfigError("dataset has no training windows")
    x_flat = X.reshape(-1, X.shape[-1])
    u_flat = U.reshape(-1, U.shape[-1])
    x_std = x_flat.std(axis=0)
    u_std = u_flat.std(axis=0)
    if np.any(x_std <= 0.0) or np.any(u_std <= 0.0):
        raise NumericalError("degenerate scaling: a data column has zero variance")
    return Scaler(x_flat.mean(axis=0), x_std, u_flat.mean(axis=0), u_std)


def save_scaler(scaler: Scaler, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for name in ("x_mean", "x_std", "u_mean", "u_std"):
            vec = getattr(scaler, name)
            fh.write(name + " = " + ",".join(f"{v:.17g}" for v in vec) + "\n")


def load_scaler(path) -> Scaler:
    vals = {}
    with open(path, encoding="utf-8") as fh:
        for raw in fh:
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            key, value = (s.strip() for s in line.split("=", 1))
            vals[key] = np.array([float(v) for v in value.split(",")])
    try:
        return Scaler(vals["x_mean"], vals["x_std"], vals["u_mean"], vals["u_std"])
    except KeyError as exc:
        raise ConfigError(f"scaler file {path} is missing {exc}") from exc


def _fmt(v: float) -> str:
    return f"{v:.17g}"


def write_dataset_csv(path, states: np.ndarray, inputs: np.ndarray,
                      config_hash: str = "") -> None:
    """Write one row per sample instant; the final row has no input (nan)."""
    n = states.shape[0]
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        if config_hash:
            fh.write(f"# config_hash={config_hash}\n")
        fh.write(DATASET_HEADER + "\n")
        for k in range(n):
            row = [str(k)] + [_fmt(v) for v in states[k]]
            if k < inputs.shape[0]:
                row += [_fmt(v) for v in inputs[k]]
            else:
                row += ["nan", "nan", "nan"]
            fh.write(",".join(row) + "\n")


def read_dataset_csv(path) -> tuple[np.ndarray, np.ndarray]:
    """Read states (n, 9) and inputs (n-1, 3) written by write_dataset_csv."""
    states, inputs = [], []
    with open(path, encoding="utf-8") as fh:
        header_seen = False
        for raw in fh:
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            if not header_seen:
                if line != DATASET_HEADER:
                    raise ConfigError(f"unexpected dataset header in {path}")
                header_seen = True
                continue
            parts = line.split(",")
            if len(parts) != 13:
                raise ConfigError(f"malformed dataset row in {path}")
            states.append([float(v) for v in parts[1:10]])
            inputs.append([float(v) for v in parts[10:13]])
    states = np.asarray(states)
    inputs = np.asarray(inputs)
    if np.all(np.isnan(inputs[-1])):
        inputs = inputs[:-1]
    return states, inputs
