"""Experiment configuration: INI-style files with strict key checking."""

from __future__ import annotations

import configparser
import hashlib
from dataclasses import dataclass, field

import numpy as np

from .data import InputPolicy
from .errors import ConfigError
from .mhe import MheConfig
from .process import U_MAX, U_MIN, DisturbanceConfig, ProcessParams, load_params
from .training import TrainConfig

#: Benchmark disturbance defaults, raw units (mass fractions, kelvin).
DEFAULT_SIGMA = np.array([1e-3, 1e-3, 0.1, 1e-3, 1e-3, 0.1, 1e-3, 1e-3, 0.1])
DEFAULT_BOUND = np.array([5e-3, 5e-3, 0.5, 5e-3, 5e-3, 0.5, 5e-3, 5e-3, 0.5])


@dataclass
class SimulateConfig:
    n_samples: int = 2020
    n_test_samples: int = 2000
    dt: float = 0.001
    x0_scale_low: float = 1.0
    x0_scale_high: float = 1.2
    est_log_samples: int = 241
    settle_samples: int = 0


@dataclass
class MeasurementNoise:
    sigma: np.ndarray = field(default_factory=lambda: np.zeros(3))
    bound: np.ndarray = field(default_factory=lambda: np.ones(3))


@dataclass
class ExperimentConfig:
    """Everything a command needs, plus the raw text for provenance hashing."""

    simulate: SimulateConfig
    disturbance: DisturbanceConfig
    measurement: MeasurementNoise
    inputs: InputPolicy
    train: TrainConfig
    mhe: MheConfig
    box_margin: float
    use_box: bool
    constant_q_scale: float
    seeds: list
    designs: list
    process_params: ProcessParams
    raw_text: str = ""

    def hash_for(self, seed: int) -> str:
        payload = f"{self.raw_text}\n:seed={seed}".encode("utf-8")
        return hashlib.sha256(payload).hexdigest()[:16]


def _floats(text: str) -> np.ndarray:
    return np.array([float(v) for v in text.split(",") if v.strip() != ""])


def _ints(text: str) -> list:
    return [int(v) for v in text.split(",") if v.strip() != ""]


def _bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"expected a boolean, got {text!r}")


_KNOWN_KEYS = {
    "paths": {"process_params"},
    "simulate": {"n_samples", "n_test_samples", "dt", "x0_scale_low",
                 "x0_scale_high", "est_log_samples", "settle_samples"},
    "disturbance": {"sigma", "bound", "measurement_sigma", "measurement_bound"},
    "inputs": {"dwell", "jitter_std", "jitter_bound", "u_min", "u_max"},
    "train": {"horizon", "n_lifted", "hidden", "noise_hidden", "activation",
              "epochs", "pretrain_epochs", "batch_size", "lr", "lr_noise",
              "lr_nu", "lr_decay", "beta", "static_scale", "nu_init", "operator_init_scale",
              "track_test_mse", "mu_mode"},
    "mhe": {"horizon", "tol", "max_iter", "r_floor", "q_floor",
            "init_guess_scale", "box_margin", "use_box", "constant_q_scale"},
    "compare": {"seeds", "designs"},
}


def load_config(path=None, text=None) -> ExperimentConfig:
    """Parse a config file (or literal text); unknown sections/keys fail fast."""
    if text is None:
        if path is None:
            text = ""
        else:
            with open(path, encoding="utf-8") as fh:
                text = fh.read()
    cp = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"malformed config: {exc}") from exc
    for section in cp.sections():
        if section not in _KNOWN_KEYS:
            raise ConfigError(f"unknown config section [{section}]")
        for key in cp[section]:
            if key not in _KNOWN_KEYS[section]:
                raise ConfigError(f"unknown key {key!r} in section [{section}]")

    def get(section, key, default, conv):
        if cp.has_option(section, key):
            return conv(cp.get(section, key))
        return default

    sim = SimulateConfig(
        n_samples=get("simulate", "n_samples", 2020, int),
        n_test_samples=get("simulate", "n_test_samples", 2000, int),
        dt=get("simulate", "dt", 0.001, float),
        x0_scale_low=get("simulate", "x0_scale_low", 1.0, float),
        x0_scale_high=get("simulate", "x0_scale_high", 1.2, float),
        est_log_samples=get("simulate", "est_log_samples", 241, int),
        settle_samples=get("simulate", "settle_samples", 0, int),
    )
    dist = DisturbanceConfig(
        sigma=get("disturbance", "sigma", DEFAULT_SIGMA.copy(), _floats),
        bound=get("disturbance", "bound", DEFAULT_BOUND.copy(), _floats),
    )
    meas = MeasurementNoise(
        sigma=get("disturbance", "measurement_sigma", np.zeros(3), _floats),
        bound=get("disturbance", "measurement_bound", np.ones(3), _floats),
    )
    policy = InputPolicy(
        u_min=get("inputs", "u_min", U_MIN.copy(), _floats),
        u_max=get("inputs", "u_max", U_MAX.copy(), _floats),
        dwell=get("inputs", "dwell", 20, int),
        jitter_std=get("inputs", "jitter_std", float(np.sqrt(0.1)), float),
        jitter_bound=get("inputs", "jitter_bound", 1.0, float),
    )
    train = TrainConfig(
        H=get("train", "horizon", 20, int),
        n_lifted=get("train", "n_lifted", 13, int),
        hidden=tuple(get("train", "hidden", [64, 64], _ints)),
        noise_hidden=tuple(get("train", "noise_hidden", [64], _ints)),
        activation=get("train", "activation", "relu", str),
        epochs=get("train", "epochs", 150, int),
        pretrain_epochs=get("train", "pretrain_epochs", 80, int),
        batch_size=get("train", "batch_size", 200, int),
        lr=get("train", "lr", 1e-3, float),
        lr_noise=get("train", "lr_noise", 1e-3, float),
        lr_nu=get("train", "lr_nu", 2e-2, float),
        lr_decay=get("train", "lr_decay", 1.0, float),
        beta=get("train", "beta", 0.5, float),
        static_scale=tuple(get("train", "static_scale", [10.0, 10.0, 1.0, 1.0],
                               _floats)),
        nu_init=get("train", "nu_init", float(np.sqrt(0.5)), float),
        operator_init_scale=get("train", "operator_init_scale", 0.01, float),
        track_test_mse=get("train", "track_test_mse", False, _bool),
        mu_mode=get("train", "mu_mode", "sample", str),
    )
    mhe = MheConfig(
        horizon=get("mhe", "horizon", 40, int),
        tol=get("mhe", "tol", 1e-8, float),
        max_iter=get("mhe", "max_iter", 100, int),
        r_floor=get("mhe", "r_floor", 1e-8, float),
        q_floor=get("mhe", "q_floor", 1e-12, float),
        init_guess_scale=get("mhe", "init_guess_scale", 1.2, float),
    )
    qscale = get("mhe", "constant_q_scale", 1.0, float)
    box_margin = get("mhe", "box_margin", 3.0, float)
    use_box = get("mhe", "use_box", True, _bool)
    seeds = get("compare", "seeds", [1, 2, 3, 4, 5], _ints)
    designs = get("compare", "designs", [1, 2, 3], _ints)
    if not seeds:
        raise ConfigError("compare.seeds must be non-empty")
    if any(d not in (1, 2, 3) for d in designs):
        raise ConfigError("designs must be a subset of {1, 2, 3}")

    params_path = get("paths", "process_params", None, str)
    params = load_params(params_path) if params_path else ProcessParams()

    return ExperimentConfig(
        simulate=sim,
        disturbance=dist,
        measurement=meas,
        inputs=policy,
        train=train,
        mhe=mhe,
        box_margin=box_margin,
        use_box=use_box,
        constant_q_scale=qscale,
        seeds=seeds,
        designs=designs,
        process_params=params,
        raw_text=text,
    )
