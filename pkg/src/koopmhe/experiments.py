"""Benchmark pipeline pieces shared by the CLI and the acceptance suite.

One master seed drives everything through named substreams, so paired
comparisons across estimator designs replay identical disturbance and
measurement realizations within a seed.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .config import ExperimentConfig
from .data import TrajectoryDataset, fit_scaler, generate_dataset
from .errors import ConfigError
from .mhe import EstimationRun, MheConfig, run_estimator
from .model import KoopmanModel
from .process import (TEMP_INDICES, X_STEADY, Trajectory,
                      sample_truncated_gaussian, simulate)
from .rng import substream
from .training import TrainConfig, evaluate_prediction, fit, pretrain_noise_net


def child_seed(master_seed: int, label: str) -> int:
    """Derive an independent integer seed for a named pipeline stage."""
    return int(substream(master_seed, label).integers(0, 2**63 - 1))


def benchmark_dataset(config: ExperimentConfig, seed: int, which: str
                      ) -> TrajectoryDataset:
    """Training or test dataset for the benchmark process."""
    sim = config.simulate
    n_samples = sim.n_samples if which == "train" else sim.n_test_samples
    H = config.train.H
    if n_samples <= H:
        raise ConfigError("dataset length must exceed the training horizon")
    return generate_dataset(
        n_windows=n_samples - H,
        H=H,
        dist=config.disturbance,
        params=config.process_params,
        seed=child_seed(seed, f"{which}_data"),
        dt=sim.dt,
        x0_low=sim.x0_scale_low * X_STEADY,
        x0_high=sim.x0_scale_high * X_STEADY,
        policy=config.inputs,
        settle=sim.settle_samples,
    )


@dataclass
class EstimationScenario:
    """One benchmark estimation log: truth, inputs, and noisy measurements."""

    states: np.ndarray          # (L, 9) raw true states
    inputs: np.ndarray          # (L-1, 3) raw inputs
    measurements: np.ndarray    # (L, 3) raw measured temperatures


def make_estimation_scenario(config: ExperimentConfig, seed: int
                             ) -> EstimationScenario:
    sim = config.simulate
    L = sim.est_log_samples
    if L <= config.mhe.horizon:
        raise ConfigError("estimation log must exceed the estimation horizon")
    x0 = substream(seed, "est_x0").uniform(
        sim.x0_scale_low * X_STEADY, sim.x0_scale_high * X_STEADY
    )
    settle = sim.settle_samples
    u = config.inputs.sample(substream(seed, "est_inputs"), settle + L - 1)
    traj = simulate(x0, u, sim.dt, config.process_params, config.disturbance,
                    rng=substream(seed, "est_disturbance"))
    traj = Trajectory(traj.states[settle:], traj.inputs[settle:], sim.dt)
    y = traj.states[:, list(TEMP_INDICES)].copy()
    if np.any(config.measurement.sigma > 0.0):
        noise = sample_truncated_gaussian(
            substream(seed, "est_measurement"),
            config.measurement.sigma, config.measurement.bound, y.shape,
        )
        y = y + noise
    return EstimationScenario(states=traj.states, inputs=traj.inputs,
                              measurements=y)


def scaled_state_box(model: KoopmanModel, dataset: TrajectoryDataset,
                     margin: float):
    """Box bounds: scaled training-data extrema widened by ``margin``."""
    X, _ = dataset.train_windows()
    Xs = model.scaler.scale_x(X.reshape(-1, X.shape[-1]))
    return Xs.min(axis=0) - margin, Xs.max(axis=0) + margin


def design_mhe_config(config: ExperimentConfig, design: int,
                      box=None) -> MheConfig:
    """Estimator settings for one of the three comparison designs.

    Design 1 self-tunes Q and R from the noise net every step; designs 2
    and 3 hold them constant (the model differs: designs 1 and 2 use the
    physics-informed model, design 3 the data-only baseline).
    """
    if design not in (1, 2, 3):
        raise ConfigError(f"unknown MHE design {design}")
    cfg = replace(config.mhe)
    cfg.weight_mode = "self_tuning" if design == 1 else "constant"
    if box is not None:
        cfg.x_lower, cfg.x_upper = box
        cfg.include_box = True
    else:
        cfg.include_box = False
    return cfg


def run_design(model: KoopmanModel, scenario: EstimationScenario,
               mhe_config: MheConfig, constant_q_scale: float = 1.0
               ) -> EstimationRun:
    if mhe_config.weight_mode == "constant" and mhe_config.constant_q is None:
        mhe_config = replace(mhe_config)
        mhe_config.constant_q = constant_q_scale * np.ones(model.n_g)
    return run_estimator(
        model,
        scenario.measurements,
        scenario.inputs,
        mhe_config,
        x_true_raw=scenario.states,
        x0_guess_raw=scenario.states[0],
    )


def train_benchmark_models(config: ExperimentConfig, seed: int,
                           dataset: TrajectoryDataset, physics: bool,
                           test_windows=None):
    """Pretrain the noise net, then fit with or without physics terms.

    Returns (model, pretrain_rows, report). Both branches start from the
    identical pretrained state so comparisons are paired.
    """
    tcfg = replace(config.train, seed=child_seed(seed, "training"),
                   physics_enabled=physics)
    pretrained, rows = pretrain_noise_net(dataset, tcfg)
    model, report = fit(dataset, tcfg, process_params=config.process_params,
                        model=pretrained, test_windows=test_windows)
    return model, rows, report


@dataclass
class ComparisonReport:
    """Per-seed, per-design estimation MSE plus aggregates."""

    rows: list                     # (seed, design, mse)
    mean_mse: dict                 # design -> mean
    improvements: dict             # label -> relative reduction
    test_mse: dict                 # model label -> prediction MSE


COMPARISON_HEADER = "kind,seed,design,value"


def compare_designs(
    config: ExperimentConfig,
    model_pi: KoopmanModel,
    model_data: KoopmanModel,
    train_dataset: TrajectoryDataset,
    test_mse: dict | None = None,
) -> ComparisonReport:
    """Run every configured design over every seed with paired realizations."""
    box_pi = scaled_state_box(model_pi, train_dataset, config.box_margin) \
        if config.use_box else None
    box_data = scaled_state_box(model_data, train_dataset, config.box_margin) \
        if config.use_box else None
    rows = []
    for seed in config.seeds:
        scenario = make_estimation_scenario(config, seed)
        for design in config.designs:
            model = model_data if design == 3 else model_pi
            box = box_data if design == 3 else box_pi
            mcfg = design_mhe_config(config, design, box)
            run = run_design(model, scenario, mcfg, config.constant_q_scale)
            rows.append((seed, design, run.mse_scaled))
    mean_mse = {
        d: float(np.mean([m for (_, dd, m) in rows if dd == d]))
        for d in config.designs
    }
    improvements = {}
    if 1 in mean_mse and 3 in mean_mse and mean_mse[3] > 0:
        improvements["design1_vs_design3"] = 1.0 - mean_mse[1] / mean_mse[3]
    if 1 in mean_mse and 2 in mean_mse and mean_mse[2] > 0:
        improvements["design1_vs_design2"] = 1.0 - mean_mse[1] / mean_mse[2]
    return ComparisonReport(rows=rows, mean_mse=mean_mse,
                            improvements=improvements,
                            test_mse=test_mse or {})


def write_comparison_csv(report: ComparisonReport, path,
                         config_hash: str = "") -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        if config_hash:
            fh.write(f"# config_hash={config_hash}\n")
        fh.write(COMPARISON_HEADER + "\n")
        for seed, design, mse in report.rows:
            fh.write(f"mse,{seed},{design},{mse:.17g}\n")
        for design, mse in sorted(report.mean_mse.items()):
            fh.write(f"mean_mse,,{design},{mse:.17g}\n")
        for label, value in sorted(report.improvements.items()):
            fh.write(f"{label},,,{value:.17g}\n")
        for label, value in sorted(report.test_mse.items()):
            fh.write(f"test_mse,,{label},{value:.17g}\n")
