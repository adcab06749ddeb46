"""Self-tuning moving horizon estimation on the lifted linear model.

At each sampling instant the estimator solves a convex program over one
window of past measurements: an arrival cost anchoring the window's
first lifted state to a propagated prior, the sum of weighted stage
costs on disturbance and measurement residuals, and the worst stage cost
(handled exactly through an epigraph variable). The dynamics are
eliminated by substitution, so every returned trajectory satisfies the
lifted recursion to machine precision.

The stage weights Q_k and R_k can be re-tuned every step from the
frozen noise characterization network (Q_k = diag(sigma^2), R_k =
D Q_k D^T) or held constant; all quantities live in scaled coordinates.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError
from .model import KoopmanModel
from .qcqp import QcqpProblem, QcqpResult, solve_qcqp


@dataclass
class MheConfig:
    """Estimator settings; bounds are in scaled state coordinates."""

    horizon: int = 40
    x_lower: np.ndarray | None = None
    x_upper: np.ndarray | None = None
    tol: float = 1e-8
    max_iter: int = 100
    r_floor: float = 1e-8
    q_floor: float = 1e-12
    init_guess_scale: float = 1.2
    weight_mode: str = "self_tuning"        # or "constant"
    constant_q: np.ndarray | None = None    # diagonal of Q, defaults to ones
    constant_r: np.ndarray | None = None    # full R, defaults to D D^T + floor
    include_box: bool = True
    warm_start: bool = True

    def __post_init__(self):
        if self.horizon < 1:
            raise ConfigError("estimation horizon must be at least 1")
        if self.weight_mode not in ("self_tuning", "constant"):
            raise ConfigError(f"unknown weight mode {self.weight_mode!r}")
        if self.x_lower is not None and self.x_upper is not None:
            if np.any(np.asarray(self.x_lower) > np.asarray(self.x_upper)):
                raise ConfigError("state lower bound exceeds upper bound")


@dataclass
class MheProblem:
    """One estimation window, fully specified in scaled coordinates."""

    prior: np.ndarray          # (n_g,) propagated prior for the window start
    measurements: np.ndarray   # (H+1, n_y) scaled measurements y_{k-H..k}
    inputs: np.ndarray         # (H, n_u) scaled inputs u_{k-H..k-1}
    Q_diag: np.ndarray         # (n_g,) diagonal of Q_k, strictly positive
    R: np.ndarray              # (n_y, n_y) positive definite


@dataclass
class MheSolution:
    """Optimal window estimates plus solver diagnostics."""

    z0: np.ndarray             # (n_g,) estimate of the window's first state
    mu: np.ndarray             # (H, n_g) estimated lifted disturbances
    z: np.ndarray              # (H+1, n_g) reconstructed trajectory
    x: np.ndarray              # (H+1, n_x) scaled state estimates
    v: np.ndarray              # (H+1, n_y) measurement residuals
    stage_costs: np.ndarray    # (H,) values of l(mu_j, v_j)
    objective: float
    t_star: float
    kkt_residual: float
    iterations: int
    converged: bool
    sigma_clamped: bool = False


@dataclass
class ProgramMeta:
    """Index bookkeeping shared by assembly and solution extraction."""

    n_g: int
    n_u: int
    n_y: int
    H: int
    Apow: list
    c_free: np.ndarray       # (H+1, n_g) input-driven offsets of z_s
    include_max: bool

    @property
    def n_vars(self) -> int:
        return self.n_g * (self.H + 1) + (1 if self.include_max else 0)

    def mu_slice(self, j: int) -> slice:
        return slice(self.n_g * (j + 1), self.n_g * (j + 2))


def propagate_prior(model: KoopmanModel, prev_z0: np.ndarray,
                    u_prev: np.ndarray) -> np.ndarray:
    """One-step deterministic propagation of the previous window's first estimate."""
    return model.A @ prev_z0 + model.B @ u_prev


def self_tune_weights(model: KoopmanModel, z_prior: np.ndarray,
                      config: MheConfig):
    """Per-step weights from the frozen noise net: Q = diag(sigma^2), R = D Q D^T.

    Returns (Q_diag, R, clamped) where ``clamped`` records whether the
    sigma guard fired. A small floor keeps R invertible.
    """
    sigma = model.noise_std(z_prior)
    clamped = bool(np.any(sigma >= model.sigma_max))
    q = np.maximum(sigma**2, config.q_floor)
    D = model.D
    R = D @ np.diag(q) @ D.T + config.r_floor * np.eye(model.n_y)
    return q, R, clamped


def constant_weights(model: KoopmanModel, config: MheConfig):
    q = (np.ones(model.n_g) if config.constant_q is None
         else np.asarray(config.constant_q, dtype=np.float64))
    if config.constant_r is None:
        D = model.D
        R = D @ D.T + config.r_floor * np.eye(model.n_y)
    else:
        R = np.asarray(config.constant_r, dtype=np.float64)
    return q, R


def _inv_sqrt_psd(M: np.ndarray) -> np.ndarray:
    vals, vecs = np.linalg.eigh(M)
    if np.any(vals <= 0.0):
        raise ConfigError("weight matrix is not positive definite")
    return vecs @ np.diag(1.0 / np.sqrt(vals)) @ vecs.T


def build_program(
    model: KoopmanModel,
    problem: MheProblem,
    config: MheConfig,
    include_max: bool = True,
) -> tuple[QcqpProblem, ProgramMeta]:
    """Assemble the window estimation QCQP.

    Decision vector: [z_{k-H|k}; mu_{k-H..k-1|k}; t]. The lifted states
    are substituted out, so z_s is affine in the decisions; measurement
    residuals and box constraints on the reconstructed states are affine
    as well. Each stage cost contributes one epigraph constraint
    l_j <= t when the max term is active.
    """
    A, B, D = model.A, model.B, model.D
    g, ny = model.n_g, model.n_y
    H = problem.inputs.shape[0]
    nx = model.n_x
    if problem.measurements.shape != (H + 1, ny):
        raise ValueError("measurement window shape does not match inputs")
    if np.any(problem.Q_diag <= 0.0):
        raise ConfigError("Q must have strictly positive diagonal entries")

    Apow = [np.eye(g)]
    for _ in range(H):
        Apow.append(A @ Apow[-1])
    c_free = np.zeros((H + 1, g))
    for s in range(H):
        c_free[s + 1] = A @ c_free[s] + B @ problem.inputs[s]

    meta = ProgramMeta(g, model.n_u, ny, H, Apow, c_free, include_max)
    n = meta.n_vars
    q_inv_sqrt = 1.0 / np.sqrt(problem.Q_diag)
    R_inv_sqrt = _inv_sqrt_psd(problem.R)
    DA = [D @ Apow[s] for s in range(H + 1)]

    rows_per_stage = g + ny
    G0 = np.zeros((g + H * rows_per_stage, n))
    g0 = np.zeros(g + H * rows_per_stage)
    G0[:g, :g] = np.eye(g)
    g0[:g] = -problem.prior
    c0 = np.zeros(n)
    if include_max:
        c0[-1] = 1.0

    Gq, gq, cq, dq = [], [], [], []
    for j in range(H):
        Gj = np.zeros((rows_per_stage, n))
        gj = np.zeros(rows_per_stage)
        Gj[:g, meta.mu_slice(j)] = np.diag(q_inv_sqrt)
        # v_j = y_j - D z_j with z_j = Apow[j] z0 + sum_i Apow[j-1-i] mu_i + c_j
        blk = Gj[g:]
        blk[:, :g] = -R_inv_sqrt @ DA[j]
        for i in range(j):
            blk[:, meta.mu_slice(i)] = -R_inv_sqrt @ DA[j - 1 - i]
        gj[g:] = R_inv_sqrt @ (problem.measurements[j] - D @ c_free[j])
        row0 = g + j * rows_per_stage
        G0[row0: row0 + rows_per_stage] = Gj
        g0[row0: row0 + rows_per_stage] = gj
        if include_max:
            ct = np.zeros(n)
            ct[-1] = -1.0
            Gq.append(Gj)
            gq.append(gj)
            cq.append(ct)
            dq.append(0.0)

    A_in = None
    b_in = None
    if config.include_box and config.x_lower is not None:
        lo = np.asarray(config.x_lower, dtype=np.float64)
        hi = np.asarray(config.x_upper, dtype=np.float64)
        Xrows = np.zeros(((H + 1) * nx, n))
        offs = np.zeros((H + 1) * nx)
        for s in range(H + 1):
            r0 = s * nx
            Xrows[r0: r0 + nx, :g] = Apow[s][:nx]
            for i in range(s):
                Xrows[r0: r0 + nx, meta.mu_slice(i)] = Apow[s - 1 - i][:nx]
            offs[r0: r0 + nx] = c_free[s, :nx]
        A_in = np.vstack([Xrows, -Xrows])
        b_in = np.concatenate([np.tile(hi, H + 1) - offs,
                               offs - np.tile(lo, H + 1)])

    prob = QcqpProblem(G0, g0, c0, Gq, gq, cq, dq, A_in, b_in)
    return prob, meta


def extract_solution(model: KoopmanModel, problem: MheProblem,
                     meta: ProgramMeta, result: QcqpResult) -> MheSolution:
    g, H = meta.n_g, meta.H
    w = result.w
    z0 = w[:g]
    mu = w[g: g * (H + 1)].reshape(H, g)
    z = np.empty((H + 1, g))
    z[0] = z0
    for j in range(H):
        z[j + 1] = model.A @ z[j] + model.B @ problem.inputs[j] + mu[j]
    v = problem.measurements - z @ model.D.T
    R_inv = np.linalg.inv(problem.R)
    stage = np.array(
        [mu[j] @ (mu[j] / problem.Q_diag) + v[j] @ R_inv @ v[j] for j in range(H)]
    )
    t_star = float(w[-1]) if meta.include_max else float(stage.max())
    return MheSolution(
        z0=z0,
        mu=mu,
        z=z,
        x=z[:, : model.n_x],
        v=v,
        stage_costs=stage,
        objective=result.objective,
        t_star=t_star,
        kkt_residual=result.kkt_residual,
        iterations=result.iterations,
        converged=result.converged,
    )


def solve_window(model: KoopmanModel, problem: MheProblem, config: MheConfig,
                 include_max: bool = True,
                 w0: np.ndarray | None = None) -> MheSolution:
    prog, meta = build_program(model, problem, config, include_max)
    if w0 is None:
        w0 = initial_point(model, problem, meta)
    result = solve_qcqp(prog, tol=config.tol, max_iter=config.max_iter, w0=w0)
    return extract_solution(model, problem, meta, result)


def initial_point(model: KoopmanModel, problem: MheProblem,
                  meta: ProgramMeta) -> np.ndarray:
    """Strictly feasible start: prior rollout with zero disturbances."""
    w0 = np.zeros(meta.n_vars)
    w0[: meta.n_g] = problem.prior
    if meta.include_max:
        z = problem.prior.copy()
        worst = 0.0
        R_inv = np.linalg.inv(problem.R)
        for j in range(meta.H):
            v = problem.measurements[j] - model.D @ z
            worst = max(worst, float(v @ R_inv @ v))
            z = model.A @ z + model.B @ problem.inputs[j]
        w0[-1] = 2.0 * worst + 1.0
    return w0


@dataclass
class EstimatorState:
    """Streaming state: ring buffers plus the previous window's solution."""

    model: KoopmanModel
    config: MheConfig
    measurements: list = field(default_factory=list)   # scaled, length k+1
    inputs: list = field(default_factory=list)         # scaled, length k
    step: int = -1
    prev_solution: MheSolution | None = None
    prev_prior: np.ndarray | None = None
    initial_prior: np.ndarray | None = None

    def ready(self) -> bool:
        return self.step >= self.config.horizon


def estimate_step(
    state: EstimatorState,
    y_k: np.ndarray,
    u_prev: np.ndarray | None,
    x0_scaled: np.ndarray | None = None,
) -> MheSolution | None:
    """Advance the estimator by one measurement.

    ``y_k`` is the scaled measurement at the new instant; ``u_prev`` the
    scaled input that produced it (None at k=0). Returns the window
    solution once the buffer holds a full horizon, else None. For the
    first full window the prior comes from the configured initial-guess
    policy applied to ``x0_scaled``.
    """
    model, config = state.model, state.config
    H = config.horizon
    state.step += 1
    state.measurements.append(np.asarray(y_k, dtype=np.float64))
    if state.step > 0:
        if u_prev is None:
            raise ValueError("u_prev is required for every step after the first")
        state.inputs.append(np.asarray(u_prev, dtype=np.float64))
    if not state.ready():
        return None

    k = state.step
    if state.prev_solution is None:
        if state.initial_prior is not None:
            prior = state.initial_prior
        else:
            if x0_scaled is None:
                raise ValueError("first window needs x0_scaled or initial_prior")
            prior = model.lift(config.init_guess_scale * np.asarray(x0_scaled),
                               already_scaled=True)
    else:
        u_shift = state.inputs[k - H - 1]
        prior = propagate_prior(model, state.prev_solution.z0, u_shift)

    clamped = False
    if config.weight_mode == "self_tuning":
        q, R, clamped = self_tune_weights(model, prior, config)
    else:
        q, R = constant_weights(model, config)

    problem = MheProblem(
        prior=prior,
        measurements=np.asarray(state.measurements[k - H: k + 1]),
        inputs=np.asarray(state.inputs[k - H: k]),
        Q_diag=q,
        R=R,
    )
    w0 = None
    if config.warm_start and state.prev_solution is not None:
        prev = state.prev_solution
        w0 = np.zeros(model.n_g * (H + 1) + 1)
        w0[: model.n_g] = prior
        w0[model.n_g: model.n_g * H] = prev.mu[1:].reshape(-1)
        w0[-1] = max(2.0 * float(prev.stage_costs.max()), 1.0)
    solution = solve_window(model, problem, config, w0=w0)
    solution.sigma_clamped = clamped
    state.prev_prior = prior
    state.prev_solution = solution
    return solution


ESTIMATE_HEADER = (
    "k," + ",".join(f"xhat_{i}" for i in range(1, 10)) + ","
    + ",".join(f"x_true_{i}" for i in range(1, 10))
    + ",obj,t_star,kkt_residual,iters,converged"
)


@dataclass
class EstimationRun:
    """Per-step estimates over a replayed log plus summary error."""

    ks: np.ndarray
    x_hat: np.ndarray          # (n_est, n_x) unscaled estimates at k|k
    x_true: np.ndarray | None  # matching ground truth, if known
    objective: np.ndarray
    t_star: np.ndarray
    kkt_residual: np.ndarray
    iterations: np.ndarray
    converged: np.ndarray
    mse_scaled: float


def run_estimator(
    model: KoopmanModel,
    measurements_raw: np.ndarray,
    inputs_raw: np.ndarray,
    config: MheConfig,
    x_true_raw: np.ndarray | None = None,
    x0_guess_raw: np.ndarray | None = None,
) -> EstimationRun:
    """Stream the estimator over an aligned measurement/input log.

    ``measurements_raw`` is (L, n_y) in physical units, ``inputs_raw``
    (L-1, n_u). Estimates are produced for every k >= horizon. The
    summary MSE is computed in scaled space against ``x_true_raw`` when
    provided.
    """
    L = measurements_raw.shape[0]
    if inputs_raw.shape[0] != L - 1:
        raise ConfigError("inputs log must be one shorter than measurements log")
    if L <= config.horizon:
        raise ConfigError("log shorter than one estimation window")
    scaler = model.scaler
    y_scaled = scaler.scale_measurement(measurements_raw, model.measured_indices)
    u_scaled = scaler.scale_u(inputs_raw)
    if x0_guess_raw is None and x_true_raw is not None:
        x0_guess_raw = x_true_raw[0]
    x0_scaled = scaler.scale_x(x0_guess_raw) if x0_guess_raw is not None else None

    state = EstimatorState(model=model, config=config)
    rows = []
    for k in range(L):
        sol = estimate_step(
            state, y_scaled[k], u_scaled[k - 1] if k > 0 else None, x0_scaled
        )
        if sol is not None:
            rows.append((k, sol))

    ks = np.array([k for k, _ in rows])
    x_hat_scaled = np.array([sol.x[-1] for _, sol in rows])
    x_hat = scaler.unscale_x(x_hat_scaled)
    mse = np.nan
    x_true = None
    if x_true_raw is not None:
        x_true = x_true_raw[ks]
        err = x_hat_scaled - scaler.scale_x(x_true)
        mse = float(np.mean(err * err))
    return EstimationRun(
        ks=ks,
        x_hat=x_hat,
        x_true=x_true,
        objective=np.array([s.objective for _, s in rows]),
        t_star=np.array([s.t_star for _, s in rows]),
        kkt_residual=np.array([s.kkt_residual for _, s in rows]),
        iterations=np.array([s.iterations for _, s in rows]),
        converged=np.array([s.converged for _, s in rows]),
        mse_scaled=mse,
    )


def write_estimate_csv(run: EstimationRun, path, config_hash: str = "") -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        if config_hash:
            fh.write(f"# config_hash={config_hash}\n")
        fh.write(ESTIMATE_HEADER + "\n")
        for i, k in enumerate(run.ks):
            true = (run.x_true[i] if run.x_true is not None
                    else np.full(run.x_hat.shape[1], np.nan))
            row = [str(int(k))]
            row += [f"{v:.17g}" for v in run.x_hat[i]]
            row += [f"{v:.17g}" for v in true]
            row += [
                f"{run.objective[i]:.17g}",
                f"{run.t_star[i]:.17g}",
                f"{run.kkt_residual[i]:.17g}",
                str(int(run.iterations[i])),
                str(int(run.converged[i])),
            ]
            fh.write(",".join(row) + "\n")


def data_driven_box(scaler, X_scaled_min, X_scaled_max, margin: float = 3.0):
    """Box bounds from scaled training-data extrema widened by ``margin``."""
    return (np.asarray(X_scaled_min) - margin, np.asarray(X_scaled_max) + margin)
