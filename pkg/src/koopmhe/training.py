"""Physics-informed training of the lifted linear model.

Four loss terms drive the fit: reconstruction error of the multi-step
rollout in the original state space, propagation error in the lifted
space, and two physics penalties that align the rollout with the known
temperature balances. Task weights are trainable uncertainty parameters
updated once per epoch, with a log regularizer keeping them bounded.

The noise characterization network is trained first on a data-only
Gaussian likelihood (so the per-step noise scale is identifiable) and
frozen afterwards; the main fit samples window noise from it but never
updates it.

All gradients are hand-rolled reverse accumulation over the unrolled
window; no autodiff framework is involved.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .data import Scaler, TrajectoryDataset, fit_scaler
from .errors import ConfigError, NumericalError, TrainingDivergedError
from .model import LOG_SIGMA_MIN, KoopmanModel
from .nn import Mlp, adam_init, adam_step, init_mlp
from .physics import KNOWN_EQUATIONS, TemperaturePhysics
from .process import TEMP_INDICES, ProcessParams
from .rng import substream

LOSS_NAMES = ("loss_x", "loss_z", "loss_px", "loss_pz")


@dataclass
class LossWeights:
    """Trainable task-uncertainty weights plus static magnitude normalizers.

    The effective weight of term i is static_scale[i] / (2 nu_i^2) with
    nu_i = exp(rho_i) kept positive by construction. Defaults put the
    initial effective weights at (10, 10, 1, 1).
    """

    rho: np.ndarray = field(
        default_factory=lambda: np.full(4, float(np.log(np.sqrt(0.5))))
    )
    beta: float = 0.5
    static_scale: np.ndarray = field(
        default_factory=lambda: np.array([10.0, 10.0, 1.0, 1.0])
    )

    @property
    def nu(self) -> np.ndarray:
        return np.exp(self.rho)

    def effective(self) -> np.ndarray:
        return self.static_scale / (2.0 * self.nu**2)

    def regularizer(self, n_active: int) -> float:
        return self.beta * float(np.sum(np.log1p(self.nu[:n_active])))


@dataclass
class TrainConfig:
    """Hyperparameters for pretraining and the physics-informed fit."""

    H: int = 20
    n_lifted: int = 13
    hidden: tuple = (64, 64)
    noise_hidden: tuple = (64,)
    activation: str = "relu"
    epochs: int = 200
    pretrain_epochs: int = 100
    batch_size: int = 200
    lr: float = 1e-3            # lifting net and operators
    lr_noise: float = 1e-3      # noise characterization net
    lr_nu: float = 2e-2         # task-uncertainty weights, per epoch
    lr_decay: float = 1.0       # per-epoch multiplicative decay
    beta: float = 0.5
    static_scale: tuple = (10.0, 10.0, 1.0, 1.0)
    nu_init: float = float(np.sqrt(0.5))
    seed: int = 0
    physics_enabled: bool = True
    fp_equations: tuple = KNOWN_EQUATIONS
    operator_init_scale: float = 0.01
    track_test_mse: bool = False
    mu_mode: str = "sample"     # "sample" draws window noise, "zero" disables

    def validate_mu_mode(self):
        if self.mu_mode not in ("sample", "zero"):
            raise ConfigError(f"unknown mu_mode {self.mu_mode!r}")

    def __post_init__(self):
        if self.H < 2:
            raise ConfigError("window length H must be at least 2")
        if self.epochs < 0 or self.pretrain_epochs < 0:
            raise ConfigError("epoch counts must be nonnegative")
        if self.batch_size < 1:
            raise ConfigError("batch size must be positive")


@dataclass
class TrainReport:
    """Per-epoch trace of the fit plus the final weight values."""

    epochs: list = field(default_factory=list)   # dict rows
    final_nu: np.ndarray | None = None
    wall_time: float = 0.0

    def add(self, epoch, train_loss, val_loss, test_mse, nu):
        self.epochs.append(
            dict(epoch=epoch, train_loss=train_loss, val_loss=val_loss,
                 test_mse=test_mse, nu1=nu[0], nu2=nu[1], nu3=nu[2], nu4=nu[3])
        )


REPORT_HEADER = "epoch,train_loss,val_loss,test_mse,nu1,nu2,nu3,nu4"


def write_report_csv(report: TrainReport, path, config_hash: str = "") -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        if config_hash:
            fh.write(f"# config_hash={config_hash}\n")
        fh.write(REPORT_HEADER + "\n")
        for row in report.epochs:
            fh.write(
                f"{row['epoch']},{row['train_loss']:.17g},{row['val_loss']:.17g},"
                f"{row['test_mse']:.17g},{row['nu1']:.17g},{row['nu2']:.17g},"
                f"{row['nu3']:.17g},{row['nu4']:.17g}\n"
            )


@dataclass
class WindowBatch:
    """Scaled window arrays plus the raw inputs for the physics boundary."""

    X: np.ndarray        # (N, H+1, n_x) scaled states
    U: np.ndarray        # (N, H, n_u) scaled inputs
    U_raw: np.ndarray    # (N, H, n_u) raw inputs

    @property
    def n(self) -> int:
        return self.X.shape[0]

    @property
    def H(self) -> int:
        return self.X.shape[1] - 1

    def subset(self, idx) -> "WindowBatch":
        return WindowBatch(self.X[idx], self.U[idx], self.U_raw[idx])


def make_batch(scaler: Scaler, X_raw: np.ndarray, U_raw: np.ndarray) -> WindowBatch:
    return WindowBatch(scaler.scale_x(X_raw), scaler.scale_u(U_raw), np.asarray(U_raw))


# ---------------------------------------------------------------------------
# Rollout primitives (batched).

def rollout_forward(A, B, z0, U, mu=None) -> np.ndarray:
    """z_{j+1} = A z_j + B u_j + mu with the same mu at every step."""
    n, H = U.shape[0], U.shape[1]
    Z = np.empty((n, H + 1, A.shape[0]))
    Z[:, 0] = z0
    if mu is None:
        for j in range(H):
            Z[:, j + 1] = Z[:, j] @ A.T + U[:, j] @ B.T
    else:
        for j in range(H):
            Z[:, j + 1] = Z[:, j] @ A.T + U[:, j] @ B.T + mu
    return Z


def rollout_backward(A, Z, U, dZ):
    """Reverse accumulation through the window recursion.

    Returns (dA, dB, dmu, dz0) for upstream gradients dZ on every z_j.
    """
    H = Z.shape[1] - 1
    dA = np.zeros_like(A)
    dB = np.zeros((A.shape[0], U.shape[-1]))
    dmu = np.zeros((Z.shape[0], A.shape[0]))
    delta = dZ[:, H].copy()
    for j in range(H - 1, -1, -1):
        dA += delta.T @ Z[:, j]
        dB += delta.T @ U[:, j]
        dmu += delta
        delta = dZ[:, j] + delta @ A
    return dA, dB, dmu, delta


def _lift_targets(model: KoopmanModel, X: np.ndarray):
    """Lifted ground-truth states g(x_j) for every window step, with cache."""
    n, S, nx = X.shape
    F, cache = model.lifting_net.forward(X.reshape(n * S, nx))
    Zd = np.concatenate([X, F.reshape(n, S, -1)], axis=-1)
    return Zd, cache


# ---------------------------------------------------------------------------
# Loss values (reference-facing, no gradients).

def loss_x(model: KoopmanModel, batch: WindowBatch, mu=None) -> float:
    """Mean squared reconstruction error of the rollout, j = 0..H."""
    Zd, _ = _lift_targets(model, batch.X)
    Z = rollout_forward(model.A, model.B, Zd[:, 0], batch.U, mu)
    r = Z[..., : model.n_x] - batch.X
    return float(np.sum(r * r) / (batch.n * batch.H))


def loss_z(model: KoopmanModel, batch: WindowBatch, mu=None) -> float:
    """Mean squared lifted-space propagation error against g(x_j) targets."""
    Zd, _ = _lift_targets(model, batch.X)
    Z = rollout_forward(model.A, model.B, Zd[:, 0], batch.U, mu)
    r = Z - Zd
    return float(np.sum(r * r) / (batch.n * batch.H))


def _physics_forward(model: KoopmanModel, fp: TemperaturePhysics,
                     batch: WindowBatch, Z: np.ndarray):
    """Shared forward piece of both physics losses."""
    n, H = batch.n, batch.H
    nx = model.n_x
    temps = list(fp.state_indices)
    Xh = Z[..., :nx]
    x_raw = model.scaler.unscale_x(Xh[:, :H].reshape(n * H, nx))
    t_next, cache = fp.predict(x_raw, batch.U_raw.reshape(n * H, -1))
    t_std = model.scaler.x_std[temps]
    t_mean = model.scaler.x_mean[temps]
    xbar_p = ((t_next - t_mean) / t_std).reshape(n, H, len(temps))
    return Xh, xbar_p, cache, temps


def loss_px(model: KoopmanModel, batch: WindowBatch,
            fp: TemperaturePhysics, mu=None) -> float:
    """Physics penalty on the reconstructed states, j = 0..H-1."""
    Zd, _ = _lift_targets(model, batch.X)
    Z = rollout_forward(model.A, model.B, Zd[:, 0], batch.U, mu)
    Xh, xbar_p, _, temps = _physics_forward(model, fp, batch, Z)
    r = xbar_p - Xh[:, 1:, temps]
    return float(np.sum(r * r) / (batch.n * batch.H))


def loss_pz(model: KoopmanModel, batch: WindowBatch,
            fp: TemperaturePhysics, mu=None) -> float:
    """Physics penalty in the lifted space via the hybrid state, j = 0..H-1."""
    Zd, _ = _lift_targets(model, batch.X)
    Z = rollout_forward(model.A, model.B, Zd[:, 0], batch.U, mu)
    Xh, xbar_p, _, temps = _physics_forward(model, fp, batch, Z)
    n, H = batch.n, batch.H
    xbar = Xh[:, 1:].copy()
    xbar[..., temps] = xbar_p
    Fb, _ = model.lifting_net.forward(xbar.reshape(n * H, model.n_x))
    zbar = np.concatenate([xbar, Fb.reshape(n, H, -1)], axis=-1)
    r = zbar - Z[:, 1:]
    return float(np.sum(r * r) / (n * H))


# ---------------------------------------------------------------------------
# Fused objective with gradients.

def total_loss_and_grads(
    model: KoopmanModel,
    batch: WindowBatch,
    weights: LossWeights,
    fp: TemperaturePhysics | None,
    mu=None,
    physics_enabled: bool = True,
):
    """Value, per-term values, and gradients of the weighted objective.

    Gradients cover the lifting network, A, B, and the free weight
    parameters rho; the noise net is frozen here by design. ``mu`` is
    treated as a constant input (no gradient flows into its sampling).
    """
    n, H = batch.n, batch.H
    nx, ng = model.n_x, model.n_g
    norm = 1.0 / (n * H)
    use_physics = physics_enabled and fp is not None
    n_active = 4 if use_physics else 2
    w = weights.effective()

    Zd, cacheF = _lift_targets(model, batch.X)
    Z = rollout_forward(model.A, model.B, Zd[:, 0], batch.U, mu)

    rx = Z[..., :nx] - batch.X
    Lx = float(np.sum(rx * rx) * norm)
    rz = Z - Zd
    Lz = float(np.sum(rz * rz) * norm)

    dZ = np.zeros_like(Z)
    dZd = np.zeros_like(Zd)
    dZ[..., :nx] += (2.0 * norm * w[0]) * rx
    dZ += (2.0 * norm * w[1]) * rz
    dZd -= (2.0 * norm * w[1]) * rz

    Lpx = Lpz = 0.0
    theta_extra = None
    if use_physics:
        Xh, xbar_p, cacheP, temps = _physics_forward(model, fp, batch, Z)
        rpx = xbar_p - Xh[:, 1:, temps]
        Lpx = float(np.sum(rpx * rpx) * norm)

        xbar = Xh[:, 1:].copy()
        xbar[..., temps] = xbar_p
        Fb, cacheFb = model.lifting_net.forward(xbar.reshape(n * H, nx))
        zbar = np.concatenate([xbar, Fb.reshape(n, H, -1)], axis=-1)
        rpz = zbar - Z[:, 1:]
        Lpz = float(np.sum(rpz * rpz) * norm)

        # loss_px: gradient to the rollout side and to the physics path
        dxbar_p = (2.0 * norm * w[2]) * rpx
        dZ[:, 1:, temps] -= (2.0 * norm * w[2]) * rpx

        # loss_pz: through zbar = [xbar; F(xbar)] and the rollout side
        dzbar = (2.0 * norm * w[3]) * rpz
        dZ[:, 1:] -= (2.0 * norm * w[3]) * rpz
        gW_b, gb_b, dxbar_in = model.lifting_net.backward(
            cacheFb, dzbar[..., nx:].reshape(n * H, -1)
        )
        theta_extra = (gW_b, gb_b)
        dxbar = dzbar[..., :nx] + dxbar_in.reshape(n, H, nx)
        dxbar_p = dxbar_p + dxbar[..., temps]
        dxbar_rest = dxbar.copy()
        dxbar_rest[..., temps] = 0.0
        dZ[:, 1:, :nx] += dxbar_rest

        # hybrid temperatures back through scaling, RK4 map, unscaling
        t_std = model.scaler.x_std[temps]
        dt_next = (dxbar_p / t_std).reshape(n * H, len(temps))
        dx_raw = fp.vjp(cacheP, dt_next)
        dZ[:, :H, :nx] += (dx_raw * model.scaler.x_std).reshape(n, H, nx)

    dA, dB, dmu, dz0 = rollout_backward(model.A, Z, batch.U, dZ)
    dZd[:, 0] += dz0
    gW, gb, _ = model.lifting_net.backward(
        cacheF, dZd[..., nx:].reshape(n * (H + 1), -1)
    )
    if theta_extra is not None:
        gW = [a + b for a, b in zip(gW, theta_extra[0])]
        gb = [a + b for a, b in zip(gb, theta_extra[1])]

    parts = dict(loss_x=Lx, loss_z=Lz, loss_px=Lpx, loss_pz=Lpz)
    raw = np.array([Lx, Lz, Lpx, Lpz])
    total = float(np.dot(w[:n_active], raw[:n_active])
                  + weights.regularizer(n_active))

    nu = weights.nu
    d_nu = np.zeros(4)
    d_nu[:n_active] = (-(weights.static_scale[:n_active] / nu[:n_active] ** 3)
                       * raw[:n_active]
                       + weights.beta / (1.0 + nu[:n_active]))
    d_rho = d_nu * nu

    grads = dict(W=gW, b=gb, A=dA, B=dB, rho=d_rho, mu=dmu)
    return total, parts, grads


def sample_window_noise(model: KoopmanModel, z0: np.ndarray,
                        rng: np.random.Generator) -> np.ndarray:
    """Draw mu = sigma(z0) * eps, one vector per window."""
    sigma = model.noise_std(z0)
    return sigma * rng.standard_normal(sigma.shape)


# ---------------------------------------------------------------------------
# Model construction and evaluation.

def init_model(
    config: TrainConfig,
    scaler: Scaler,
    n_x: int,
    n_u: int,
    measured_indices=TEMP_INDICES,
) -> KoopmanModel:
    """Fresh model with seeded network and operator initialization."""
    n_g = n_x + config.n_lifted
    lift_dims = [n_x, *config.hidden, config.n_lifted]
    noise_dims = [n_g, *config.noise_hidden, n_g]
    lifting = init_mlp(lift_dims, substream(config.seed, "lift_init"),
                       config.activation)
    noise = init_mlp(noise_dims, substream(config.seed, "noise_init"),
                     config.activation)
    op_rng = substream(config.seed, "operators")
    A = np.eye(n_g) + config.operator_init_scale * op_rng.standard_normal((n_g, n_g))
    B = config.operator_init_scale * op_rng.standard_normal((n_g, n_u))
    model = KoopmanModel(A=A, B=B, lifting_net=lifting, noise_net=noise,
                         scaler=scaler, measured_indices=tuple(measured_indices))
    model.validate()
    return model


def evaluate_prediction(model: KoopmanModel, X_raw: np.ndarray, U_raw: np.ndarray):
    """Deterministic open-loop prediction error on test windows.

    Returns (mse, per_state, X_pred_scaled). The scalar uses the same
    1/(N H) normalization as the reconstruction loss; the per-state table
    is a plain mean of squared residuals per component. All errors are in
    scaled space.
    """
    batch = make_batch(model.scaler, X_raw, U_raw)
    Zd, _ = _lift_targets(model, batch.X)
    Z = rollout_forward(model.A, model.B, Zd[:, 0], batch.U)
    r = Z[..., : model.n_x] - batch.X
    mse = float(np.sum(r * r) / (batch.n * batch.H))
    per_state = (r * r).mean(axis=(0, 1))
    return mse, per_state, Z[..., : model.n_x]


def _data_val_loss(model: KoopmanModel, batch: WindowBatch,
                   static_scale) -> float:
    """Deterministic validation metric: statically weighted data terms."""
    return float(static_scale[0] * loss_x(model, batch)
                 + static_scale[1] * loss_z(model, batch))


def _model_params(model: KoopmanModel):
    return model.lifting_net.parameters() + [model.A, model.B]


def _apply_param_grads(model: KoopmanModel, grads) -> list:
    return grads["W"] + grads["b"] + [grads["A"], grads["B"]]


# ---------------------------------------------------------------------------
# Noise-network pretraining.

def _nll_and_grads(model: KoopmanModel, batch: WindowBatch):
    """Gaussian NLL of window residuals under step-accumulated variance.

    The deterministic rollout is the mean; the predicted per-step noise
    variance sigma(z0)^2 accumulates through the dynamics, so step j
    carries variance sum_i (A^i o A^i) sigma^2. Gradients reach theta, A,
    B through the residuals (variance treated as a fixed weight) and the
    noise net through the variance.
    """
    n, H = batch.n, batch.H
    nx = model.n_x
    Zd, cacheF = _lift_targets(model, batch.X)
    Z = rollout_forward(model.A, model.B, Zd[:, 0], batch.U)
    R = Zd[:, 1:] - Z[:, 1:]

    raw, cacheN = model.noise_net.forward(Zd[:, 0])
    log_max = float(np.log(model.sigma_max))
    clip_mask = (raw > LOG_SIGMA_MIN) & (raw < log_max)
    lsig = np.clip(raw, LOG_SIGMA_MIN, log_max)
    sig2 = np.exp(2.0 * lsig)

    # W[j] = sum_{i<=j} A^i o A^i, the diagonal of the accumulated covariance
    g = model.n_g
    W = np.empty((H, g, g))
    Ap = np.eye(g)
    acc = np.zeros((g, g))
    for j in range(H):
        acc += Ap * Ap
        W[j] = acc
        Ap = model.A @ Ap
    v = np.einsum("jmt,nt->njm", W, sig2) + 1e-12

    norm = 1.0 / (n * H)
    nll = float(0.5 * norm * np.sum(R * R / v + np.log(v)))

    dR = norm * R / v
    dZd = np.zeros_like(Zd)
    dZd[:, 1:] += dR
    dZ = np.zeros_like(Z)
    dZ[:, 1:] -= dR
    dA, dB, _, dz0 = rollout_backward(model.A, Z, batch.U, dZ)
    dZd[:, 0] += dz0
    gW, gb, _ = model.lifting_net.backward(
        cacheF, dZd[..., nx:].reshape(n * (H + 1), -1)
    )

    dv = 0.5 * norm * (1.0 / v - (R * R) / (v * v))
    dsig2 = np.einsum("njm,jmt->nt", dv, W)
    draw = dsig2 * 2.0 * sig2 * clip_mask
    gWn, gbn, _ = model.noise_net.backward(cacheN, draw)

    grads = dict(W=gW, b=gb, A=dA, B=dB, Wn=gWn, bn=gbn)
    return nll, grads


def pretrain_noise_net(
    dataset: TrajectoryDataset,
    config: TrainConfig,
    scaler: Scaler | None = None,
    measured_indices=TEMP_INDICES,
):
    """Train the full data-only pipeline under the window NLL.

    Returns (model, report_rows); the model carries the trained noise net
    (to be frozen) together with provisional lifting/operator parameters
    that the physics-informed fit continues from.
    """
    if scaler is None:
        scaler = fit_scaler(dataset)
    Xtr, Utr = dataset.train_windows()
    Xva, Uva = dataset.val_windows()
    n_x = Xtr.shape[-1]
    n_u = Utr.shape[-1]
    model = init_model(config, scaler, n_x, n_u, measured_indices)
    train = make_batch(scaler, Xtr, Utr)
    val = make_batch(scaler, Xva, Uva)

    params = _model_params(model)
    opt = adam_init(params, learning_rate=config.lr)
    noise_params = model.noise_net.parameters()
    opt_noise = adam_init(noise_params, learning_rate=config.lr_noise)
    batch_rng = substream(config.seed, "pretrain_batches")

    rows = []
    best = (np.inf, model.copy())
    for epoch in range(config.pretrain_epochs):
        perm = batch_rng.permutation(train.n)
        epoch_nll = 0.0
        n_batches = 0
        for start in range(0, train.n, config.batch_size):
            idx = perm[start: start + config.batch_size]
            nll, grads = _nll_and_grads(model, train.subset(idx))
            if not np.isfinite(nll):
                raise TrainingDivergedError(
                    f"pretraining NLL became non-finite at epoch {epoch}"
                )
            adam_step(params, _apply_param_grads(model, grads), opt)
            adam_step(noise_params, grads["Wn"] + grads["bn"], opt_noise)
            epoch_nll += nll
            n_batches += 1
        opt.learning_rate *= config.lr_decay
        opt_noise.learning_rate *= config.lr_decay
        val_nll, _ = _nll_and_grads(model, val)
        rows.append(dict(epoch=epoch, train_nll=epoch_nll / max(n_batches, 1),
                         val_nll=val_nll))
        if val_nll < best[0]:
            best = (val_nll, model.copy())
    model = best[1] if config.pretrain_epochs > 0 else model
    return model, rows


# ---------------------------------------------------------------------------
# Main fit.

def fit(
    dataset: TrajectoryDataset,
    config: TrainConfig,
    process_params: ProcessParams | None = None,
    model: KoopmanModel | None = None,
    test_windows=None,
    measured_indices=TEMP_INDICES,
):
    """Mini-batch training of the weighted multi-task objective.

    ``model`` should come from :func:`pretrain_noise_net`; its noise net
    stays frozen. With physics_enabled the known temperature balances are
    enforced through the two physics losses (``process_params`` required);
    otherwise the fit is the data-only baseline. Returns the
    best-validation model and a TrainReport.
    """
    t0 = time.perf_counter()
    if model is None:
        scaler = fit_scaler(dataset)
        Xtr, Utr = dataset.train_windows()
        model = init_model(config, scaler, Xtr.shape[-1], Utr.shape[-1],
                           measured_indices)
    else:
        model = model.copy()
        scaler = model.scaler
    config.validate_mu_mode()
    if config.physics_enabled:
        if process_params is None:
            raise ConfigError("physics-informed fit needs process parameters")
        fp = TemperaturePhysics(process_params, dataset.dt, config.fp_equations)
    else:
        fp = None

    Xtr, Utr = dataset.train_windows()
    Xva, Uva = dataset.val_windows()
    train = make_batch(scaler, Xtr, Utr)
    val = make_batch(scaler, Xva, Uva)
    weights = LossWeights(
        rho=np.full(4, float(np.log(config.nu_init))),
        beta=config.beta,
        static_scale=np.asarray(config.static_scale, dtype=np.float64),
    )
    n_active = 4 if config.physics_enabled else 2

    params = _model_params(model)
    opt = adam_init(params, learning_rate=config.lr)
    opt_nu = adam_init([weights.rho], learning_rate=config.lr_nu)
    batch_rng = substream(config.seed, "batches")
    mu_rng = substream(config.seed, "mu")

    report = TrainReport()
    best_val = np.inf
    best_model = model.copy()
    for epoch in range(config.epochs):
        perm = batch_rng.permutation(train.n)
        rho_grad = np.zeros(4)
        epoch_loss = 0.0
        n_batches = 0
        for start in range(0, train.n, config.batch_size):
            idx = perm[start: start + config.batch_size]
            sub = train.subset(idx)
            mu = None
            if config.mu_mode == "sample":
                Zd0 = model.lift(sub.X[:, 0], already_scaled=True)
                mu = sample_window_noise(model, Zd0, mu_rng)
            total, parts, grads = total_loss_and_grads(
                model, sub, weights, fp, mu, config.physics_enabled
            )
            if not np.isfinite(total):
                bad = max(parts, key=lambda k: abs(parts[k]))
                raise TrainingDivergedError(
                    f"epoch {epoch}: objective non-finite (dominant term {bad})"
                )
            adam_step(params, _apply_param_grads(model, grads), opt)
            rho_grad += grads["rho"]
            epoch_loss += total
            n_batches += 1
        rho_grad[n_active:] = 0.0
        adam_step([weights.rho], [rho_grad / max(n_batches, 1)], opt_nu)
        opt.learning_rate *= config.lr_decay

        val_loss = _data_val_loss(model, val, weights.static_scale)
        test_mse = np.nan
        if config.track_test_mse and test_windows is not None:
            test_mse, _, _ = evaluate_prediction(model, *test_windows)
        report.add(epoch, epoch_loss / max(n_batches, 1), val_loss, test_mse,
                   weights.nu)
        if val_loss < best_val:
            best_val = val_loss
            best_model = model.copy()

    out = best_model if config.epochs > 0 else model
    out.physics_informed = bool(config.physics_enabled)
    report.final_nu = weights.nu.copy()
    report.wall_time = time.perf_counter() - t0
    return out, report
