"""Reactor-separator benchmark simulator.

Two CSTRs in series feeding a flash separator with a vapor recycle back
to the first vessel. Reactions A -> B -> C run in both reactors. The
nine states are, in fixed order,

    x = [xA1, xB1, T1, xA2, xB2, T2, xA3, xB3, T3]

with mass fractions dimensionless and temperatures in kelvin. Heat
duties Q1..Q3 (kJ/h) are the manipulated inputs. Units are kJ, kg, m3,
hours throughout.

The mass fraction of C in the separator carries no differential
equation; it is closed algebraically as xC3 = 1 - xA3 - xB3 (clipped at
zero) before evaluating the relative-volatility split of the overhead
stream.
"""

from __future__ import annotations

from dataclasses import dataclass, fields, replace

import numpy as np

from .errors import ConfigError, SimulationDivergedError

#: Indices of the temperature states within the 9-state vector.
TEMP_INDICES = (2, 5, 8)

#: Operating point used by the benchmark scenarios (mass fractions, K).
X_STEADY = np.array(
    [0.1763, 0.6731, 480.3165, 0.1965, 0.6536, 472.7863, 0.0651, 0.6703, 474.8877]
)

#: Heating-input box (kJ/h) used for open-loop excitation, per vessel.
U_MIN = np.array([2.8e6, 0.9e6, 2.8e6])
U_MAX = np.array([3.2e6, 1.9e6, 3.2e6])


@dataclass(frozen=True)
class ProcessParams:
    """Physical constants of the benchmark process.

    Defaults are the standard reactor-separator benchmark values; every
    field can be overridden via :func:`load_params`. F1 and F2 default to
    the steady mass-balance values F10 + Fr and F10 + Fr + F20.
    """

    V1: float = 1.0            # vessel volumes, m3
    V2: float = 0.5
    V3: float = 1.0
    F10: float = 5.04          # flow rates, m3/h
    F20: float = 5.04
    Fr: float = 50.4
    Fp: float = 0.504
    F1: float = 55.44          # = F10 + Fr
    F2: float = 60.48          # = F1 + F20
    xA10: float = 1.0          # feed compositions
    xB10: float = 0.0
    xA20: float = 1.0
    xB20: float = 0.0
    T10: float = 300.0         # feed temperatures, K
    T20: float = 300.0
    k1: float = 2.77e3 * 3600.0    # pre-exponential factors, 1/h
    k2: float = 2.6e3 * 3600.0
    E1_over_R: float = 5.0e4 / 8.314   # activation temperatures, K
    E2_over_R: float = 6.0e4 / 8.314
    dH1: float = -240.0        # reaction heats, kJ/kg
    dH2: float = -280.0
    dHvap1: float = -7.06e4    # vaporization heats of the recycle, kJ/kg
    dHvap2: float = -3.14e4
    dHvap3: float = -8.136e4
    cp: float = 4.2            # heat capacity, kJ/(kg K)
    rho: float = 1000.0        # density, kg/m3
    alphaA: float = 3.5        # relative volatilities
    alphaB: float = 1.0
    alphaC: float = 0.5

    def validate(self) -> None:
        for name in ("V1", "V2", "V3", "F10", "F20", "Fr", "Fp", "F1", "F2",
                     "cp", "rho", "alphaA", "alphaB", "alphaC", "k1", "k2"):
            if getattr(self, name) <= 0.0:
                raise ConfigError(f"process parameter {name} must be positive")


def save_params(params: ProcessParams, path) -> None:
    """Write parameters as flat ``key = value`` text, keys = field names."""
    lines = [f"{f.name} = {getattr(params, f.name):.17g}" for f in fields(params)]
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


def load_params(path) -> ProcessParams:
    """Read a flat ``key = value`` parameter file; unknown keys are rejected."""
    known = {f.name for f in fields(ProcessParams)}
    overrides = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
            key, value = (s.strip() for s in line.split("=", 1))
            if key not in known:
                raise ConfigError(f"{path}:{lineno}: unknown parameter {key!r}")
            try:
                overrides[key] = float(value)
            except ValueError as exc:
                raise ConfigError(f"{path}:{lineno}: bad float {value!r}") from exc
    params = replace(ProcessParams(), **overrides)
    params.validate()
    return params


class SingularCompositionError(ValueError):
    """Separator composition makes the overhead split undefined."""


def recycle_fractions(xA3, xB3, p: ProcessParams):
    """Overhead-stream mass fractions from the separator liquid composition.

    xC3 is closed as 1 - xA3 - xB3 (clipped at 0). The returned fractions
    are nonnegative and sum to one whenever the weighted denominator is
    positive.
    """
    xA3 = np.asarray(xA3, dtype=np.float64)
    xB3 = np.asarray(xB3, dtype=np.float64)
    xC3 = np.clip(1.0 - xA3 - xB3, 0.0, None)
    den = p.alphaA * xA3 + p.alphaB * xB3 + p.alphaC * xC3
    if np.any(den <= 1e-300):
        raise SingularCompositionError(
            "volatility-weighted composition sums to zero in the separator"
        )
    return p.alphaA * xA3 / den, p.alphaB * xB3 / den, p.alphaC * xC3 / den


def cstr_rhs(x, u, p: ProcessParams) -> np.ndarray:
    """Right-hand side of the nine balance ODEs, per hour.

    Accepts single states ``(9,)`` or batches ``(..., 9)``; ``u`` must
    broadcast to ``(..., 3)``. Temperatures must be positive so the
    Arrhenius terms are defined.
    """
    x = np.asarray(x, dtype=np.float64)
    u = np.asarray(u, dtype=np.float64)
    if x.shape[-1] != 9:
        raise ValueError(f"state must have 9 components, got {x.shape[-1]}")
    if u.shape[-1] != 3:
        raise ValueError(f"input must have 3 components, got {u.shape[-1]}")
    xA1, xB1, T1 = x[..., 0], x[..., 1], x[..., 2]
    xA2, xB2, T2 = x[..., 3], x[..., 4], x[..., 5]
    xA3, xB3, T3 = x[..., 6], x[..., 7], x[..., 8]
    Q1, Q2, Q3 = u[..., 0], u[..., 1], u[..., 2]
    if np.any(T1 <= 0.0) or np.any(T2 <= 0.0) or np.any(T3 <= 0.0):
        raise ValueError("non-positive temperature: Arrhenius terms undefined")

    xAr, xBr, xCr = recycle_fractions(xA3, xB3, p)
    r1_1 = p.k1 * np.exp(-p.E1_over_R / T1) * xA1
    r2_1 = p.k2 * np.exp(-p.E2_over_R / T1) * xB1
    r1_2 = p.k1 * np.exp(-p.E1_over_R / T2) * xA2
    r2_2 = p.k2 * np.exp(-p.E2_over_R / T2) * xB2
    rcp1 = p.rho * p.cp * p.V1
    rcp2 = p.rho * p.cp * p.V2
    rcp3 = p.rho * p.cp * p.V3

    f = np.empty_like(x)
    f[..., 0] = p.F10 / p.V1 * (p.xA10 - xA1) + p.Fr / p.V1 * (xAr - xA1) - r1_1
    f[..., 1] = (p.F10 / p.V1 * (p.xB10 - xB1) + p.Fr / p.V1 * (xBr - xB1)
                 + r1_1 - r2_1)
    f[..., 2] = (p.F10 / p.V1 * (p.T10 - T1) + p.Fr / p.V1 * (T3 - T1)
                 - p.dH1 / p.cp * r1_1 - p.dH2 / p.cp * r2_1 + Q1 / rcp1)
    f[..., 3] = p.F1 / p.V2 * (xA1 - xA2) + p.F20 / p.V2 * (p.xA20 - xA2) - r1_2
    f[..., 4] = (p.F1 / p.V2 * (xB1 - xB2) + p.F20 / p.V2 * (p.xB20 - xB2)
                 + r1_2 - r2_2)
    f[..., 5] = (p.F1 / p.V2 * (T1 - T2) + p.F20 / p.V2 * (p.T20 - T2)
                 - p.dH1 / p.cp * r1_2 - p.dH2 / p.cp * r2_2 + Q2 / rcp2)
    f[..., 6] = p.F2 / p.V3 * (xA2 - xA3) - (p.Fr + p.Fp) / p.V3 * (xAr - xA3)
    f[..., 7] = p.F2 / p.V3 * (xB2 - xB3) - (p.Fr + p.Fp) / p.V3 * (xBr - xB3)
    f[..., 8] = (p.F2 / p.V3 * (T2 - T3) + Q3 / rcp3
                 + (p.Fr + p.Fp) / rcp3
                 * (xAr * p.dHvap1 + xBr * p.dHvap2 + xCr * p.dHvap3))
    return f


def rk4(f, x, dt: float) -> np.ndarray:
    """One classic fourth-order Runge-Kutta step of ``dx/dt = f(x)``."""
    k1 = f(x)
    k2 = f(x + 0.5 * dt * k1)
    k3 = f(x + 0.5 * dt * k2)
    k4 = f(x + dt * k3)
    return x + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def rk4_step(x, u, dt: float, p: ProcessParams) -> np.ndarray:
    """Advance the process one RK4 step with the input held constant."""
    if dt <= 0.0:
        raise ValueError("dt must be positive")
    return rk4(lambda s: cstr_rhs(s, u, p), np.asarray(x, dtype=np.float64), dt)


def steady_state_input(p: ProcessParams, x=X_STEADY) -> np.ndarray:
    """Heat duties that zero the three temperature balances at ``x``.

    The energy balances are affine in Q, so this is exact for the
    temperature equations; the six composition balances retain whatever
    small residual the operating point carries.
    """
    base = cstr_rhs(x, np.zeros(3), p)
    return np.array(
        [
            -base[2] * p.rho * p.cp * p.V1,
            -base[5] * p.rho * p.cp * p.V2,
            -base[8] * p.rho * p.cp * p.V3,
        ]
    )


@dataclass
class DisturbanceConfig:
    """Bounded Gaussian state disturbance added after each integration step."""

    sigma: np.ndarray      # per-state standard deviation, raw units
    bound: np.ndarray      # per-state truncation bound, raw units
    seed: int = 0

    def __post_init__(self):
        self.sigma = np.asarray(self.sigma, dtype=np.float64)
        self.bound = np.asarray(self.bound, dtype=np.float64)
        if self.sigma.shape != self.bound.shape:
            raise ConfigError("disturbance sigma and bound shapes differ")
        if np.any(self.sigma < 0.0):
            raise ConfigError("disturbance sigma must be nonnegative")
        if np.any(self.bound <= 0.0):
            raise ConfigError("disturbance bounds must be positive")
        if np.any((self.sigma > 0.0) & (self.bound < 0.05 * self.sigma)):
            raise ConfigError("truncation bound below 0.05 sigma; rejection "
                              "sampling would be pathological")


def sample_truncated_gaussian(rng: np.random.Generator, sigma, bound, size) -> np.ndarray:
    """Rejection-sample N(0, sigma^2) truncated to [-bound, bound], exactly."""
    sigma = np.broadcast_to(np.asarray(sigma, dtype=np.float64), size).copy()
    bound = np.broadcast_to(np.asarray(bound, dtype=np.float64), size)
    out = sigma * rng.standard_normal(size)
    bad = np.abs(out) > bound
    while np.any(bad):
        out[bad] = sigma[bad] * rng.standard_normal(int(bad.sum()))
        bad = np.abs(out) > bound
    return out


@dataclass
class Trajectory:
    """A simulated run: states (n, 9), inputs (n-1, 3), sampling period dt (h)."""

    states: np.ndarray
    inputs: np.ndarray
    dt: float

    def __post_init__(self):
        if len(self.inputs) != len(self.states) - 1:
            raise ValueError("inputs must be one shorter than states")


def simulate(
    x0,
    inputs,
    dt: float,
    p: ProcessParams,
    dist: DisturbanceConfig | None = None,
    rng: np.random.Generator | None = None,
) -> Trajectory:
    """Integrate the process over an input sequence with additive disturbances.

    x_{k+1} = rk4_step(x_k, u_k, dt) + w_k, with w_k a truncated Gaussian
    draw per ``dist`` (deterministic given the seed). States must stay
    finite with positive temperatures, else the step index is reported.
    """
    inputs = np.asarray(inputs, dtype=np.float64)
    if inputs.ndim != 2 or inputs.shape[0] < 1:
        raise ValueError("input sequence must be a non-empty (n, 3) array")
    n = inputs.shape[0]
    if dist is not None:
        if rng is None:
            rng = np.random.default_rng(dist.seed)
        noise = sample_truncated_gaussian(rng, dist.sigma, dist.bound, (n, 9))
    else:
        noise = None
    states = np.empty((n + 1, 9))
    states[0] = np.asarray(x0, dtype=np.float64)
    for k in range(n):
        try:
            x_next = rk4_step(states[k], inputs[k], dt, p)
        except (ValueError, FloatingPointError) as exc:
            raise SimulationDivergedError(
                f"integration failed at step {k}: {exc}"
            ) from exc
        if noise is not None:
            x_next = x_next + noise[k]
        if not np.all(np.isfinite(x_next)) or np.any(x_next[list(TEMP_INDICES)] <= 0.0):
            raise SimulationDivergedError(
                f"state left the validity envelope at step {k}"
            )
        states[k + 1] = x_next
    return Trajectory(states, inputs.copy(), dt)
