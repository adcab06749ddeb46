"""Differentiable one-step map for the known subset of the process equations.

Only the three energy balances (the temperature ODEs) are treated as
known. The map advances the temperatures one RK4 step over the sampling
period while holding the composition components frozen at their input
values, and exposes an analytic vector-Jacobian product so training can
backpropagate through it. All values at this boundary are raw physical
units.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError
from .process import TEMP_INDICES, ProcessParams

#: Composition (non-temperature) state indices, in state order.
COMP_INDICES = (0, 1, 3, 4, 6, 7)

#: 1-based equation numbers of the temperature balances.
KNOWN_EQUATIONS = (3, 6, 9)


def equations_to_state_indices(equations) -> tuple:
    """Map 1-based ODE numbers to state indices; only {3, 6, 9} is supported."""
    eqs = tuple(sorted(int(e) for e in equations))
    if eqs != KNOWN_EQUATIONS:
        raise ConfigError(
            f"physics subset {list(eqs)} not supported; the analytic map covers "
            f"equations {list(KNOWN_EQUATIONS)} (the temperature balances)"
        )
    return TEMP_INDICES


def _recycle_with_grads(xA3, xB3, p: ProcessParams):
    """Overhead fractions and their derivatives w.r.t. (xA3, xB3)."""
    xC3 = 1.0 - xA3 - xB3
    unclipped = xC3 > 0.0
    s = unclipped.astype(np.float64)
    xC3 = np.where(unclipped, xC3, 0.0)
    den = p.alphaA * xA3 + p.alphaB * xB3 + p.alphaC * xC3
    dden_dA = p.alphaA - p.alphaC * s
    dden_dB = p.alphaB - p.alphaC * s
    inv = 1.0 / den
    inv2 = inv * inv
    xAr = p.alphaA * xA3 * inv
    xBr = p.alphaB * xB3 * inv
    xCr = p.alphaC * xC3 * inv
    grads = {
        ("A", "A"): p.alphaA * inv - p.alphaA * xA3 * dden_dA * inv2,
        ("A", "B"): -p.alphaA * xA3 * dden_dB * inv2,
        ("B", "A"): -p.alphaB * xB3 * dden_dA * inv2,
        ("B", "B"): p.alphaB * inv - p.alphaB * xB3 * dden_dB * inv2,
        ("C", "A"): -p.alphaC * s * inv - p.alphaC * xC3 * dden_dA * inv2,
        ("C", "B"): -p.alphaC * s * inv - p.alphaC * xC3 * dden_dB * inv2,
    }
    return (xAr, xBr, xCr), grads


@dataclass
class _StageCache:
    Fy: np.ndarray   # (N, 3, 3) Jacobian of the rate w.r.t. temperatures
    Fc: np.ndarray   # (N, 3, 6) Jacobian w.r.t. frozen compositions


class TemperaturePhysics:
    """One-step RK4 advance of [T1, T2, T3] with compositions held constant.

    Inputs are clamped into a physical envelope (temperatures at least
    ``t_floor`` kelvin, compositions in [0, 1]) before evaluation; the
    vector-Jacobian product is zero for clamped entries. This keeps the
    physics penalties finite while a half-trained model's rollouts still
    wander outside the physical domain.
    """

    T_FLOOR = 100.0

    def __init__(self, params: ProcessParams, dt: float, equations=KNOWN_EQUATIONS):
        if dt <= 0.0:
            raise ConfigError("physics step dt must be positive")
        self.params = params
        self.dt = float(dt)
        self.state_indices = equations_to_state_indices(equations)

    def _rate(self, y, c, u, want_grads: bool):
        """Temperature time-derivatives [f3, f6, f9] and optional Jacobians."""
        p = self.params
        T1, T2, T3 = y[:, 0], y[:, 1], y[:, 2]
        xA1, xB1, xA2, xB2, xA3, xB3 = (c[:, i] for i in range(6))
        Q1, Q2, Q3 = u[:, 0], u[:, 1], u[:, 2]
        if np.any(y <= 0.0):
            raise ValueError("non-positive temperature in physics map")

        e1_T1 = np.exp(-p.E1_over_R / T1)
        e2_T1 = np.exp(-p.E2_over_R / T1)
        e1_T2 = np.exp(-p.E1_over_R / T2)
        e2_T2 = np.exp(-p.E2_over_R / T2)
        a1 = p.dH1 / p.cp * p.k1
        a2 = p.dH2 / p.cp * p.k2
        kappa = (p.Fr + p.Fp) / (p.rho * p.cp * p.V3)
        (xAr, xBr, xCr), rg = _recycle_with_grads(xA3, xB3, p)

        f = np.empty_like(y)
        f[:, 0] = (p.F10 / p.V1 * (p.T10 - T1) + p.Fr / p.V1 * (T3 - T1)
                   - a1 * e1_T1 * xA1 - a2 * e2_T1 * xB1
                   + Q1 / (p.rho * p.cp * p.V1))
        f[:, 1] = (p.F1 / p.V2 * (T1 - T2) + p.F20 / p.V2 * (p.T20 - T2)
                   - a1 * e1_T2 * xA2 - a2 * e2_T2 * xB2
                   + Q2 / (p.rho * p.cp * p.V2))
        f[:, 2] = (p.F2 / p.V3 * (T2 - T3) + Q3 / (p.rho * p.cp * p.V3)
                   + kappa * (xAr * p.dHvap1 + xBr * p.dHvap2 + xCr * p.dHvap3))
        if not want_grads:
            return f, None

        n = y.shape[0]
        Fy = np.zeros((n, 3, 3))
        Fc = np.zeros((n, 3, 6))
        Fy[:, 0, 0] = (-p.F10 / p.V1 - p.Fr / p.V1
                       - a1 * xA1 * e1_T1 * p.E1_over_R / T1**2
                       - a2 * xB1 * e2_T1 * p.E2_over_R / T1**2)
        Fy[:, 0, 2] = p.Fr / p.V1
        Fy[:, 1, 0] = p.F1 / p.V2
        Fy[:, 1, 1] = (-p.F1 / p.V2 - p.F20 / p.V2
                       - a1 * xA2 * e1_T2 * p.E1_over_R / T2**2
                       - a2 * xB2 * e2_T2 * p.E2_over_R / T2**2)
        Fy[:, 2, 1] = p.F2 / p.V3
        Fy[:, 2, 2] = -p.F2 / p.V3
        Fc[:, 0, 0] = -a1 * e1_T1
        Fc[:, 0, 1] = -a2 * e2_T1
        Fc[:, 1, 2] = -a1 * e1_T2
        Fc[:, 1, 3] = -a2 * e2_T2
        Fc[:, 2, 4] = kappa * (p.dHvap1 * rg[("A", "A")]
                               + p.dHvap2 * rg[("B", "A")]
                               + p.dHvap3 * rg[("C", "A")])
        Fc[:, 2, 5] = kappa * (p.dHvap1 * rg[("A", "B")]
                               + p.dHvap2 * rg[("B", "B")]
                               + p.dHvap3 * rg[("C", "B")])
        return f, _StageCache(Fy, Fc)

    def predict(self, x_raw: np.ndarray, u_raw: np.ndarray):
        """Next-step temperatures from a full raw state.

        Returns (t_next (N, 3), cache). The cache carries the stage
        Jacobians; pass it to :meth:`vjp` to pull gradients back to the
        full 9-component input state.
        """
        x_raw = np.atleast_2d(np.asarray(x_raw, dtype=np.float64))
        u_raw = np.atleast_2d(np.asarray(u_raw, dtype=np.float64))
        if x_raw.shape[-1] != 9 or u_raw.shape[-1] != 3:
            raise ValueError("physics map expects (N, 9) states and (N, 3) inputs")
        c_in = x_raw[:, list(COMP_INDICES)]
        y_in = x_raw[:, list(self.state_indices)]
        y_ok = y_in >= self.T_FLOOR
        c_ok = (c_in >= 0.0) & (c_in <= 1.0)
        y = np.where(y_ok, y_in, self.T_FLOOR)
        c = np.clip(c_in, 0.0, 1.0)
        h = self.dt
        k1, s1 = self._rate(y, c, u_raw, True)
        k2, s2 = self._rate(y + 0.5 * h * k1, c, u_raw, True)
        k3, s3 = self._rate(y + 0.5 * h * k2, c, u_raw, True)
        k4, s4 = self._rate(y + h * k3, c, u_raw, True)
        y_next = y + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        return y_next, (s1, s2, s3, s4, y_ok, c_ok)

    def _total_jacobians(self, cache):
        """Compose stage Jacobians into d(y_next)/dy and d(y_next)/dc."""
        s1, s2, s3, s4, _, _ = cache
        h = self.dt
        n = s1.Fy.shape[0]
        eye = np.broadcast_to(np.eye(3), (n, 3, 3))
        A1y, A1c = s1.Fy, s1.Fc
        A2y = s2.Fy @ (eye + 0.5 * h * A1y)
        A2c = 0.5 * h * (s2.Fy @ A1c) + s2.Fc
        A3y = s3.Fy @ (eye + 0.5 * h * A2y)
        A3c = 0.5 * h * (s3.Fy @ A2c) + s3.Fc
        A4y = s4.Fy @ (eye + h * A3y)
        A4c = h * (s4.Fy @ A3c) + s4.Fc
        Jy = eye + (h / 6.0) * (A1y + 2.0 * A2y + 2.0 * A3y + A4y)
        Jc = (h / 6.0) * (A1c + 2.0 * A2c + 2.0 * A3c + A4c)
        return Jy, Jc

    def vjp(self, cache, grad_out: np.ndarray) -> np.ndarray:
        """Pull a (N, 3) cotangent on the predicted temperatures back to (N, 9)."""
        Jy, Jc = self._total_jacobians(cache)
        y_ok, c_ok = cache[4], cache[5]
        g = np.atleast_2d(np.asarray(grad_out, dtype=np.float64))
        dx = np.zeros((g.shape[0], 9))
        dx[:, list(self.state_indices)] = np.einsum("nij,ni->nj", Jy, g) * y_ok
        dx[:, list(COMP_INDICES)] = np.einsum("nij,ni->nj", Jc, g) * c_ok
        return dx
