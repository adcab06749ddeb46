"""Dense primal-dual interior-point solver for convex QCQPs.

Problems are expressed in factored sum-of-squares form,

    minimize    ||G0 w + g0||^2 + c0.w
    subject to  ||Gj w + gj||^2 + cj.w + dj <= 0     (quadratic)
                A_in w <= b_in                        (linear)

which keeps every Hessian assembly a stack of thin row blocks. The
epigraph reformulation of the estimator's min-max objective lands
exactly in this class: stage costs become the Gj blocks and the epigraph
variable enters through the linear parts.

The solver is an infeasible-start Mehrotra predictor-corrector method
with dense Cholesky factorizations; it is deterministic and controlled
by a single relative KKT tolerance.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from .errors import SolverError

_FTB = 0.995          # fraction-to-boundary factor
_EPS_FLOOR = 1e-300


@dataclass
class QcqpProblem:
    G0: np.ndarray
    g0: np.ndarray
    c0: np.ndarray
    Gq: list = field(default_factory=list)
    gq: list = field(default_factory=list)
    cq: list = field(default_factory=list)
    dq: list = field(default_factory=list)
    A_in: np.ndarray | None = None
    b_in: np.ndarray | None = None

    @property
    def n(self) -> int:
        return self.G0.shape[1]

    @property
    def n_quad(self) -> int:
        return len(self.Gq)

    @property
    def n_lin(self) -> int:
        return 0 if self.A_in is None else self.A_in.shape[0]

    def objective(self, w: np.ndarray) -> float:
        r = self.G0 @ w + self.g0
        return float(r @ r + self.c0 @ w)

    def grad_objective(self, w: np.ndarray) -> np.ndarray:
        return 2.0 * (self.G0.T @ (self.G0 @ w + self.g0)) + self.c0

    def quad_values(self, w: np.ndarray) -> np.ndarray:
        out = np.empty(self.n_quad)
        for j in range(self.n_quad):
            r = self.Gq[j] @ w + self.gq[j]
            out[j] = r @ r + self.cq[j] @ w + self.dq[j]
        return out

    def quad_jacobian(self, w: np.ndarray) -> np.ndarray:
        J = np.empty((self.n_quad, self.n))
        for j in range(self.n_quad):
            r = self.Gq[j] @ w + self.gq[j]
            J[j] = 2.0 * (self.Gq[j].T @ r) + self.cq[j]
        return J


@dataclass
class QcqpResult:
    w: np.ndarray
    objective: float
    kkt_residual: float
    iterations: int
    converged: bool
    lam: np.ndarray
    gam: np.ndarray


def _kkt_components(prob: QcqpProblem, w, lam, gam):
    """(stationarity, primal feasibility, complementarity), each normalized."""
    gf = prob.grad_objective(w)
    rd = gf.copy()
    q = np.zeros(0)
    if prob.n_quad:
        J = prob.quad_jacobian(w)
        rd += J.T @ lam
        q = prob.quad_values(w)
    lin = np.zeros(0)
    if prob.n_lin:
        rd += prob.A_in.T @ gam
        lin = prob.A_in @ w - prob.b_in
    stat = np.max(np.abs(rd)) / (1.0 + np.max(np.abs(gf)))
    pfeas = 0.0
    for j in range(prob.n_quad):
        r = prob.Gq[j] @ w + prob.gq[j]
        scale = 1.0 + r @ r + abs(prob.cq[j] @ w) + abs(prob.dq[j])
        pfeas = max(pfeas, max(0.0, q[j]) / scale)
    if prob.n_lin:
        scale = 1.0 + np.abs(prob.b_in) + np.abs(prob.A_in @ w)
        pfeas = max(pfeas, float(np.max(np.maximum(lin, 0.0) / scale)))
    fabs = 1.0 + abs(prob.objective(w))
    gap = 0.0
    if prob.n_quad:
        gap += float(np.abs(lam * q).sum())
    if prob.n_lin:
        gap += float(np.abs(gam * lin).sum())
    return float(stat), float(pfeas), float(gap / fabs)


def _kkt_residual(prob: QcqpProblem, w, lam, gam) -> float:
    return max(_kkt_components(prob, w, lam, gam))


def _cholesky_solve(K: np.ndarray, rhs_list):
    jitter = 0.0
    base = np.max(np.abs(np.diag(K))) + 1.0
    for attempt in range(8):
        try:
            cf = scipy.linalg.cho_factor(
                K + jitter * np.eye(K.shape[0]), lower=True, check_finite=False
            )
            return [scipy.linalg.cho_solve(cf, r, check_finite=False)
                    for r in rhs_list], cf
        except scipy.linalg.LinAlgError:
            jitter = base * 10.0 ** (-14 + 2 * attempt)
    raise SolverError("KKT matrix factorization failed")


def solve_qcqp(
    prob: QcqpProblem,
    tol: float = 1e-8,
    max_iter: int = 100,
    w0: np.ndarray | None = None,
) -> QcqpResult:
    """Solve to a relative KKT residual of ``tol``.

    On hitting the iteration cap the best iterate is returned flagged
    non-converged. A stalled run with persistent primal infeasibility
    raises :class:`SolverError`.
    """
    n, mq, ml = prob.n, prob.n_quad, prob.n_lin
    w = np.zeros(n) if w0 is None else np.asarray(w0, dtype=np.float64).copy()

    if mq == 0 and ml == 0:
        K = 2.0 * (prob.G0.T @ prob.G0)
        rhs = -(2.0 * (prob.G0.T @ prob.g0) + prob.c0)
        (w,), _ = _cholesky_solve(K, [rhs])
        kkt = _kkt_residual(prob, w, np.zeros(0), np.zeros(0))
        return QcqpResult(w, prob.objective(w), kkt, 1, kkt <= tol,
                          np.zeros(0), np.zeros(0))

    H0 = 2.0 * (prob.G0.T @ prob.G0)
    q = prob.quad_values(w)
    s_q = np.maximum(-q, 1e-2 * (1.0 + np.abs(q)))
    lam = np.ones(mq)
    if ml:
        lin = prob.A_in @ w - prob.b_in
        s_l = np.maximum(-lin, 1e-2 * (1.0 + np.abs(lin)))
        gam = np.ones(ml)
    else:
        s_l = np.zeros(0)
        gam = np.zeros(0)

    best = (np.inf, w.copy(), lam.copy(), gam.copy())
    it = 0
    for it in range(1, max_iter + 1):
        q = prob.quad_values(w)
        J = prob.quad_jacobian(w)
        gf = prob.grad_objective(w)
        stat, pfeas, gap = _kkt_components(prob, w, lam, gam)
        kkt = max(stat, pfeas, gap)
        if not np.isfinite(kkt):
            raise SolverError("interior-point iterates became non-finite")
        if kkt < best[0]:
            best = (kkt, w.copy(), lam.copy(), gam.copy())
        if kkt <= tol:
            return QcqpResult(w, prob.objective(w), kkt, it, True, lam, gam)

        mu = float(lam @ s_q + (gam @ s_l if ml else 0.0)) / (mq + ml)
        dual_norm = max(lam.max(initial=0.0), gam.max(initial=0.0))
        if pfeas > np.sqrt(tol) and (mu < 1e-14 or dual_norm > 1e12):
            raise SolverError(
                "dual iterates diverged with persistent primal infeasibility; "
                "the constraints appear inconsistent"
            )

        rp_q = q + s_q
        lin = prob.A_in @ w - prob.b_in if ml else np.zeros(0)
        rp_l = lin + s_l

        # KKT matrix: H0 + sum 2 lam_j Gj'Gj + J' (lam/s) J + A' (gam/s) A
        blocks = [np.sqrt(lam[j] / s_q[j]) * J[j][None, :] for j in range(mq)]
        for j in range(mq):
            if lam[j] > 0.0:
                blocks.append(np.sqrt(2.0 * lam[j]) * prob.Gq[j])
        if ml:
            blocks.append(np.sqrt(gam / s_l)[:, None] * prob.A_in)
        rows = np.vstack(blocks)
        K = H0 + rows.T @ rows

        def assemble_rhs(sigma_mu_q, sigma_mu_l, corr_q, corr_l):
            vq = sigma_mu_q / s_q - corr_q / s_q + (lam / s_q) * rp_q
            rhs = -gf - J.T @ vq
            if ml:
                vl = sigma_mu_l / s_l - corr_l / s_l + (gam / s_l) * rp_l
                rhs -= prob.A_in.T @ vl
            return rhs

        def recover(dw, sigma_mu_q, sigma_mu_l, corr_q, corr_l):
            ds_q = -rp_q - J @ dw
            dlam = -lam + sigma_mu_q / s_q - corr_q / s_q - (lam / s_q) * ds_q
            if ml:
                ds_l = -rp_l - prob.A_in @ dw
                dgam = -gam + sigma_mu_l / s_l - corr_l / s_l - (gam / s_l) * ds_l
            else:
                ds_l = np.zeros(0)
                dgam = np.zeros(0)
            return ds_q, dlam, ds_l, dgam

        def max_step(vals, dirs):
            neg = dirs < 0.0
            if not np.any(neg):
                return 1.0
            return float(min(1.0, _FTB * np.min(-vals[neg] / dirs[neg])))

        zq = np.zeros(mq)
        zl = np.zeros(ml)
        # predictor
        (dw_aff,), cf = _cholesky_solve(K, [assemble_rhs(zq, zl, zq, zl)])
        ds_q_a, dlam_a, ds_l_a, dgam_a = recover(dw_aff, zq, zl, zq, zl)
        alpha_aff = min(
            max_step(s_q, ds_q_a), max_step(lam, dlam_a),
            max_step(s_l, ds_l_a) if ml else 1.0,
            max_step(gam, dgam_a) if ml else 1.0,
        )
        mu_aff = (
            (lam + alpha_aff * dlam_a) @ (s_q + alpha_aff * ds_q_a)
            + ((gam + alpha_aff * dgam_a) @ (s_l + alpha_aff * ds_l_a) if ml else 0.0)
        ) / (mq + ml)
        sigma = float(np.clip((max(mu_aff, 0.0) / mu) ** 3, 1e-8, 1.0 - 1e-8))

        # corrector
        corr_q = ds_q_a * dlam_a
        corr_l = ds_l_a * dgam_a if ml else zl
        rhs = assemble_rhs(sigma * mu * np.ones(mq),
                           sigma * mu * np.ones(ml) if ml else zl,
                           corr_q, corr_l)
        dw = scipy.linalg.cho_solve(cf, rhs, check_finite=False)
        ds_q, dlam, ds_l, dgam = recover(
            dw, sigma * mu * np.ones(mq),
            sigma * mu * np.ones(ml) if ml else zl, corr_q, corr_l
        )
        alpha = min(
            max_step(s_q, ds_q), max_step(lam, dlam),
            max_step(s_l, ds_l) if ml else 1.0,
            max_step(gam, dgam) if ml else 1.0,
        )
        w = w + alpha * dw
        s_q = np.maximum(s_q + alpha * ds_q, _EPS_FLOOR)
        lam = np.maximum(lam + alpha * dlam, _EPS_FLOOR)
        if ml:
            s_l = np.maximum(s_l + alpha * ds_l, _EPS_FLOOR)
            gam = np.maximum(gam + alpha * dgam, _EPS_FLOOR)

    kkt, w_b, lam_b, gam_b = best
    cur = _kkt_residual(prob, w, lam, gam)
    if cur < kkt:
        kkt, w_b, lam_b, gam_b = cur, w, lam, gam
    return QcqpResult(w_b, prob.objective(w_b), kkt, it, kkt <= tol, lam_b, gam_b)
