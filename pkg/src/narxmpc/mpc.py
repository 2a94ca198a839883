"""Stabilizing nonlinear MPC on the integral/derivative-augmented model.

Single-shooting transcription in the MPC command v: the augmented dynamics
are rolled out over the horizon, the quadratic deviation cost and its exact
gradient come from one reverse sweep, and the terminal equality chi_Np =
chi_bar is handled by an augmented-Lagrangian outer loop around an L-BFGS
inner solver.  Actuator bounds act on the predicted input (an affine
function of the decision through the integrator/derivator states) via
multiplier-corrected quadratic hinges, plus feasibility clipping of the
applied first move.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import least_squares, minimize

from .augmentation import (SetpointTuning, lift_equilibrium, split_augmented,
                           tune_for_setpoint)
from .nnarx import Array, InputBox, NnarxModel, eta_batch

log = logging.getLogger(__name__)


def _sym_psd(M, name):
    M = np.atleast_2d(np.asarray(M, float))
    if not np.allclose(M, M.T, atol=1e-12):
        raise ValueError(f"{name} must be symmetric")
    if np.min(np.linalg.eigvalsh(M)) < -1e-10:
        raise ValueError(f"{name} must be positive semidefinite")
    return M


@dataclass
class MpcWeights:
    """Quadratic weights: Q = diag(Q_x, Q_xi, Q_theta) on the augmented
    state, R = diag(R_e, R_u) on the output [y; u]."""

    Q_x: Array
    Q_xi: Array
    Q_theta: Array
    R_e: Array
    R_u: Array

    def __post_init__(self):
        self.Q_x = _sym_psd(self.Q_x, "Q_x")
        self.Q_xi = _sym_psd(self.Q_xi, "Q_xi")
        self.Q_theta = _sym_psd(self.Q_theta, "Q_theta")
        self.R_e = _sym_psd(self.R_e, "R_e")
        self.R_u = _sym_psd(self.R_u, "R_u")
        # the derivator target is arbitrary, so its weight is numerical
        # regularization only and must not dominate the real objectives
        top = float(np.max(np.linalg.eigvalsh(self.Q_theta)))
        if top > min(np.max(np.linalg.eigvalsh(self.Q_x)),
                     np.max(np.linalg.eigvalsh(self.Q_xi))):
            raise ValueError("Q_theta must stay small next to Q_x and Q_xi")

    @staticmethod
    def defaults_for(model: NnarxModel, R_e: float = 10.0, R_u: float = 0.1,
                     Q_xi: float = 1.0, Q_theta: float = 1e-5) -> "MpcWeights":
        """Window-state weight built from N copies of diag(R_e, R_u), one
        per [y; u] slot, alongside the output weights themselves."""
        m, p = model.m, model.p
        block = np.diag(np.concatenate([np.full(p, R_e), np.full(m, R_u)]))
        Q_x = np.kron(np.eye(model.N), block)
        return MpcWeights(Q_x, Q_xi * np.eye(m), Q_theta * np.eye(m),
                          R_e * np.eye(p), R_u * np.eye(m))

    def to_dict(self) -> dict:
        return {k: [[float(v) for v in row] for row in getattr(self, k)]
                for k in ("Q_x", "Q_xi", "Q_theta", "R_e", "R_u")}


@dataclass
class MpcConfig:
    horizon: int = 50
    control_horizon: int | None = None      # None: equal to the horizon
    terminal_tol: float = 1e-6
    box_tol: float = 1e-9
    inner_gtol: float = 1e-7
    inner_maxiter: int = 500
    outer_maxiter: int = 20
    penalty_eq0: float = 1.0
    penalty_growth: float = 10.0
    penalty_box0: float = 1e3
    relax_terminal: bool = False
    terminal_penalty_weight: float = 1e6
    mu_tilde: float | None = None
    mu_tilde_ratio: float = 0.56

    def __post_init__(self):
        if self.horizon < 1:
            raise ValueError("horizon must be at least 1")
        nc = self.control_horizon
        if nc is not None and not 1 <= nc <= self.horizon:
            raise ValueError("control horizon must lie in [1, horizon]")

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}


@dataclass
class Targets:
    """Equilibrium lift the controller steers to."""

    y_ref: Array
    chi_bar: Array
    v_bar: Array
    zeta_bar: Array
    mu: Array


@dataclass
class OcpProblem:
    model: NnarxModel
    horizon: int
    chi0: Array
    targets: Targets
    weights: MpcWeights
    box: InputBox | None = None
    terminal_tol: float = 1e-6
    control_horizon: int | None = None

    def __post_init__(self):
        if self.horizon < 1:
            raise ValueError("horizon must be at least 1")


@dataclass
class OcpSolution:
    v_seq: Array
    chi_traj: Array
    zeta_traj: Array
    cost: float
    terminal_residual: float
    max_box_violation: float
    inner_evals: int
    outer_iterations: int
    converged: bool


# ---------------------------------------------------------------------------
# Rollout with exact reverse-sweep gradient


def _forward(problem: OcpProblem, v_seq: Array):
    """Shooting rollout of the augmented dynamics; caches activations."""
    model = problem.model
    tg = problem.targets
    n, m, p = model.n, model.m, model.p
    q = m + p
    Np = problem.horizon
    mu = np.atleast_2d(tg.mu)
    x, xi, th = split_augmented(model, problem.chi0)
    xs = np.empty((Np + 1, n)); xis = np.empty((Np + 1, m)); ths = np.empty((Np + 1, m))
    ys = np.empty((Np + 1, p)); us = np.empty((Np + 1, m))
    hiddens = []
    xs[0], xis[0], ths[0] = x, xi, th
    for i in range(Np):
        y = x[n - q:n - m]
        u = xi + v_seq[i] - th
        e, hidden = eta_batch(model.params, x[None, :], u[None, :],
                              keep_hidden=True)
        e = e[0]
        hiddens.append(hidden)
        ys[i], us[i] = y, u
        x_new = np.empty(n)
        x_new[:n - q] = x[q:]
        x_new[n - q:n - m] = e
        x_new[n - m:] = u
        xi_new = xi + mu @ (tg.y_ref - y)
        x, xi, th = x_new, xi_new, v_seq[i].copy()
        xs[i + 1], xis[i + 1], ths[i + 1] = x, xi, th
    ys[Np] = x[n - q:n - m]
    us[Np] = xi + tg.v_bar - th
    return xs, xis, ths, ys, us, hiddens


def _eta_reverse(params, hidden, g_eta):
    """Pull one or many output adjoints back through the network; rows of
    g_eta are independent seeds.  Returns (d/dx rows, d/du rows)."""
    single = g_eta.ndim == 1
    G = np.atleast_2d(g_eta)
    DH = G @ params.U0
    GU = np.zeros((G.shape[0], params.m))
    for l in range(len(params.layers) - 1, -1, -1):
        layer = params.layers[l]
        hl = hidden[l + 1][0]
        deriv = 1.0 - hl * hl if layer.activation == "tanh" else np.ones_like(hl)
        DPre = DH * deriv
        GU += DPre @ layer.W
        DH = DPre @ layer.U
    if single:
        return DH[0], GU[0]
    return DH, GU


def _rollout(problem: OcpProblem, v_seq: Array, lam_eq, rho_eq,
             lam_lo, lam_hi, rho_box, want_grad: bool):
    """Objective (quadratic cost + multiplier terms) and d/dv in one sweep.

    Returns (L, grad, aux) where aux carries the pure quadratic cost, the
    terminal gap, predicted trajectories and the worst input violation.
    """
    model = problem.model
    w = problem.weights
    tg = problem.targets
    n, m, p = model.n, model.m, model.p
    q = m + p
    Np = problem.horizon
    x_bar, xi_bar, th_bar = split_augmented(model, tg.chi_bar)
    y_bar, u_bar = tg.zeta_bar[:p], tg.zeta_bar[p:]
    mu = np.atleast_2d(tg.mu)
    box = problem.box

    xs, xis, ths, ys, us, hiddens = _forward(problem, v_seq)
    dx = xs - x_bar; dxi = xis - xi_bar; dth = ths - th_bar
    dy = ys - y_bar; du = us - u_bar
    cost = (np.einsum("ij,jk,ik->", dx, w.Q_x, dx)
            + np.einsum("ij,jk,ik->", dxi, w.Q_xi, dxi)
            + np.einsum("ij,jk,ik->", dth, w.Q_theta, dth)
            + np.einsum("ij,jk,ik->", dy, w.R_e, dy)
            + np.einsum("ij,jk,ik->", du, w.R_u, du))

    h = np.concatenate([dx[Np], dxi[Np], dth[Np]])
    L = cost + float(lam_eq @ h) + 0.5 * rho_eq * float(h @ h)

    viol = 0.0
    g_hi = g_lo = None
    hinges = box is not None and rho_box > 0.0
    if box is not None:
        g_hi = us[:Np] - box.upper
        g_lo = box.lower - us[:Np]
        viol = float(max(0.0, g_hi.max(initial=-np.inf),
                         g_lo.max(initial=-np.inf)))
        if hinges:
            a_hi = np.maximum(0.0, lam_hi + rho_box * g_hi)
            a_lo = np.maximum(0.0, lam_lo + rho_box * g_lo)
            L += float(np.sum(a_hi * a_hi - lam_hi * lam_hi)
                       + np.sum(a_lo * a_lo - lam_lo * lam_lo)) / (2.0 * rho_box)

    aux = {"cost": float(cost), "h": h, "xs": xs, "xis": xis, "ths": ths,
           "ys": ys, "us": us, "violation": viol, "g_hi": g_hi, "g_lo": g_lo}
    if not want_grad:
        return L, None, aux

    gv = np.zeros((Np, m))
    w_eq = lam_eq + rho_eq * h
    gu_T = 2.0 * w.R_u @ du[Np]
    ax = 2.0 * w.Q_x @ dx[Np] + w_eq[:n]
    ax[n - q:n - m] += 2.0 * w.R_e @ dy[Np]
    axi = 2.0 * w.Q_xi @ dxi[Np] + w_eq[n:n + m] + gu_T
    ath = 2.0 * w.Q_theta @ dth[Np] + w_eq[n + m:] - gu_T

    for i in range(Np - 1, -1, -1):
        gu = 2.0 * w.R_u @ du[i] + ax[n - m:]
        if hinges:
            gu = gu + np.maximum(0.0, lam_hi[i] + rho_box * g_hi[i]) \
                    - np.maximum(0.0, lam_lo[i] + rho_box * g_lo[i])
        gx_eta, gu_eta = _eta_reverse(model.params, hiddens[i],
                                      ax[n - q:n - m])
        gu = gu + gu_eta
        ax_prev = np.zeros(n)
        ax_prev[q:] = ax[:n - q]
        ax_prev += gx_eta
        ax_prev += 2.0 * w.Q_x @ dx[i]
        ax_prev[n - q:n - m] += 2.0 * w.R_e @ dy[i] - mu.T @ axi
        axi_prev = axi + 2.0 * w.Q_xi @ dxi[i] + gu
        gv[i] = gu + ath
        ath = 2.0 * w.Q_theta @ dth[i] - gu
        ax, axi = ax_prev, axi_prev
    return L, gv, aux


def evaluate_cost(problem: OcpProblem, v_seq: Array):
    """Pure deviation cost of a command sequence and its gradient."""
    v_seq = np.asarray(v_seq, float).reshape(problem.horizon, problem.model.m)
    zeros_eq = np.zeros(problem.model.n + 2 * problem.model.m)
    zb = np.zeros((problem.horizon, problem.model.m))
    L, gv, aux = _rollout(problem, v_seq, zeros_eq, 0.0, zb, zb, 0.0, True)
    return aux["cost"], gv


def _terminal_jacobian(problem: OcpProblem, v_seq: Array):
    """Terminal gap h = chi_Np - chi_bar and its exact Jacobian d h / d v,
    via one reverse sweep carrying all n + 2m adjoint rows at once."""
    model = problem.model
    tg = problem.targets
    n, m, p = model.n, model.m, model.p
    q = m + p
    Np = problem.horizon
    na = n + 2 * m
    mu = np.atleast_2d(tg.mu)
    xs, xis, ths, ys, us, hiddens = _forward(problem, v_seq)
    h = np.concatenate([xs[Np] - tg.chi_bar[:n],
                        xis[Np] - tg.chi_bar[n:n + m],
                        ths[Np] - tg.chi_bar[n + m:]])
    AX = np.zeros((na, n)); AX[:n, :] = np.eye(n)
    AXI = np.zeros((na, m)); AXI[n:n + m, :] = np.eye(m)
    ATH = np.zeros((na, m)); ATH[n + m:, :] = np.eye(m)
    J = np.zeros((na, Np * m))
    for i in range(Np - 1, -1, -1):
        GXe, GUe = _eta_reverse(model.params, hiddens[i], AX[:, n - q:n - m])
        GU = AX[:, n - m:] + GUe
        AX_prev = np.zeros((na, n))
        AX_prev[:, q:] = AX[:, :n - q]
        AX_prev += GXe
        AX_prev[:, n - q:n - m] -= AXI @ mu
        J[:, i * m:(i + 1) * m] = GU + ATH
        AXI = AXI + GU
        ATH = -GU
        AX = AX_prev
    return h, J, us


def _forward_sensitivities(problem: OcpProblem, v_seq: Array, n_free: int):
    """Forward sensitivity pass: terminal gap h with d h / d v plus every
    predicted input u_i with d u_i / d v, for the first n_free moves."""
    from .nnarx import eta_jacobians
    model = problem.model
    tg = problem.targets
    n, m, p = model.n, model.m, model.p
    q = m + p
    Np = problem.horizon
    D = n_free * m
    mu = np.atleast_2d(tg.mu)
    x, xi, th = split_augmented(model, problem.chi0)
    Sx = np.zeros((n, D)); Sxi = np.zeros((m, D)); Sth = np.zeros((m, D))
    us = np.empty((Np, m))
    Ju = np.zeros((Np * m, D))
    for i in range(Np):
        u = xi + v_seq[i] - th
        us[i] = u
        Su = Sxi - Sth
        if i < n_free:
            Su = Su.copy()
            Su[:, i * m:(i + 1) * m] += np.eye(m)
        Ju[i * m:(i + 1) * m] = Su
        Jx, Juu = eta_jacobians(model.params, x, u)
        Se = Jx @ Sx + Juu @ Su
        e = eta_batch(model.params, x[None, :], u[None, :])[0]
        Sx_new = np.zeros_like(Sx)
        Sx_new[:n - q] = Sx[q:]
        Sx_new[n - q:n - m] = Se
        Sx_new[n - m:] = Su
        Sxi = Sxi - mu @ Sx[n - q:n - m]
        x_new = np.empty(n)
        x_new[:n - q] = x[q:]
        x_new[n - q:n - m] = e
        x_new[n - m:] = u
        xi = xi + mu @ (tg.y_ref - x[n - q:n - m])
        x, th = x_new, v_seq[i].copy()
        Sx = Sx_new
        Sth = np.zeros((m, D))
        if i < n_free:
            Sth[:, i * m:(i + 1) * m] = np.eye(m)
    h = np.concatenate([x - tg.chi_bar[:n], xi - tg.chi_bar[n:n + m],
                        th - tg.chi_bar[n + m:]])
    Jh = np.vstack([Sx, Sxi, Sth])
    return h, Jh, us, Ju


def solve_ocp(problem: OcpProblem, config: MpcConfig | None = None,
              warm_start: Array | None = None) -> OcpSolution:
    """Augmented-Lagrangian solve of the horizon problem.

    Outer iterations update the terminal-equality multipliers and the input
    hinge multipliers; each inner problem is smooth and goes to L-BFGS with
    the exact reverse-sweep gradient.  A Gauss-Newton restoration step on
    the terminal gap (using its exact Jacobian) closes the feasibility gap
    the quasi-Newton inner solver leaves behind, so the penalty never has
    to grow into ill-conditioning.  Converged means terminal gap below
    tolerance, worst predicted input violation below the box tolerance,
    and the cost settled across outer iterations.
    """
    config = config or MpcConfig(horizon=problem.horizon)
    model = problem.model
    m = model.m
    Np = problem.horizon
    Nc = problem.control_horizon or config.control_horizon or Np
    tg = problem.targets
    if warm_start is not None:
        v = np.asarray(warm_start, float).reshape(Np, m).copy()
    else:
        v = np.tile(tg.v_bar, (Np, 1))

    n_eq = model.n + 2 * m
    lam_eq = np.zeros(n_eq)
    rho_eq = (2.0 * config.terminal_penalty_weight if config.relax_terminal
              else config.penalty_eq0)
    lam_lo = np.zeros((Np, m))
    lam_hi = np.zeros((Np, m))
    rho_box = config.penalty_box0
    evals = 0
    prev_h = np.inf
    prev_viol = np.inf
    prev_cost = None
    converged = False
    outer_used = 0

    def pack(vfull):
        return vfull[:Nc].ravel()

    def unpack(z):
        vfull = np.tile(tg.v_bar, (Np, 1))
        vfull[:Nc] = z.reshape(Nc, m)
        return vfull

    def _residual_only(z):
        return _terminal_jacobian(problem, unpack(z))[0]

    def _residual_jac(z):
        return _terminal_jacobian(problem, unpack(z))[1][:, :Nc * m]

    def _feas_metrics(vfull):
        h, _, us = _terminal_jacobian(problem, vfull)
        viol = 0.0
        if problem.box is not None:
            viol = max(float(problem.box.violation(u)) for u in us[:Np])
        return float(np.max(np.abs(h))), viol

    w_box = 1e2  # soft hinge weight inside the feasibility subproblem

    def _feas_residual(z):
        if problem.box is None:
            return _residual_only(z)
        h, _, us, _ = _forward_sensitivities(problem, unpack(z), Nc)
        r_hi = np.sqrt(w_box) * np.maximum(0.0, us - problem.box.upper)
        r_lo = np.sqrt(w_box) * np.maximum(0.0, problem.box.lower - us)
        return np.concatenate([h, r_hi.ravel(), r_lo.ravel()])

    def _feas_residual_jac(z):
        if problem.box is None:
            return _residual_jac(z)
        h, Jh, us, Ju = _forward_sensitivities(problem, unpack(z), Nc)
        act_hi = (us - problem.box.upper > 0).ravel()[:, None]
        act_lo = (problem.box.lower - us > 0).ravel()[:, None]
        return np.vstack([Jh,
                          np.sqrt(w_box) * act_hi * Ju,
                          -np.sqrt(w_box) * act_lo * Ju])

    def restore(vfull):
        """Trust-region least squares on the joint feasibility system
        (terminal gap plus input hinge overshoot).  The terminal manifold
        can fold (rank-deficient Jacobian away from it), so a stalled solve
        retries from deterministic alternative starts.  A restored point is
        only adopted when it improves the terminal gap without materially
        worsening the input box; otherwise the plain multiplier loop keeps
        the lead."""
        hn_ref, viol_ref = _feas_metrics(vfull)
        base = pack(vfull)
        starts = [base]
        esc = np.random.default_rng(97)
        starts += [base + s * esc.standard_normal(base.size)
                   for s in (0.3, 1.0, 3.0)]
        viol_cap = max(viol_ref, 0.5 * config.box_tol)
        best, best_hn = vfull, hn_ref
        for z0 in starts:
            ls = least_squares(_feas_residual, z0, jac=_feas_residual_jac,
                               method="trf", ftol=None, gtol=None,
                               xtol=2.3e-16, max_nfev=120)
            cand = unpack(ls.x)
            hn_c, viol_c = _feas_metrics(cand)
            if (hn_c < best_hn and viol_c <= viol_cap) or (
                    hn_c < problem.terminal_tol and viol_c < config.box_tol):
                best, best_hn = cand, hn_c
            if best_hn < 0.01 * problem.terminal_tol:
                break
        return best

    for outer in range(1, config.outer_maxiter + 1):
        outer_used = outer

        def fun(z):
            nonlocal evals
            evals += 1
            L, gv, _ = _rollout(problem, unpack(z), lam_eq, rho_eq,
                                lam_lo, lam_hi, rho_box, True)
            return L, gv[:Nc].ravel()

        res = minimize(fun, pack(v), jac=True, method="L-BFGS-B",
                       options={"maxiter": config.inner_maxiter,
                                "maxcor": 20,
                                "gtol": config.inner_gtol,
                                "ftol": 1e-15})
        v = unpack(res.x)
        _, _, aux = _rollout(problem, v, lam_eq, rho_eq, lam_lo, lam_hi,
                             rho_box, False)
        h = aux["h"]
        hn = float(np.max(np.abs(h)))
        viol = aux["violation"]
        if hn < problem.terminal_tol and viol < config.box_tol:
            converged = True
            break
        if config.relax_terminal:
            # soft terminal: no multiplier refinement on the equality and
            # no restoration; only tighten the box if needed
            if viol < config.box_tol:
                break
            lam_hi = np.maximum(0.0, lam_hi + rho_box * aux["g_hi"])
            lam_lo = np.maximum(0.0, lam_lo + rho_box * aux["g_lo"])
            if viol > 0.25 * prev_viol:
                rho_box = min(rho_box * config.penalty_growth, 1e12)
            prev_viol = viol
            continue
        # multiplier refinement from the inner minimizer, then feasibility
        # restoration to hand the next round a terminally feasible start.
        # The multiplier only integrates the gap on sufficient decrease;
        # otherwise the penalty grows, a stall-proof safeguard.
        if hn <= 0.25 * prev_h or hn < 10.0 * problem.terminal_tol:
            lam_eq = np.clip(lam_eq + rho_eq * h, -1e8, 1e8)
        else:
            rho_eq = min(rho_eq * config.penalty_growth, 1e8)
        prev_h = min(prev_h, hn)
        if problem.box is not None:
            lam_hi = np.maximum(0.0, lam_hi + rho_box * aux["g_hi"])
            lam_lo = np.maximum(0.0, lam_lo + rho_box * aux["g_lo"])
            if viol > 0.25 * prev_viol:
                rho_box = min(rho_box * config.penalty_growth, 1e12)
            prev_viol = viol
        v = restore(v)
        _, _, aux = _rollout(problem, v, lam_eq, rho_eq, lam_lo, lam_hi,
                             rho_box, False)
        if (prev_cost is not None
                and np.max(np.abs(aux["h"])) < problem.terminal_tol
                and aux["violation"] < config.box_tol
                and abs(aux["cost"] - prev_cost) <= 1e-9 * (1.0 + abs(prev_cost))):
            converged = True
            break
        prev_cost = aux["cost"]

    zeta = np.hstack([aux["ys"], aux["us"]])
    chi = np.hstack([aux["xs"], aux["xis"], aux["ths"]])
    return OcpSolution(v_seq=v, chi_traj=chi, zeta_traj=zeta,
                       cost=aux["cost"],
                       terminal_residual=float(np.max(np.abs(aux["h"]))),
                       max_box_violation=aux["violation"],
                       inner_evals=evals, outer_iterations=outer_used,
                       converged=converged)


# ---------------------------------------------------------------------------
# Receding-horizon controller


class MpcController:
    """Stateful receding-horizon wrapper: one instance owns its integrator
    and derivator states plus the shifted warm start.  Distinct instances
    are independent; a single instance is not thread-safe."""

    def __init__(self, model: NnarxModel, box: InputBox | None = None,
                 weights: MpcWeights | None = None,
                 config: MpcConfig | None = None):
        self.model = model
        self.box = box
        self.weights = weights or MpcWeights.defaults_for(model)
        self.config = config or MpcConfig()
        self.targets: Targets | None = None
        self.tuning: SetpointTuning | None = None
        self.xi: Array | None = None
        self.theta: Array | None = None
        self._warm: Array | None = None

    def set_reference(self, y_ref, u_guess=None) -> SetpointTuning:
        """Re-solve the equilibrium, re-run the certification chain and
        re-tune the integral gain for a new setpoint.  The integrator state
        is preserved across the switch; the warm start is not."""
        guess = u_guess
        if guess is None:
            guess = self.targets.zeta_bar[self.model.p:] if self.targets \
                else np.zeros(self.model.m)
        tuning = tune_for_setpoint(self.model, y_ref, guess, box=self.box,
                                   mu_tilde=self.config.mu_tilde,
                                   mu_tilde_ratio=self.config.mu_tilde_ratio)
        chi_bar, v_bar, zeta_bar = lift_equilibrium(self.model,
                                                    tuning.equilibrium)
        self.targets = Targets(np.asarray(y_ref, float).ravel(), chi_bar,
                               v_bar, zeta_bar, tuning.gain.mu)
        self.tuning = tuning
        self._warm = None
        if self.xi is None:
            self.xi = tuning.equilibrium.u.copy()
            self.theta = v_bar.copy()
        return tuning

    def initialize_state(self, xi, theta=None) -> None:
        self.xi = np.asarray(xi, float).ravel().copy()
        if theta is not None:
            self.theta = np.asarray(theta, float).ravel().copy()
        elif self.targets is not None:
            self.theta = self.targets.v_bar.copy()

    def step(self, x: Array):
        """Solve the horizon problem from the measured window state, apply
        the first move, advance the augmentation states, and shift the
        warm start.  A non-converged solve is applied best-effort with a
        logged warning."""
        if self.targets is None:
            raise RuntimeError("set_reference must be called first")
        model, tg = self.model, self.targets
        x = np.asarray(x, float).ravel()
        chi = np.concatenate([x, self.xi, self.theta])
        problem = OcpProblem(model, self.config.horizon, chi, tg,
                             self.weights, self.box,
                             terminal_tol=self.config.terminal_tol,
                             control_horizon=self.config.control_horizon)
        warm_residual = None
        if self._warm is not None:
            _, _, aux = _rollout(problem, self._warm,
                                 np.zeros(model.n + 2 * model.m), 0.0,
                                 np.zeros((self.config.horizon, model.m)),
                                 np.zeros((self.config.horizon, model.m)),
                                 1.0, False)
            warm_residual = float(np.max(np.abs(aux["h"])))
        t0 = time.perf_counter()
        sol = solve_ocp(problem, self.config, warm_start=self._warm)
        wall = time.perf_counter() - t0
        if not sol.converged:
            log.warning("OCP not converged (terminal %.2e, violation %.2e); "
                        "applying best-effort move", sol.terminal_residual,
                        sol.max_box_violation)
        v0 = sol.v_seq[0]
        u = self.xi + v0 - self.theta
        if self.box is not None:
            u = self.box.clip(u)
        v_eff = u - self.xi + self.theta
        y = x[model.y_slot]
        self.xi = self.xi + np.atleast_2d(tg.mu) @ (tg.y_ref - y)
        self.theta = v_eff.copy()
        self._warm = np.vstack([sol.v_seq[1:], tg.v_bar[None, :]])
        diag = {
            "cost": sol.cost,
            "terminal_residual": sol.terminal_residual,
            "max_box_violation": sol.max_box_violation,
            "inner_evals": sol.inner_evals,
            "outer_iterations": sol.outer_iterations,
            "converged": sol.converged,
            "warm_start_terminal_residual": warm_residual,
            "wall_time": wall,
            "v_applied": v_eff.copy(),
        }
        return u, diag
