"""Disturbance-estimation offset-free MPC, the comparison baseline.

The window model is augmented with a constant fictitious disturbance acting
on the input channel (every input the network sees, the window slots
included, is shifted by d).  A moving-horizon estimator fits d to the
recent closed-loop record, the setpoint equilibrium is recomputed for the
shifted model, and a terminal-constraint MPC on the plain window state
applies its first move directly; there is no integral or derivative
augmentation in this scheme.
"""

from __future__ import annotations

import logging
import time
from collections import deque
from dataclasses import dataclass

import numpy as np
from scipy.optimize import least_squares, minimize

from .augmentation import (EquilibriumTriple, InfeasibleSetpoint,
                           solve_equilibrium)
from .mpc import MpcConfig, MpcWeights
from .nnarx import Array, InputBox, NnarxModel, eta_batch, eta_jacobians

log = logging.getLogger(__name__)


@dataclass
class MheConfig:
    window: int = 20
    residual_weight: float = 1.0
    prior_weight: float = 1.0
    gtol: float = 1e-10
    maxiter: int = 200

    def __post_init__(self):
        if self.window < 1:
            raise ValueError("estimation window must be at least 1")
        if self.residual_weight <= 0 or self.prior_weight < 0:
            raise ValueError("weights must be nonnegative, residual positive")


def offset_step(model: NnarxModel, x: Array, u: Array, d: Array) -> Array:
    """One state update of the disturbance-augmented model: the network is
    evaluated with d added to the exogenous input and to every input slot
    of the window, while the window keeps storing the nominal input."""
    P_u = model.state_input_selector()
    e = eta_batch(model.params, (x + P_u @ d)[None, :], (u + d)[None, :])[0]
    q = model.m + model.p
    out = np.empty_like(x)
    out[:x.shape[0] - q] = x[q:]
    out[-q:-model.m] = e
    out[-model.m:] = u
    return out


def mhe_cost_grad(model: NnarxModel, x0: Array, u_win: Array, y_win: Array,
                  d: Array, d_prior: Array, config: MheConfig):
    """Windowed least-squares objective in the constant input disturbance,
    with its exact gradient from a reverse sweep through the rollout.

    x0 seeds the window state right before the estimation span; u_win holds
    the applied inputs over the span and y_win the measured outputs they
    produced (one step later each).
    """
    n, m, p = model.n, model.m, model.p
    q = m + p
    K = len(u_win)
    P_u = model.state_input_selector()
    x = x0.copy()
    hiddens = []
    errs = np.empty((K, p))
    for k in range(K):
        e, hidden = eta_batch(model.params, (x + P_u @ d)[None, :],
                              (u_win[k] + d)[None, :], keep_hidden=True)
        hiddens.append(hidden)
        errs[k] = e[0] - y_win[k]
        x_new = np.empty(n)
        x_new[:n - q] = x[q:]
        x_new[n - q:n - m] = e[0]
        x_new[n - m:] = u_win[k]
        x = x_new
    w = config.residual_weight
    cost = w * float(np.sum(errs * errs)) \
        + config.prior_weight * float((d - d_prior) @ (d - d_prior))
    gd = 2.0 * config.prior_weight * (d - d_prior)
    GX = np.zeros(n)
    from .mpc import _eta_reverse
    for k in range(K - 1, -1, -1):
        dE = 2.0 * w * errs[k] + GX[n - q:n - m]
        gx_eta, gu_eta = _eta_reverse(model.params, hiddens[k], dE)
        gd += gu_eta + P_u.T @ gx_eta
        GX_new = np.zeros(n)
        GX_new[q:] = GX[:n - q]
        GX_new += gx_eta
        GX = GX_new
    return cost, gd


def mhe_estimate(model: NnarxModel, x0: Array, u_win: Array, y_win: Array,
                 d_prior: Array, config: MheConfig):
    """Minimize the windowed residual over the constant disturbance.

    Returns (d_hat, converged); a failed solve keeps the prior.
    """
    d_prior = np.asarray(d_prior, float).ravel()

    def fun(d):
        return mhe_cost_grad(model, x0, u_win, y_win, d, d_prior, config)

    res = minimize(fun, d_prior.copy(), jac=True, method="L-BFGS-B",
                   options={"maxiter": config.maxiter, "gtol": config.gtol,
                            "ftol": 1e-15})
    if not np.all(np.isfinite(res.x)):
        log.warning("disturbance estimation diverged; keeping prior")
        return d_prior.copy(), False
    return res.x.copy(), bool(res.success or res.status == 0)


def deb_target(model: NnarxModel, y_ref, d_hat, u_guess,
               box: InputBox | None = None) -> EquilibriumTriple:
    """Setpoint equilibrium of the disturbance-shifted model; the returned
    input is the nominal (applied) one and must respect the box."""
    return solve_equilibrium(model, y_ref, u_guess, box=box,
                             input_offset=d_hat)


# ---------------------------------------------------------------------------
# OCP on the plain window state with the input sequence as decision


def _deb_rollout(model: NnarxModel, x0, u_seq, d, x_bar, u_bar, y_bar,
                 weights: MpcWeights, lam_eq, rho_eq, want_grad):
    n, m, p = model.n, model.m, model.p
    q = m + p
    Np = len(u_seq)
    P_u = model.state_input_selector()
    x = np.asarray(x0, float).copy()
    xs = np.empty((Np + 1, n))
    xs[0] = x
    hiddens = []
    for i in range(Np):
        e, hidden = eta_batch(model.params, (x + P_u @ d)[None, :],
                              (u_seq[i] + d)[None, :], keep_hidden=True)
        hiddens.append(hidden)
        x_new = np.empty(n)
        x_new[:n - q] = x[q:]
        x_new[n - q:n - m] = e[0]
        x_new[n - m:] = u_seq[i]
        x = x_new
        xs[i + 1] = x
    dx = xs - x_bar
    dy = xs[:, n - q:n - m] - y_bar
    du = u_seq - u_bar
    cost = (np.einsum("ij,jk,ik->", dx, weights.Q_x, dx)
            + np.einsum("ij,jk,ik->", dy, weights.R_e, dy)
            + np.einsum("ij,jk,ik->", du, weights.R_u, du))
    h = xs[Np] - x_bar
    L = cost + float(lam_eq @ h) + 0.5 * rho_eq * float(h @ h)
    if not want_grad:
        return L, None, cost, h, xs

    from .mpc import _eta_reverse
    gu = np.zeros((Np, m))
    ax = 2.0 * weights.Q_x @ dx[Np] + lam_eq + rho_eq * h
    ax[n - q:n - m] += 2.0 * weights.R_e @ dy[Np]
    for i in range(Np - 1, -1, -1):
        gx_eta, gu_eta = _eta_reverse(model.params, hiddens[i],
                                      ax[n - q:n - m])
        gu[i] = 2.0 * weights.R_u @ du[i] + ax[n - m:] + gu_eta
        ax_prev = np.zeros(n)
        ax_prev[q:] = ax[:n - q]
        ax_prev += gx_eta
        ax_prev += 2.0 * weights.Q_x @ dx[i]
        ax_prev[n - q:n - m] += 2.0 * weights.R_e @ dy[i]
        ax = ax_prev
    return L, gu, cost, h, xs


def _deb_terminal_system(model: NnarxModel, x0, u_seq, d, x_bar):
    """Terminal gap and its Jacobian d h / d u by forward sensitivities."""
    n, m, p = model.n, model.m, model.p
    q = m + p
    Np = len(u_seq)
    D = Np * m
    P_u = model.state_input_selector()
    x = np.asarray(x0, float).copy()
    S = np.zeros((n, D))
    for i in range(Np):
        Jx, Ju = eta_jacobians(model.params, x + P_u @ d, u_seq[i] + d)
        Si = np.zeros((m, D)); Si[:, i * m:(i + 1) * m] = np.eye(m)
        Se = Jx @ S + Ju @ Si
        e = eta_batch(model.params, (x + P_u @ d)[None, :],
                      (u_seq[i] + d)[None, :])[0]
        S_new = np.zeros_like(S)
        S_new[:n - q] = S[q:]
        S_new[n - q:n - m] = Se
        S_new[n - m:] = Si
        x_new = np.empty(n)
        x_new[:n - q] = x[q:]
        x_new[n - q:n - m] = e
        x_new[n - m:] = u_seq[i]
        x, S = x_new, S_new
    return x - x_bar, S


def solve_deb_ocp(model: NnarxModel, x0, target: EquilibriumTriple, d_hat,
                  weights: MpcWeights, config: MpcConfig,
                  box: InputBox | None = None, warm_start=None):
    """Terminal-constraint MPC on the disturbance-augmented window model.

    The decision variable is the input sequence itself, so the actuator box
    becomes plain bound constraints of the inner solver; the terminal
    equality is handled by the same multiplier-plus-restoration scheme as
    the primary controller.
    """
    n, m = model.n, model.m
    Np = config.horizon
    d = np.asarray(d_hat, float).ravel()
    x_bar, u_bar, y_bar = target.x, target.u, target.y
    if warm_start is not None:
        u_seq = np.asarray(warm_start, float).reshape(Np, m).copy()
    else:
        u_seq = np.tile(u_bar, (Np, 1))
    if box is not None:
        u_seq = np.clip(u_seq, box.lower, box.upper)
        bounds = [(lo, hi) for lo, hi in
                  zip(np.tile(box.lower, Np), np.tile(box.upper, Np))]
    else:
        bounds = None

    lam_eq = np.zeros(n)
    rho_eq = config.penalty_eq0
    evals = 0
    prev_h = np.inf
    prev_cost = None
    converged = False
    outer_used = 0

    def restore(u_flat):
        def resid(z):
            return _deb_terminal_system(model, x0, z.reshape(Np, m), d, x_bar)[0]

        def jac(z):
            return _deb_terminal_system(model, x0, z.reshape(Np, m), d, x_bar)[1]

        ls_bounds = (-np.inf, np.inf) if box is None else \
            (np.tile(box.lower, Np), np.tile(box.upper, Np))
        ls = least_squares(resid, u_flat, jac=jac, bounds=ls_bounds,
                           method="trf", ftol=None, gtol=None,
                           xtol=2.3e-16, max_nfev=120)
        before = float(np.max(np.abs(resid(u_flat))))
        after = float(np.max(np.abs(ls.fun)))
        return (ls.x, after) if after < before else (u_flat, before)

    for outer in range(1, config.outer_maxiter + 1):
        outer_used = outer

        def fun(z):
            nonlocal evals
            evals += 1
            L, gu, _, _, _ = _deb_rollout(model, x0, z.reshape(Np, m), d,
                                          x_bar, u_bar, y_bar, weights,
                                          lam_eq, rho_eq, True)
            return L, gu.ravel()

        res = minimize(fun, u_seq.ravel(), jac=True, method="L-BFGS-B",
                       bounds=bounds,
                       options={"maxiter": config.inner_maxiter, "maxcor": 20,
                                "gtol": config.inner_gtol, "ftol": 1e-15})
        u_seq = res.x.reshape(Np, m)
        _, _, cost, h, xs = _deb_rollout(model, x0, u_seq, d, x_bar, u_bar,
                                         y_bar, weights, lam_eq, rho_eq, False)
        hn = float(np.max(np.abs(h)))
        if hn < config.terminal_tol:
            converged = True
            break
        if hn <= 0.25 * prev_h or hn < 10.0 * config.terminal_tol:
            lam_eq = np.clip(lam_eq + rho_eq * h, -1e8, 1e8)
        else:
            rho_eq = min(rho_eq * config.penalty_growth, 1e8)
        prev_h = min(prev_h, hn)
        u_flat, hn_rest = restore(u_seq.ravel())
        u_seq = u_flat.reshape(Np, m)
        _, _, cost, h, xs = _deb_rollout(model, x0, u_seq, d, x_bar, u_bar,
                                         y_bar, weights, lam_eq, rho_eq, False)
        if (prev_cost is not None and np.max(np.abs(h)) < config.terminal_tol
                and abs(cost - prev_cost) <= 1e-9 * (1.0 + abs(prev_cost))):
            converged = True
            break
        prev_cost = cost

    return {"u_seq": u_seq, "cost": cost, "x_traj": xs,
            "terminal_residual": float(np.max(np.abs(h))),
            "inner_evals": evals, "outer_iterations": outer_used,
            "converged": converged}


class DebMpcController:
    """Stateful baseline controller: keeps the measurement history for the
    estimator, the current disturbance estimate, targets and warm start."""

    def __init__(self, model: NnarxModel, box: InputBox | None = None,
                 weights: MpcWeights | None = None,
                 config: MpcConfig | None = None,
                 mhe: MheConfig | None = None):
        self.model = model
        self.box = box
        self.weights = weights or MpcWeights.defaults_for(model)
        self.config = config or MpcConfig()
        self.mhe = mhe or MheConfig()
        self.y_ref: Array | None = None
        self.d_hat = np.zeros(model.m)
        self.target: EquilibriumTriple | None = None
        self._warm: Array | None = None
        # pairs (u_j, y_{j+1}): each applied input with the output sample it
        # produced; long enough to seed the window before the span
        self._history: deque = deque(maxlen=self.mhe.window + model.N)

    def set_reference(self, y_ref) -> None:
        self.y_ref = np.asarray(y_ref, float).ravel()
        self._warm = None

    def initialize_history(self, u, y) -> None:
        """Fill the record with a standing (u, y) pair, the steady state
        the loop starts from."""
        self._history.clear()
        for _ in range(self._history.maxlen):
            self._history.append((np.asarray(u, float).ravel().copy(),
                                  np.asarray(y, float).ravel().copy()))

    def _estimate(self):
        H = len(self._history)
        N = self.model.N
        if H < N + 1:
            return self.d_hat, True
        span = min(self.mhe.window, H - N)
        us = np.array([u for u, _ in self._history])
        ys = np.array([y for _, y in self._history])  # ys[j] follows us[j]
        s = H - span
        # seed window at the span start: the N pairs right before it; the
        # output produced by us[j] is exactly the y entry stored with it
        x0 = np.concatenate([np.concatenate([ys[s - N + i], us[s - N + i]])
                             for i in range(N)])
        return mhe_estimate(self.model, x0, us[s:], ys[s:], self.d_hat,
                            self.mhe)

    def step(self, x: Array):
        """Estimate the disturbance, recompute the target, solve the
        horizon problem, apply the first input."""
        if self.y_ref is None:
            raise RuntimeError("set_reference must be called first")
        t0 = time.perf_counter()
        d_new, est_ok = self._estimate()
        if est_ok:
            self.d_hat = d_new
        guess = self.target.u if self.target is not None else \
            (self.box.clip(np.zeros(self.model.m)) if self.box is not None
             else np.zeros(self.model.m))
        try:
            self.target = deb_target(self.model, self.y_ref, self.d_hat,
                                     guess, box=self.box)
        except (InfeasibleSetpoint, RuntimeError) as exc:
            if self.target is None:
                raise
            log.warning("target recomputation failed (%s); keeping previous",
                        exc)
        sol = solve_deb_ocp(self.model, x, self.target, self.d_hat,
                            self.weights, self.config, box=self.box,
                            warm_start=self._warm)
        if not sol["converged"]:
            log.warning("baseline OCP not converged (terminal %.2e)",
                        sol["terminal_residual"])
        u = sol["u_seq"][0].copy()
        if self.box is not None:
            u = self.box.clip(u)
        self._warm = np.vstack([sol["u_seq"][1:], self.target.u[None, :]])
        wall = time.perf_counter() - t0
        diag = {
            "cost": sol["cost"],
            "terminal_residual": sol["terminal_residual"],
            "inner_evals": sol["inner_evals"],
            "outer_iterations": sol["outer_iterations"],
            "converged": sol["converged"],
            "d_hat": self.d_hat.copy(),
            "estimator_converged": est_ok,
            "wall_time": wall,
        }
        return u, diag

    def observe(self, u_applied, y_measured) -> None:
        """Record the applied input and the output it produced (the sample
        measured at the next step)."""
        self._history.append((np.asarray(u_applied, float).ravel().copy(),
                              np.asarray(y_measured, float).ravel().copy()))
