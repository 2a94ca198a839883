"""Equilibrium analysis and integral/derivative augmentation.

Given a window model, this module solves setpoint equilibria, checks the
linearization (stability, reachability/observability, dc gain), tunes the
integral-action gain so the linearized augmented loop stays stable, and
steps the augmented dynamics

    x+  = f(x, u),   u = xi + (v - theta)
    xi+ = xi + mu (y_ref - C x)
    th+ = v

whose output is zeta = [y; u].  At steady state the derivative action
v - theta vanishes and the integrator alone supplies the input, which is
what removes the tracking offset under model mismatch.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .nnarx import (Array, InputBox, NnarxModel, eta_batch, eta_jacobians,
                    jacobians, output, step)

_SCHUR_MARGIN = 1e-9
_RANK_RTOL = 1e-8


class EquilibriumNotFound(RuntimeError):
    pass


class InfeasibleSetpoint(ValueError):
    pass


class TuningFailure(RuntimeError):
    pass


@dataclass
class EquilibriumTriple:
    x: Array
    u: Array
    y: Array
    residual: float
    iterations: int = 0


@dataclass
class StructuralReport:
    reachable: bool
    observable: bool
    observable_nonzero_modes: bool
    dc_gain_nonsingular: bool
    dc_gain: Array

    @property
    def ok(self) -> bool:
        # Full Kalman observability is structurally impossible for window
        # realizations with more than one lag: the oldest block reaches
        # future outputs only through a single functional, a rank deficit
        # carried entirely by the nilpotent flush modes at 0.  Synthesis
        # therefore gates on observability of the nonzero modes.
        return (self.reachable and self.observable_nonzero_modes
                and self.dc_gain_nonsingular)


@dataclass
class IntegratorGain:
    mu: Array
    mu_tilde: float
    dc_gain: Array
    loop_spectral_radius: float


@dataclass
class MuMaxResult:
    mu_tilde_max: float
    mu_max: Array
    dc_gain: Array


# ---------------------------------------------------------------------------
# Equilibria


def solve_equilibrium(model: NnarxModel, y_ref, u_guess,
                      box: InputBox | None = None, input_offset=None,
                      tol: float = 1e-11, max_iter: int = 100) -> EquilibriumTriple:
    """Equilibrium (x, u, y) for a constant setpoint by damped Newton on u.

    The window structure makes the equilibrium state the stacked repetition
    of [y_ref; u], so the fixed-point condition reduces to the input-sized
    root problem y_ref = eta(x(y_ref, u), u).  With input_offset d the model
    is evaluated at u + d everywhere (window slots included) while the
    returned state stores the nominal input.
    """
    y_ref = np.asarray(y_ref, float).ravel()
    u = np.asarray(u_guess, float).ravel().copy()
    d = np.zeros(model.m) if input_offset is None else \
        np.asarray(input_offset, float).ravel()
    P_u = model.state_input_selector()

    def residual(u_val):
        x_eval = model.stacked_state(y_ref, u_val + d)
        return eta_batch(model.params, x_eval[None, :], (u_val + d)[None, :])[0] - y_ref

    g = residual(u)
    iters = 0
    while np.max(np.abs(g)) >= tol:
        if iters >= max_iter:
            raise EquilibriumNotFound(
                f"no equilibrium for setpoint {y_ref} within {max_iter} "
                f"iterations (residual {np.max(np.abs(g)):.2e})")
        x_eval = model.stacked_state(y_ref, u + d)
        Jx, Ju = eta_jacobians(model.params, x_eval, u + d)
        J = Jx @ P_u + Ju
        try:
            du = np.linalg.solve(J, -g)
        except np.linalg.LinAlgError:
            # saturated regions can flatten the steady-state gain; take the
            # least-squares direction and let the damping sort it out
            du = np.linalg.lstsq(J, -g, rcond=None)[0]
            if not np.any(du):
                raise EquilibriumNotFound(
                    "steady-state gain vanished; no Newton direction")
        # step halving on residual increase; tanh plateaus need damping
        scale = 1.0
        g_norm = np.linalg.norm(g)
        for _ in range(20):
            u_try = u + scale * du
            g_try = residual(u_try)
            if np.linalg.norm(g_try) < g_norm:
                break
            scale *= 0.5
        u, g = u_try, g_try
        iters += 1
    if box is not None and not box.contains(u):
        raise InfeasibleSetpoint(
            f"equilibrium input {u} outside the admissible box")
    x_bar = model.stacked_state(y_ref, u)
    return EquilibriumTriple(x=x_bar, u=u, y=y_ref.copy(),
                             residual=float(np.max(np.abs(g))), iterations=iters)


def linearize(model: NnarxModel, eq: EquilibriumTriple):
    """Jacobians of the state update at the equilibrium point."""
    return jacobians(model, eq.x, eq.u)


# ---------------------------------------------------------------------------
# Linear analysis


def check_schur(A: Array):
    """(is Schur stable, spectral radius) via the eigenvalue spectrum."""
    A = np.atleast_2d(np.asarray(A, float))
    if A.shape[0] != A.shape[1]:
        raise ValueError("square matrix required")
    rho = float(np.max(np.abs(np.linalg.eigvals(A)))) if A.size else 0.0
    return rho < 1.0 - _SCHUR_MARGIN, rho


def _numeric_rank(M: Array) -> int:
    s = np.linalg.svd(M, compute_uv=False)
    if s.size == 0 or s[0] == 0.0:
        return 0
    return int(np.sum(s > _RANK_RTOL * s[0]))


def check_structural(A: Array, B: Array, C: Array) -> StructuralReport:
    """Reachability/observability by Kalman-matrix rank, observability of
    the nonzero modes by the eigenvector test, and nonsingularity of the dc
    gain C (I - A)^-1 B (assumes a Schur A for the dc-gain form)."""
    A = np.atleast_2d(np.asarray(A, float))
    B = np.atleast_2d(np.asarray(B, float))
    C = np.atleast_2d(np.asarray(C, float))
    n = A.shape[0]
    blocks_r = [B]
    blocks_o = [C]
    for _ in range(n - 1):
        blocks_r.append(A @ blocks_r[-1])
        blocks_o.append(blocks_o[-1] @ A)
    reach = _numeric_rank(np.hstack(blocks_r)) == n
    obs = _numeric_rank(np.vstack(blocks_o)) == n
    obs_nonzero = _observable_nonzero_modes(A, C)
    try:
        G = C @ np.linalg.solve(np.eye(n) - A, B)
    except np.linalg.LinAlgError as exc:
        raise RuntimeError(
            "I - A is singular, contradicting the Schur precondition") from exc
    s = np.linalg.svd(G, compute_uv=False)
    nonsing = bool(s.size and s[0] > 0.0 and s[-1] > _RANK_RTOL * s[0])
    return StructuralReport(reach, obs, obs_nonzero, nonsing, G)


def _observable_nonzero_modes(A: Array, C: Array, zero_tol: float = 1e-8) -> bool:
    """Eigenvector (PBH) observability restricted to modes away from zero;
    the window-flush modes at 0 vanish in finitely many steps and cannot
    hide asymptotic behavior."""
    n = A.shape[0]
    eigvals = np.linalg.eigvals(A)
    scale = max(1.0, float(np.max(np.abs(eigvals))) if n else 1.0)
    for lam in eigvals:
        if abs(lam) <= zero_tol * scale:
            continue
        M = np.vstack([A - lam * np.eye(n), C])
        s = np.linalg.svd(M, compute_uv=False)
        if s[-1] <= _RANK_RTOL * s[0]:
            return False
    return True


def loop_matrix(A: Array, B: Array, C: Array, mu: Array) -> Array:
    """Linearized augmented closed loop on (dx, dxi); with v held constant
    the derivator state settles in one step and drops out."""
    A = np.atleast_2d(np.asarray(A, float))
    B = np.atleast_2d(np.asarray(B, float))
    C = np.atleast_2d(np.asarray(C, float))
    n, m = A.shape[0], B.shape[1]
    M = np.zeros((n + m, n + m))
    M[:n, :n] = A
    M[:n, n:] = B
    M[n:, :n] = -np.atleast_2d(mu) @ C
    M[n:, n:] = np.eye(m)
    return M


def compute_gain(A: Array, B: Array, C: Array, mu_tilde: float) -> IntegratorGain:
    """Integrator gain mu = mu_tilde * dc_gain^-1 and the spectral radius it
    gives the linearized augmented loop."""
    if mu_tilde <= 0.0:
        raise ValueError("mu_tilde must be positive")
    rep = check_structural(A, B, C)
    if not rep.dc_gain_nonsingular:
        raise ValueError("dc gain is singular; integral action cannot be tuned")
    mu = mu_tilde * np.linalg.inv(rep.dc_gain)
    _, rho = check_schur(loop_matrix(A, B, C, mu))
    return IntegratorGain(mu=mu, mu_tilde=float(mu_tilde), dc_gain=rep.dc_gain,
                          loop_spectral_radius=rho)


def find_mu_max(A: Array, B: Array, C: Array, resolution: float = 1e-4,
                interior_points: int = 10, floor: float = 1e-6,
                cap: float = 1e6) -> MuMaxResult:
    """Largest mu_tilde whose whole interval (0, mu_tilde] keeps the loop
    stable, by bisection with an interior grid re-check per candidate
    (stability need not be monotone in the gain)."""
    rep = check_structural(A, B, C)
    if not rep.dc_gain_nonsingular:
        raise TuningFailure("dc gain is singular")
    G_inv = np.linalg.inv(rep.dc_gain)

    def stable_at(mt: float) -> bool:
        ok, _ = check_schur(loop_matrix(A, B, C, mt * G_inv))
        return ok

    def stable_interval(mt: float) -> bool:
        return all(stable_at(mt * k / interior_points)
                   for k in range(1, interior_points + 1))

    if not stable_interval(floor):
        raise TuningFailure(
            f"no stabilizing integral gain found down to mu_tilde={floor}")
    lo = floor
    hi = floor
    while hi < cap and stable_interval(hi):
        lo = hi
        hi *= 2.0
    if hi >= cap:
        mu_tilde_max = lo
    else:
        while hi - lo > resolution:
            mid = 0.5 * (lo + hi)
            if stable_interval(mid):
                lo = mid
            else:
                hi = mid
        mu_tilde_max = lo
    return MuMaxResult(mu_tilde_max=float(mu_tilde_max),
                       mu_max=mu_tilde_max * G_inv, dc_gain=rep.dc_gain)


# ---------------------------------------------------------------------------
# Augmented dynamics


def split_augmented(model: NnarxModel, chi: Array):
    n, m = model.n, model.m
    chi = np.asarray(chi, float).ravel()
    return chi[:n], chi[n:n + m], chi[n + m:n + 2 * m]


def augmented_step(model: NnarxModel, chi: Array, v: Array, y_ref: Array,
                   mu: Array):
    """One step of the integral/derivative-augmented dynamics; returns the
    next augmented state and the output [y; u]."""
    x, xi, th = split_augmented(model, chi)
    v = np.asarray(v, float).ravel()
    y = output(model, x)
    u = xi + v - th
    x_next = step(model, x, u)
    xi_next = xi + np.atleast_2d(mu) @ (np.asarray(y_ref, float).ravel() - y)
    chi_next = np.concatenate([x_next, xi_next, v])
    zeta = np.concatenate([y, u])
    return chi_next, zeta


def lift_equilibrium(model: NnarxModel, eq: EquilibriumTriple, v_bar=None):
    """Augmented targets (chi_bar, v_bar, zeta_bar) for an equilibrium; the
    derivator target is free and fixed to the input value so the derivative
    contribution vanishes at steady state."""
    v_bar = eq.u.copy() if v_bar is None else np.asarray(v_bar, float).ravel()
    chi_bar = np.concatenate([eq.x, eq.u, v_bar])
    zeta_bar = np.concatenate([eq.y, eq.u])
    return chi_bar, v_bar, zeta_bar


# ---------------------------------------------------------------------------
# Per-setpoint tuning


@dataclass
class SetpointTuning:
    y_ref: Array
    equilibrium: EquilibriumTriple
    open_loop_radius: float
    structural: StructuralReport
    mu_search: MuMaxResult
    gain: IntegratorGain

    def to_dict(self) -> dict:
        return {
            "y_ref": [float(v) for v in self.y_ref],
            "u_eq": [float(v) for v in self.equilibrium.u],
            "residual": self.equilibrium.residual,
            "newton_iterations": self.equilibrium.iterations,
            "open_loop_spectral_radius": self.open_loop_radius,
            "reachable": self.structural.reachable,
            "observable": self.structural.observable,
            "observable_nonzero_modes": self.structural.observable_nonzero_modes,
            "dc_gain_nonsingular": self.structural.dc_gain_nonsingular,
            "dc_gain": [[float(v) for v in row] for row in self.structural.dc_gain],
            "mu_tilde_max": self.mu_search.mu_tilde_max,
            "mu_max": [[float(v) for v in row] for row in self.mu_search.mu_max],
            "mu_tilde": self.gain.mu_tilde,
            "mu": [[float(v) for v in row] for row in self.gain.mu],
            "loop_spectral_radius": self.gain.loop_spectral_radius,
        }


def tune_for_setpoint(model: NnarxModel, y_ref, u_guess,
                      box: InputBox | None = None, mu_tilde: float | None = None,
                      mu_tilde_ratio: float = 0.56,
                      resolution: float = 1e-4) -> SetpointTuning:
    """Full per-setpoint synthesis: equilibrium, linearized checks, gain.

    The gain defaults to a fixed fraction of the stability boundary; an
    explicit mu_tilde overrides that.  Raises TuningFailure when any
    certification step fails.
    """
    eq = solve_equilibrium(model, y_ref, u_guess, box=box)
    Ad, Bd = linearize(model, eq)
    schur_ok, rho = check_schur(Ad)
    if not schur_ok:
        raise TuningFailure(
            f"open-loop linearization is not Schur (rho={rho:.6f})")
    rep = check_structural(Ad, Bd, model.C)
    if not rep.ok:
        raise TuningFailure(
            f"structural checks failed: reachable={rep.reachable} "
            f"observable_nonzero_modes={rep.observable_nonzero_modes} "
            f"dc_gain={rep.dc_gain_nonsingular}")
    search = find_mu_max(Ad, Bd, model.C, resolution=resolution)
    mt = mu_tilde if mu_tilde is not None else mu_tilde_ratio * search.mu_tilde_max
    gain = compute_gain(Ad, Bd, model.C, mt)
    if gain.loop_spectral_radius >= 1.0 - _SCHUR_MARGIN:
        raise TuningFailure(
            f"chosen gain does not certify stability "
            f"(rho={gain.loop_spectral_radius:.6f})")
    return SetpointTuning(np.asarray(y_ref, float).ravel(), eq, rho, rep,
                          search, gain)
