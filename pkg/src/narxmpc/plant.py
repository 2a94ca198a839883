"""Ground-truth water-heater simulator.

Two-state nonlinear ODE: served-water temperature T and burner-plate
temperature T_m.  The gas flow w_c heats the plate by radiation, the plate
heats the water by exchange, and the water demand w / inlet temperature T_i
act as unmeasured disturbances.  Integration is fixed-step RK4 at the
control sampling period.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .nnarx import Array, InputBox
from .training import IoSequence


class SimulationFault(RuntimeError):
    pass


DEFAULT_INPUT_BOX = InputBox([0.05], [0.18])


@dataclass
class PlantParams:
    A_t: float = math.pi / 4.0      # tank cross-section, m^2
    rho_w: float = 997.8            # water density, kg/m^3
    c_w: float = 4180.0             # water specific heat, J/(kg K)
    M_m: float = 617.32             # plate mass, kg
    c_m: float = 481.0              # metal specific heat, J/(kg K)
    sigma: float = 5.67e-8          # radiation coefficient, W/(m^2 K^4)
    k_lm: float = 3326.4            # plate/water heat exchange, kg/(s^3 K)
    T_f: float = 1200.0             # flame temperature, K
    k_f: float = 8.0                # flame/plate heat exchange, m^2 s/kg
    z_w: float = 2.0                # water level, m
    w_nom: float = 1.0              # nominal water demand, kg/s
    T_i_nom: float = 298.0          # nominal inlet temperature, K

    def __post_init__(self):
        for name, value in self.__dict__.items():
            if value <= 0:
                raise ValueError(f"plant parameter {name} must be positive")


@dataclass
class PlantState:
    T: float
    T_m: float

    def __post_init__(self):
        if self.T <= 0 or self.T_m <= 0:
            raise ValueError("absolute temperatures must be positive")

    def as_array(self) -> Array:
        return np.array([self.T, self.T_m])

    @staticmethod
    def from_array(x) -> "PlantState":
        return PlantState(float(x[0]), float(x[1]))


@dataclass
class DisturbanceProfile:
    """Piecewise-constant schedules (start time, value) for the water demand
    w and the inlet temperature T_i; zero-order hold between points."""

    w: list = field(default_factory=lambda: [(0.0, 1.0)])
    T_i: list = field(default_factory=lambda: [(0.0, 298.0)])

    def __post_init__(self):
        for name, sched in (("w", self.w), ("T_i", self.T_i)):
            times = [t for t, _ in sched]
            if times != sorted(set(times)):
                raise ValueError(f"{name} schedule times must be strictly increasing")
        if any(v <= 0 for _, v in self.w):
            raise ValueError("water demand must stay positive")

    @staticmethod
    def _value(sched, t: float) -> float:
        out = sched[0][1]
        for start, value in sched:
            if t >= start:
                out = value
            else:
                break
        return out

    def at(self, t: float):
        return self._value(self.w, t), self._value(self.T_i, t)

    @staticmethod
    def nominal(params: PlantParams | None = None) -> "DisturbanceProfile":
        p = params or PlantParams()
        return DisturbanceProfile([(0.0, p.w_nom)], [(0.0, p.T_i_nom)])


def derivatives(x_p: Array, w_c: float, d, params: PlantParams) -> Array:
    """Time derivatives (dT/dt, dT_m/dt) for gas flow w_c and disturbances
    d = (w, T_i)."""
    T, T_m = float(x_p[0]), float(x_p[1])
    w, T_i = d
    dT = (w * (T_i - T) + params.k_lm * params.A_t / params.c_w * (T_m - T)) \
        / (params.rho_w * params.A_t * params.z_w)
    dTm = (-params.k_lm * params.A_t * (T_m - T)
           + params.sigma * params.k_f * w_c * (params.T_f ** 4 - T_m ** 4)) \
        / (params.M_m * params.c_m)
    return np.array([dT, dTm])


def step(x_p: Array, w_c: float, profile: DisturbanceProfile, t: float,
         params: PlantParams, tau_s: float, substeps: int = 8,
         box: InputBox | None = DEFAULT_INPUT_BOX) -> Array:
    """Advance one sampling period with classical RK4.

    The requested gas flow is clamped into the actuator box before
    integration; disturbances are held at their scheduled value over each
    internal substep.
    """
    if tau_s <= 0 or substeps < 1:
        raise ValueError("require tau_s > 0 and substeps >= 1")
    if box is not None:
        w_c = float(box.clip([w_c])[0])
    h = tau_s / substeps
    x = np.asarray(x_p, float).copy()
    for i in range(substeps):
        d = profile.at(t + i * h)
        k1 = derivatives(x, w_c, d, params)
        k2 = derivatives(x + 0.5 * h * k1, w_c, d, params)
        k3 = derivatives(x + 0.5 * h * k2, w_c, d, params)
        k4 = derivatives(x + h * k3, w_c, d, params)
        x = x + (h / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
    if not np.all(np.isfinite(x)):
        raise SimulationFault(f"non-finite plant state at t={t}")
    return x


def equilibrium(w_c: float, w: float, T_i: float,
                params: PlantParams) -> PlantState:
    """Steady state for constant gas flow and disturbances, by bisection on
    the plate temperature."""
    alpha = params.k_lm * params.A_t / params.c_w

    def water_temp(T_m):
        # dT/dt = 0 given T_m
        return (w * T_i + alpha * T_m) / (w + alpha)

    def residual(T_m):
        T = water_temp(T_m)
        return (-params.k_lm * params.A_t * (T_m - T)
                + params.sigma * params.k_f * w_c * (params.T_f ** 4 - T_m ** 4))

    lo, hi = T_i, params.T_f
    r_lo, r_hi = residual(lo), residual(hi)
    if r_lo * r_hi > 0:
        raise SimulationFault("no steady state bracketed in [T_i, T_f]")
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        r_mid = residual(mid)
        if r_lo * r_mid <= 0:
            hi = mid
        else:
            lo, r_lo = mid, r_mid
        if hi - lo < 1e-12 * max(1.0, abs(mid)):
            break
    T_m = 0.5 * (lo + hi)
    return PlantState(water_temp(T_m), T_m)


def open_loop_experiment(u_seq, profile: DisturbanceProfile,
                         x_p0: PlantState | Array, params: PlantParams,
                         tau_s: float, substeps: int = 8,
                         noise_std: float = 0.0, seed: int = 0,
                         box: InputBox | None = DEFAULT_INPUT_BOX) -> IoSequence:
    """Apply an input sequence sample by sample and record (u, y = T).

    The recorded input is the applied (clamped) one.  Optional additive
    measurement noise on y is off by default.
    """
    u_seq = np.asarray(u_seq, float).ravel()
    x = x_p0.as_array() if isinstance(x_p0, PlantState) else np.asarray(x_p0, float)
    rng = np.random.default_rng(seed)
    us = np.empty(len(u_seq))
    ys = np.empty(len(u_seq))
    for k, u in enumerate(u_seq):
        applied = float(box.clip([u])[0]) if box is not None else float(u)
        us[k] = applied
        ys[k] = x[0]
        x = step(x, applied, profile, k * tau_s, params, tau_s, substeps, box=None)
    if noise_std > 0.0:
        ys = ys + noise_std * rng.standard_normal(len(ys))
    return IoSequence(tau_s, us, ys)
