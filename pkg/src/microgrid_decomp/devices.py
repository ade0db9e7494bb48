"""Per-building physical model: battery, hot water tank, load balance, costs.

Units: energies in kWh, powers in kW, ``delta_t`` in hours.  Stage prices are
expressed per kW held during one stage (tariff in EUR/kWh times ``delta_t``).
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

# States may overshoot their box by rounding only.
BOX_TOL = 1e-9


class InfeasibleTransition(ValueError):
    """Next state falls outside the state box."""


@dataclass(frozen=True)
class NodeModel:
    has_battery: bool = False
    has_solar: bool = False
    # battery
    alpha_b: float = 0.99
    rho_c: float = 0.95
    rho_d: float = 0.95
    b_max: float = 3.0
    u_b_max: float = 4.5
    # hot water tank
    alpha_h: float = 0.98
    beta_h: float = 0.9
    h_max: float = 8.0
    u_t_max: float = 4.0
    # terminal shortfall penalty
    kappa: float = 2.0
    h_ref: float = 4.0
    delta_t: float = 0.25
    u_ne_cap: float = 12.0
    n_controls: int = 21
    # explicit control values override the uniform ``n_controls`` grid
    u_b_grid: tuple | None = None
    u_t_grid: tuple | None = None

    def __post_init__(self):
        for name in ("alpha_b", "alpha_h", "rho_c", "rho_d", "beta_h"):
            v = getattr(self, name)
            if not 0.0 < v <= 1.0:
                raise ValueError(f"{name} must lie in (0, 1], got {v}")
        if self.h_max <= 0 or (self.has_battery and self.b_max <= 0):
            raise ValueError("storage capacities must be positive")
        if self.delta_t <= 0 or self.u_ne_cap <= 0:
            raise ValueError("delta_t and u_ne_cap must be positive")

    @property
    def state_dim(self) -> int:
        return 2 if self.has_battery else 1

    @property
    def control_dim(self) -> int:
        return 3 if self.has_battery else 2

    def u_b_values(self) -> np.ndarray:
        if not self.has_battery:
            return np.zeros(1)
        if self.u_b_grid is not None:
            return np.asarray(self.u_b_grid, dtype=float)
        return np.linspace(-self.u_b_max, self.u_b_max, self.n_controls)

    def u_t_values(self) -> np.ndarray:
        if self.u_t_grid is not None:
            return np.asarray(self.u_t_grid, dtype=float)
        return np.linspace(0.0, self.u_t_max, self.n_controls)

    def with_controls(self, n_controls: int) -> "NodeModel":
        return replace(self, n_controls=n_controls, u_b_grid=None, u_t_grid=None)


@dataclass(frozen=True)
class NodalState:
    h: float
    b: float | None = None


@dataclass(frozen=True)
class NodalControl:
    u_t: float
    u_ne: float
    u_b: float | None = None


@dataclass(frozen=True)
class NodalNoise:
    d_hw: float
    d_el: float

    def __post_init__(self):
        if self.d_hw < 0:
            raise ValueError("hot water demand must be nonnegative")


def battery_next(b, u_b, m: NodeModel):
    """Battery level after one stage; charging and discharging use distinct yields."""
    u_b = np.asarray(u_b, dtype=float)
    return m.alpha_b * np.asarray(b, dtype=float) + m.delta_t * (
        m.rho_c * np.maximum(u_b, 0.0) - np.maximum(-u_b, 0.0) / m.rho_d)


def tank_next(h, u_t, d_hw, m: NodeModel):
    return m.alpha_h * np.asarray(h, dtype=float) + m.delta_t * (
        m.beta_h * np.asarray(u_t, dtype=float) - np.asarray(d_hw, dtype=float))


def in_box(v, upper, tol=BOX_TOL):
    v = np.asarray(v)
    return (v >= -tol) & (v <= upper + tol)


def nodal_dynamics(x: NodalState, u: NodalControl, w: NodalNoise, m: NodeModel) -> NodalState:
    """Exact (unclamped) transition; raises :class:`InfeasibleTransition` off the box."""
    h = float(tank_next(x.h, u.u_t, w.d_hw, m))
    if not in_box(h, m.h_max):
        raise InfeasibleTransition(f"tank level {h:.6g} outside [0, {m.h_max}]")
    if not m.has_battery:
        return NodalState(h=h)
    b = float(battery_next(x.b, u.u_b, m))
    if not in_box(b, m.b_max):
        raise InfeasibleTransition(f"battery level {b:.6g} outside [0, {m.b_max}]")
    return NodalState(h=h, b=b)


def load_balance(x: NodalState, u: NodalControl, w: NodalNoise) -> float:
    """Power sent to neighbouring nodes (negative when importing from them)."""
    u_b = u.u_b or 0.0
    return u.u_ne - w.d_el - u_b - u.u_t


def stage_cost(u_ne, price, resale: bool = True):
    """Grid exchange cost; without resale, exports earn nothing."""
    u_ne = np.asarray(u_ne, dtype=float)
    if resale:
        return price * u_ne
    return price * np.maximum(u_ne, 0.0)


def nodal_costs(u: NodalControl, t: int, price, resale: bool = True) -> float:
    price = np.asarray(price, dtype=float)
    if not 0 <= t < len(price):
        raise IndexError(f"stage {t} outside horizon {len(price)}")
    return float(stage_cost(u.u_ne, price[t], resale))


def terminal_cost(x_T, m: NodeModel):
    """One-sided linear penalty on the hot water shortfall at the horizon.

    ``x_T`` is a :class:`NodalState` or an array of tank levels.
    """
    h_T = x_T.h if isinstance(x_T, NodalState) else x_T
    return m.kappa * np.maximum(0.0, m.h_ref - np.asarray(h_T, dtype=float))
