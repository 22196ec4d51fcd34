"""Staggered 1D grid, discrete flow states, and their continuum extensions.

Geometry convention used throughout the package:

* ``N`` cells of width ``dx = L/N`` cover ``[0, L]``.  Cell ``i`` is the
  half-open interval ``[i*dx, (i+1)*dx)`` with center ``x_i = (i + 1/2)*dx``;
  densities live there.
* ``N + 1`` faces sit at ``x = i*dx`` for ``i = 0..N``; velocities live there,
  pinned to zero at both walls (no-slip).

A :class:`FluidState` is one time level of that layout.  Between grid points,
density extends as a piecewise constant (right-open cells) and velocity as the
continuous piecewise-linear interpolant of its face values; ``hat_velocity``
is the cell average of that interpolant, which for a linear function is just
the midpoint value ``(u[i] + u[i+1]) / 2``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "GridSpec",
    "PhysParams",
    "FluidState",
    "Trajectory",
    "PiecewiseConstant",
    "init_state",
    "hat_velocity",
    "eval_density",
    "eval_velocity",
    "gauss_rule",
    "cell_averages",
]

# 5-point Gauss-Legendre on [-1, 1]; exact for polynomials of degree <= 9.
_GAUSS_X, _GAUSS_W = np.polynomial.legendre.leggauss(5)


def gauss_rule(a: float, b: float, n_sub: int = 1) -> tuple[np.ndarray, np.ndarray]:
    """Composite 5-point Gauss nodes/weights on [a, b] split into n_sub panels."""
    edges = np.linspace(a, b, n_sub + 1)
    mid = 0.5 * (edges[:-1] + edges[1:])
    half = 0.5 * (edges[1:] - edges[:-1])
    nodes = (mid[:, None] + half[:, None] * _GAUSS_X[None, :]).ravel()
    weights = (half[:, None] * _GAUSS_W[None, :]).ravel()
    return nodes, weights


# ======================================================================
# Grid and physical parameters
# ======================================================================


@dataclass(frozen=True)
class GridSpec:
    """Uniform staggered grid: geometry plus time-step bookkeeping.

    Attributes:
        L: domain length.
        N: number of cells (>= 2).
        dt: time step.
        T: final time; the run takes ``M_steps = ceil(T/dt)`` steps.
    """

    L: float
    N: int
    dt: float
    T: float

    def __post_init__(self) -> None:
        if self.N < 2:
            raise ValueError(f"need at least 2 cells, got N={self.N}")
        if not (self.L > 0):
            raise ValueError(f"domain length must be positive, got L={self.L}")
        if not (self.dt > 0):
            raise ValueError(f"time step must be positive, got dt={self.dt}")
        if self.T < 0:
            raise ValueError(f"final time must be nonnegative, got T={self.T}")

    @property
    def dx(self) -> float:
        return self.L / self.N

    @property
    def M_steps(self) -> int:
        # ceil(T/dt), robust against T/dt landing a hair above an integer.
        ratio = self.T / self.dt
        return max(0, math.ceil(ratio - 1e-9))

    @property
    def cell_centers(self) -> np.ndarray:
        return (np.arange(self.N) + 0.5) * self.dx

    @property
    def face_nodes(self) -> np.ndarray:
        return np.arange(self.N + 1) * self.dx


@dataclass(frozen=True)
class PhysParams:
    """Pressure law p(rho) = a * rho**gamma and viscosity mu.

    The compactness theory behind the refinement diagnostics needs
    3/2 < gamma < 2; the solver itself runs for any gamma > 1.
    ``in_theory_range`` records which side of that fence we are on so the
    harness can warn without refusing.
    """

    a: float = 1.0
    gamma: float = 5.0 / 3.0
    mu: float = 1.0

    def __post_init__(self) -> None:
        if not (self.a > 0):
            raise ValueError(f"pressure coefficient must be positive, got a={self.a}")
        if not (self.mu > 0):
            raise ValueError(f"viscosity must be positive, got mu={self.mu}")
        if not (self.gamma > 1):
            raise ValueError(f"adiabatic exponent must exceed 1, got gamma={self.gamma}")

    @property
    def in_theory_range(self) -> bool:
        return 1.5 < self.gamma < 2.0

    def pressure(self, rho: np.ndarray) -> np.ndarray:
        return self.a * rho**self.gamma

    def dpressure(self, rho: np.ndarray) -> np.ndarray:
        """d/drho of the pressure law."""
        return self.a * self.gamma * rho ** (self.gamma - 1.0)

    def pressure_potential(self, rho: np.ndarray) -> np.ndarray:
        """B(rho) = a*rho**gamma/(gamma-1), the internal-energy density.

        Satisfies rho*B'(rho) - B(rho) = p(rho), which is what couples the
        renormalized continuity identity to the kinetic-energy balance.
        """
        return self.a * rho**self.gamma / (self.gamma - 1.0)


def _frozen_array(values, length: int | None = None) -> np.ndarray:
    arr = np.array(values, dtype=float)
    if arr.ndim != 1:
        raise ValueError(f"expected a 1D array, got shape {arr.shape}")
    if length is not None and arr.size != length:
        raise ValueError(f"expected length {length}, got {arr.size}")
    arr.flags.writeable = False
    return arr


@dataclass(frozen=True)
class FluidState:
    """One time level: N positive cell densities, N+1 face velocities.

    The wall faces must carry exactly zero velocity.  Arrays are copied and
    frozen, so states are safe to share between threads.
    """

    rho: np.ndarray
    u: np.ndarray
    k: int = 0

    def __post_init__(self) -> None:
        rho = _frozen_array(self.rho)
        u = _frozen_array(self.u, length=rho.size + 1)
        if rho.size < 2:
            raise ValueError("state needs at least 2 cells")
        if not np.all(rho > 0):
            raise ValueError(
                f"densities must be strictly positive (min={rho.min(initial=np.inf)})"
            )
        if u[0] != 0.0 or u[-1] != 0.0:
            raise ValueError("wall velocities must be exactly zero")
        if not (np.all(np.isfinite(rho)) and np.all(np.isfinite(u))):
            raise ValueError("state contains non-finite entries")
        object.__setattr__(self, "rho", rho)
        object.__setattr__(self, "u", u)

    @property
    def N(self) -> int:
        return self.rho.size


@dataclass(frozen=True)
class Trajectory:
    """A full run: states for k = 0..M_steps plus per-step solver metadata.

    ``solver_meta[k]`` describes the solve that produced ``states[k+1]``.
    ``meta`` carries run-level flags (e.g. whether dt == dx was enforced).
    """

    grid: GridSpec
    params: PhysParams
    states: tuple[FluidState, ...]
    solver_meta: tuple = ()
    meta: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        if not self.states:
            raise ValueError("trajectory needs at least the initial state")
        if len(self.solver_meta) not in (0, len(self.states) - 1):
            raise ValueError("need one solver_meta entry per advance step")

    def __len__(self) -> int:
        return len(self.states)

    @property
    def rho_matrix(self) -> np.ndarray:
        """(M+1, N) array of densities, one row per time level."""
        return np.stack([s.rho for s in self.states])

    @property
    def u_matrix(self) -> np.ndarray:
        """(M+1, N+1) array of face velocities."""
        return np.stack([s.u for s in self.states])


# ======================================================================
# Initial data
# ======================================================================


@dataclass(frozen=True)
class PiecewiseConstant:
    """Piecewise-constant profile on [0, L] given by interior breakpoints.

    ``values[j]`` holds on ``[breaks[j-1], breaks[j])`` with ``breaks``
    implicitly padded by the domain ends, matching the right-open cell
    convention.  ``init_state`` integrates these profiles exactly instead of
    using quadrature, so jump positions never pollute refinement studies.
    """

    breakpoints: tuple[float, ...]
    values: tuple[float, ...]

    def __post_init__(self) -> None:
        breaks = tuple(float(b) for b in self.breakpoints)
        vals = tuple(float(v) for v in self.values)
        if len(vals) != len(breaks) + 1:
            raise ValueError("need exactly one more value than breakpoints")
        if any(b2 <= b1 for b1, b2 in zip(breaks, breaks[1:])):
            raise ValueError("breakpoints must be strictly increasing")
        object.__setattr__(self, "breakpoints", breaks)
        object.__setattr__(self, "values", vals)

    def __call__(self, x):
        idx = np.searchsorted(np.asarray(self.breakpoints), np.asarray(x), side="right")
        return np.asarray(self.values, dtype=float)[idx]

    def integral(self, a: float, b: float) -> float:
        """Exact integral over [a, b]."""
        if b < a:
            raise ValueError("integration bounds out of order")
        edges = (-np.inf, *self.breakpoints, np.inf)
        total = 0.0
        for j, v in enumerate(self.values):
            lo = max(a, edges[j])
            hi = min(b, edges[j + 1])
            if hi > lo:
                total += v * (hi - lo)
        return total


def cell_averages(grid: GridSpec, f: Callable[[np.ndarray], np.ndarray]) -> np.ndarray:
    """Cell averages of f, exactly for PiecewiseConstant, else by 5-pt Gauss."""
    dx = grid.dx
    if isinstance(f, PiecewiseConstant):
        edges = grid.face_nodes
        return np.array(
            [f.integral(edges[i], edges[i + 1]) / dx for i in range(grid.N)]
        )
    # One 5-point panel per cell: exact through degree-9 polynomials, and far
    # below solver tolerances for the smooth profiles used by the scenarios.
    half = 0.5 * dx
    centers = grid.cell_centers
    nodes = centers[:, None] + half * _GAUSS_X[None, :]
    vals = np.asarray(f(nodes.ravel()), dtype=float).reshape(nodes.shape)
    return vals @ (0.5 * _GAUSS_W)


def init_state(
    grid: GridSpec,
    rho0: Callable[[np.ndarray], np.ndarray],
    u0: Callable[[np.ndarray], np.ndarray],
    rho_floor: float = 1e-12,
) -> FluidState:
    """Numerical initial data: averaged density, face-sampled velocity.

    Args:
        grid: target grid.
        rho0: initial density profile; averaged over each cell
            (exactly for :class:`PiecewiseConstant`, by Gauss quadrature
            otherwise).  Averages must stay above ``rho_floor``.
        u0: initial velocity, sampled pointwise at the faces; the wall values
            are overwritten with zero regardless of ``u0``.
        rho_floor: input-validation floor, never applied during solves.

    Returns:
        The k = 0 :class:`FluidState`.
    """
    rho = cell_averages(grid, rho0)
    if not np.all(rho > rho_floor):
        raise ValueError(
            f"averaged initial density dips to {rho.min()} <= floor {rho_floor}"
        )
    u = np.asarray(u0(grid.face_nodes), dtype=float) * np.ones(grid.N + 1)
    u[0] = 0.0
    u[-1] = 0.0
    return FluidState(rho=rho, u=u, k=0)


# ======================================================================
# Extensions and projections
# ======================================================================


def hat_velocity(state: FluidState) -> np.ndarray:
    """Cell-averaged velocity (u[i] + u[i+1]) / 2.

    Equals the L2 projection of the piecewise-linear velocity extension onto
    piecewise constants, since the average of a linear function over a cell is
    its midpoint value.
    """
    u = state.u
    return 0.5 * (u[:-1] + u[1:])


def _pick_state(state_or_traj, t_index: int) -> tuple[FluidState, GridSpec | None]:
    if isinstance(state_or_traj, Trajectory):
        states = state_or_traj.states
        if not (0 <= t_index < len(states)):
            raise IndexError(f"t_index {t_index} outside 0..{len(states) - 1}")
        return states[t_index], state_or_traj.grid
    if isinstance(state_or_traj, FluidState):
        if t_index != state_or_traj.k:
            raise IndexError(
                f"t_index {t_index} does not match state level k={state_or_traj.k}"
            )
        return state_or_traj, None
    raise TypeError(f"expected FluidState or Trajectory, got {type(state_or_traj)!r}")


def _check_domain(x: np.ndarray, L: float) -> None:
    if np.any(x < 0) or np.any(x > L):
        raise ValueError(f"evaluation point outside [0, {L}]")


def eval_density(state_or_traj, grid: GridSpec, t_index: int, x):
    """Piecewise-constant density extension at position(s) x.

    Cells are right-open, so a point sitting exactly on an interior face picks
    the cell to its right; x = L belongs to the last cell.  Accepts either a
    Trajectory (with ``t_index`` selecting the level) or a single FluidState
    (whose ``k`` must equal ``t_index``).
    """
    state, traj_grid = _pick_state(state_or_traj, t_index)
    grid = traj_grid or grid
    xa = np.asarray(x, dtype=float)
    _check_domain(xa, grid.L)
    idx = np.minimum((xa / grid.dx).astype(int), grid.N - 1)
    out = state.rho[idx]
    return out if np.ndim(x) else float(out)


def eval_velocity(state_or_traj, grid: GridSpec, t_index: int, x):
    """Continuous piecewise-linear velocity extension at position(s) x."""
    state, traj_grid = _pick_state(state_or_traj, t_index)
    grid = traj_grid or grid
    xa = np.asarray(x, dtype=float)
    _check_domain(xa, grid.L)
    dx = grid.dx
    idx = np.minimum((xa / dx).astype(int), grid.N - 1)
    frac = xa / dx - idx
    out = state.u[idx] + frac * (state.u[idx + 1] - state.u[idx])
    return out if np.ndim(x) else float(out)
