"""Exact discrete identities and functionals for staggered upwind trajectories.

Everything here is post-processing over an immutable Trajectory.  The central
design rule: every estimate that is classically written with unknown
mean-value points is instead computed through its *exact algebraic remainder*
(e.g. the convexity gap B(y) - B(x) - B'(x)(y-x)), so each balance law becomes
a machine-checkable identity whose residual is bounded by the nonlinear
solver's residual — not by an analyst's constant.

Field extension conventions (used by the weak forms, norms, and Cauchy
comparisons downstream): the state computed at time level k represents the
time window (t^{k-1}, t^k], so windows k = 1..M tile [0, T); density extends
as the piecewise-constant cell value, velocity as the continuous piecewise
interpolant through the face values, and the discrete time derivative on
window k is the backward difference (f^k - f^{k-1})/dt.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .grid import FluidState, GridSpec, PhysParams, Trajectory, gauss_rule
from .operators import (
    diff_cell,
    dirichlet_inv_grad,
    neumann_inv_grad,
    upwind_mass_flux,
    upwind_momentum_flux,
)

__all__ = [
    "EnergyLedger",
    "FluxLedger",
    "BFunction",
    "TestFunction",
    "PositivityReport",
    "energy_ledger",
    "renorm_residual",
    "positivity_report",
    "flux_ledger",
    "error_rates",
    "weak_residual_continuity",
    "weak_residual_momentum",
    "norm_suite",
    "b_square",
    "b_power",
    "b_zlogz",
    "b_pressure_potential",
    "sup_abs_deriv",
    "default_test_functions",
    "mass_history",
    "effective_newton_tol",
    "rho_power_integral",
]


def _hat(u: np.ndarray) -> np.ndarray:
    return 0.5 * (u[:-1] + u[1:])


def mass_history(traj: Trajectory) -> np.ndarray:
    """Total mass dx * sum(rho) at every time level (index 0..M)."""
    return traj.grid.dx * traj.rho_matrix.sum(axis=1)


def effective_newton_tol(traj: Trajectory) -> float:
    """Largest per-step acceptance tolerance the solver actually applied."""
    if not traj.solver_meta:
        return 1e-10
    return max(meta.tol for meta in traj.solver_meta)


def _continuity_residual(
    rho_prev: np.ndarray, rho: np.ndarray, u: np.ndarray, grid: GridSpec
) -> np.ndarray:
    flux = upwind_mass_flux(rho, u)
    return (rho - rho_prev) / grid.dt + diff_cell(flux, grid.dx)


# ======================================================================
# Energy ledger
# ======================================================================


@dataclass(frozen=True)
class EnergyLedger:
    """Discrete energy balance with its four numerical-diffusion terms.

    All arrays are indexed by the time level m = 0..M; dissipation and the
    N-terms are cumulative sums over steps k <= m, so the exact balance reads
    energy[m] + dissipation[m] + N1[m] + N2[m] + N3[m] + N4[m] == energy[0]
    up to the solver residual, and balance_residual[m] is the absolute gap.
    """

    times: np.ndarray
    energy: np.ndarray
    dissipation: np.ndarray
    N1: np.ndarray
    N2: np.ndarray
    N3: np.ndarray
    N4: np.ndarray
    balance_residual: np.ndarray

    def step_increments(self, name: str) -> np.ndarray:
        """Per-step increments of a cumulative column ('N1'..'N4', 'dissipation')."""
        return np.diff(getattr(self, name))


def energy_ledger(traj: Trajectory) -> EnergyLedger:
    """Evaluate the discrete energy equality along a trajectory.

    The energy is dx * sum(rho*hat_u^2/2 + a*rho^gamma/(gamma-1)).  The four
    diffusion terms are computed in exact-remainder form:

      N1: time-convexity gap of the pressure potential,
      N2: spatial convexity gaps weighted by the upwind switch,
      N3: kinetic gap rho_old*(hat_u - hat_u_old)^2/2,
      N4: interface dissipation |mass flux|*(hat-jump)^2/2,

    so every term is nonnegative up to rounding, and the balance residual is
    bounded by the accumulated solver residual (not by discretization error).
    """
    g, pp = traj.grid, traj.params
    dt, dx = g.dt, g.dx
    rho_m = traj.rho_matrix
    u_m = traj.u_matrix
    steps = rho_m.shape[0] - 1

    hat_m = 0.5 * (u_m[:, :-1] + u_m[:, 1:])
    pot = pp.pressure_potential(rho_m)
    energy = dx * (0.5 * rho_m * hat_m**2 + pot).sum(axis=1)

    dpot = pp.dpressure(rho_m) / (pp.gamma - 1.0)

    inc_d = np.zeros(steps)
    inc = {k: np.zeros(steps) for k in ("N1", "N2", "N3", "N4")}
    for k in range(1, steps + 1):
        rho, u = rho_m[k], u_m[k]
        du = np.diff(u) / dx
        inc_d[k - 1] = pp.mu * dt * dx * float(du @ du)

        inc["N1"][k - 1] = dx * float(
            np.sum(pot[k - 1] - pot[k] - dpot[k] * (rho_m[k - 1] - rho))
        )

        up_int = np.maximum(u[1:-1], 0.0)
        um_int = np.minimum(u[1:-1], 0.0)
        gap_right = pot[k, 1:] - pot[k, :-1] - dpot[k, :-1] * (rho[1:] - rho[:-1])
        gap_left = pot[k, :-1] - pot[k, 1:] - dpot[k, 1:] * (rho[:-1] - rho[1:])
        inc["N2"][k - 1] = dt * float(-(gap_right @ um_int) + gap_left @ up_int)

        inc["N3"][k - 1] = dx * float(
            np.sum(0.5 * rho_m[k - 1] * (hat_m[k] - hat_m[k - 1]) ** 2)
        )

        flux = upwind_mass_flux(rho, u)
        inc["N4"][k - 1] = dt * float(
            np.sum(0.5 * np.abs(flux[1:-1]) * np.diff(hat_m[k]) ** 2)
        )

    def cum(a: np.ndarray) -> np.ndarray:
        return np.concatenate(([0.0], np.cumsum(a)))

    dissipation = cum(inc_d)
    n1, n2, n3, n4 = (cum(inc[k]) for k in ("N1", "N2", "N3", "N4"))
    balance = np.abs(energy - energy[0] + dissipation + n1 + n2 + n3 + n4)
    times = dt * np.arange(steps + 1)
    return EnergyLedger(times, energy, dissipation, n1, n2, n3, n4, balance)


# ======================================================================
# Renormalized continuity
# ======================================================================


@dataclass(frozen=True)
class BFunction:
    """A C^1 rescaling function z -> B(z) with its derivative.

    ``convex`` marks whether the remainder terms carry a sign; it only
    affects which inequalities downstream checks may assert.
    """

    name: str
    value: Callable[[np.ndarray], np.ndarray]
    deriv: Callable[[np.ndarray], np.ndarray]
    convex: bool = True


def b_square() -> BFunction:
    return BFunction("square", lambda z: z * z, lambda z: 2.0 * z)


def b_power(gamma: float) -> BFunction:
    return BFunction(
        f"power-{gamma:g}", lambda z: z**gamma, lambda z: gamma * z ** (gamma - 1.0),
        convex=gamma >= 1.0,
    )


def b_zlogz() -> BFunction:
    return BFunction("zlogz", lambda z: z * np.log(z), lambda z: 1.0 + np.log(z))


def b_pressure_potential(params: PhysParams) -> BFunction:
    """B with z*B'(z) - B(z) = p(z): the internal-energy density."""
    return BFunction(
        "pressure-potential",
        params.pressure_potential,
        lambda z: params.dpressure(z) / (params.gamma - 1.0),
    )


def sup_abs_deriv(B: BFunction, lo: float, hi: float, samples: int = 4097) -> float:
    """max |B'| over [lo, hi], by dense sampling (covers interior extrema)."""
    if not (0.0 < lo <= hi):
        raise ValueError("derivative range must be positive and ordered")
    z = np.linspace(lo, hi, samples)
    vals = np.abs(np.asarray(B.deriv(z), dtype=float))
    if not np.all(np.isfinite(vals)):
        raise ValueError(f"B'{B.name and f' ({B.name})'} is not finite on [{lo}, {hi}]")
    return float(np.max(vals))


def renorm_residual(traj: Trajectory, B: BFunction) -> np.ndarray:
    """Residual of the rescaled continuity identity, one row per step.

    For each step k and cell i, assembles

        [B(rho^k) - B(rho^{k-1})]/dt  +  d_i Up(B(rho^k) u^k)
        + b(rho^k) d_i u^k  +  remainder terms,

    with b(z) = z B'(z) - B(z) and the remainders being the exact convexity
    gaps in time and across upwind faces.  Algebraically this equals
    B'(rho^k) times the continuity residual, so for converged steps the
    max-norm is bounded by the solver tolerance times sup|B'| on the state
    range.  B must be finite with finite derivative on that range.
    """
    g = traj.grid
    dt, dx = g.dt, g.dx
    rho_m = traj.rho_matrix
    steps = rho_m.shape[0] - 1
    lo, hi = float(np.min(rho_m)), float(np.max(rho_m))
    sup_abs_deriv(B, lo, hi, samples=257)  # rejects non-C^1-on-range inputs
    if not np.all(np.isfinite(np.asarray(B.value(np.array([lo, hi]))))):
        raise ValueError(f"B ({B.name}) is not finite on the density range")

    out = np.empty((steps, g.N))
    for k in range(1, steps + 1):
        rho, u = rho_m[k], traj.u_matrix[k]
        bv = np.asarray(B.value(rho), dtype=float)
        bp = np.asarray(B.deriv(rho), dtype=float)
        bv_prev = np.asarray(B.value(rho_m[k - 1]), dtype=float)
        small_b = rho * bp - bv

        time_gap = (bv_prev - bv - bp * (rho_m[k - 1] - rho)) / dt
        up_int = np.maximum(u[1:-1], 0.0)
        um_int = np.minimum(u[1:-1], 0.0)
        gap_right = bv[1:] - bv[:-1] - bp[:-1] * (rho[1:] - rho[:-1])
        gap_left = bv[:-1] - bv[1:] - bp[1:] * (rho[:-1] - rho[1:])
        spatial = np.zeros(g.N)
        spatial[:-1] -= gap_right * um_int / dx
        spatial[1:] += gap_left * up_int / dx

        out[k - 1] = (
            (bv - bv_prev) / dt
            + diff_cell(upwind_mass_flux(bv, u), dx)
            + small_b * diff_cell(u, dx)
            + time_gap
            + spatial
        )
    return out


# ======================================================================
# Positivity
# ======================================================================


@dataclass(frozen=True)
class PositivityReport:
    """Per-step density minima against two lower bounds (index = step k-1).

    ``bound`` is the commonly quoted floor min rho_old / (1 + dt*max|u|);
    ``margin`` = min_rho - bound.  That bound does not actually hold for this
    discretization at inflow wall cells (the wall cell sees only its outgoing
    face), so ``divergence_bound`` also records the floor that *is* provable,
    min rho_old minus the residual allowance, divided by 1 + dt*max(div u)+.
    """

    min_rho: np.ndarray
    bound: np.ndarray
    margin: np.ndarray
    divergence_bound: np.ndarray
    divergence_margin: np.ndarray

    @property
    def worst_margin(self) -> float:
        return float(np.min(self.margin, initial=np.inf))

    @property
    def worst_divergence_margin(self) -> float:
        return float(np.min(self.divergence_margin, initial=np.inf))


def positivity_report(traj: Trajectory) -> PositivityReport:
    g = traj.grid
    rho_m = traj.rho_matrix
    steps = rho_m.shape[0] - 1
    min_rho = np.empty(steps)
    bound = np.empty(steps)
    div_bound = np.empty(steps)
    for k in range(1, steps + 1):
        rho, u = rho_m[k], traj.u_matrix[k]
        prev_min = float(np.min(rho_m[k - 1]))
        min_rho[k - 1] = float(np.min(rho))
        bound[k - 1] = prev_min / (1.0 + g.dt * float(np.max(np.abs(u))))
        res = _continuity_residual(rho_m[k - 1], rho, u, g)
        div_plus = max(float(np.max(np.diff(u) / g.dx)), 0.0)
        div_bound[k - 1] = (prev_min - g.dt * float(np.max(np.abs(res)))) / (
            1.0 + g.dt * div_plus
        )
    return PositivityReport(
        min_rho, bound, min_rho - bound, div_bound, min_rho - div_bound
    )


# ======================================================================
# Effective-viscous-flux identity
# ======================================================================


@dataclass(frozen=True)
class FluxLedger:
    """Both sides of the time-integrated effective-viscous-flux identity.

    lhs = -dt*dx * sum_{k<=m} sum_i (mu*d_i u - p(rho_i)) * (rho_i - mean),
    and the right-hand side splits into four terms: the mean-density
    momentum-flux term, the net boundary-in-time term (inverse gradients of
    the averaged momentum paired with the terminal/initial density), and the
    two numerical error terms E1 (momentum increments against the mass flux)
    and E2 (upwind asymmetry of the momentum flux).  S1/S2 are the proof's
    intermediate sums — the time-difference and convection pairings with the
    zero-mean density potential — so each stage of the derivation is
    independently checkable:

        lhs == S1 + S2            (momentum-residual pairing)
        S1 + S2 == sum(rhs_terms) (continuity substitution + exact algebra)
    """

    m: int
    lhs: float
    S1: float
    S2: float
    E1: float
    E2: float
    mean_flux: float
    boundary_terminal: float
    boundary_initial: float
    transport: float

    @property
    def rhs_terms(self) -> dict[str, float]:
        return {
            "mean_flux": self.mean_flux,
            "boundary": self.boundary_terminal + self.boundary_initial,
            "E1": self.E1,
            "E2": self.E2,
        }

    @property
    def rhs_total(self) -> float:
        return float(sum(self.rhs_terms.values()))

    @property
    def identity_gap(self) -> float:
        return self.lhs - self.rhs_total

    @property
    def pairing_gap(self) -> float:
        return self.lhs - (self.S1 + self.S2)

    @property
    def decomposition_gap(self) -> float:
        return (self.S1 + self.S2) - self.rhs_total


def _face_avg_momentum(rho: np.ndarray, u: np.ndarray) -> np.ndarray:
    m = rho * _hat(u)
    return 0.5 * (m[:-1] + m[1:])


def flux_ledger(traj: Trajectory, m: int | None = None) -> FluxLedger:
    """Accumulate the flux identity through step m (default: the full run)."""
    g, pp = traj.grid, traj.params
    dt, dx = g.dt, g.dx
    steps = len(traj) - 1
    if m is None:
        m = steps
    if not (1 <= m <= steps):
        raise ValueError(f"checkpoint m={m} outside 1..{steps}")

    lhs = s1 = s2 = e1 = e2 = mean_flux = transport = 0.0
    w_prev = _face_avg_momentum(traj.states[0].rho, traj.states[0].u)
    w_first = w_prev
    for k in range(1, m + 1):
        rho, u = traj.states[k].rho, traj.states[k].u
        rbar = float(np.mean(rho))
        du = diff_cell(u, dx)
        p = pp.pressure(rho)
        lhs += -dt * dx * float(np.sum((pp.mu * du - p) * (rho - rbar)))

        v = neumann_inv_grad(rho - rbar, dx)[1:-1]
        w = _face_avg_momentum(rho, u)
        s1 += dx * float((w - w_prev) @ v)

        hat = _hat(u)
        mom_flux = upwind_momentum_flux(rho, hat, u)
        conv = (mom_flux[2:] - mom_flux[:-2]) / (2.0 * dx)
        s2 += dt * dx * float(conv @ v)

        mean_flux += dt * dx * rbar * float(np.sum(mom_flux[1:-1]))
        transport += dt * dx * float(mom_flux[1:-1] @ (0.5 * (rho[:-1] + rho[1:])))

        mass_flux = upwind_mass_flux(rho, u)
        e1 += -dt * dx * float(mass_flux[1:-1] @ (w - w_prev))
        e2 += dt * dx * float(
            np.sum(0.5 * rho[:-1] * rho[1:] * np.abs(u[1:-1]) * np.diff(hat))
        )
        w_prev = w

    g_term = dirichlet_inv_grad(w_prev, dx)
    boundary_terminal = -dx * float(g_term @ traj.states[m].rho)
    g_init = dirichlet_inv_grad(w_first, dx)
    boundary_initial = dx * float(g_init @ traj.states[0].rho)
    return FluxLedger(
        m=m,
        lhs=lhs,
        S1=s1,
        S2=s2,
        E1=e1,
        E2=e2,
        mean_flux=mean_flux,
        boundary_terminal=boundary_terminal,
        boundary_initial=boundary_initial,
        transport=transport,
    )


# ======================================================================
# Weak-form residuals
# ======================================================================


@dataclass(frozen=True)
class TestFunction:
    """Smooth space-time test function with its x-derivative.

    ``value`` and ``deriv_x`` must accept broadcasting numpy arrays (t, x).
    """

    value: Callable[[np.ndarray, np.ndarray], np.ndarray]
    deriv_x: Callable[[np.ndarray, np.ndarray], np.ndarray]
    name: str = ""


def default_test_functions(
    L: float, T: float, js: Sequence[int] = (1, 2, 3)
) -> tuple[TestFunction, ...]:
    """sin(pi j x / L) * (1 - t/T)^2: vanish at t=T and at both walls."""
    out = []
    for j in js:
        kj = math.pi * j / L

        def val(t, x, kj=kj):
            return np.sin(kj * x) * (1.0 - t / T) ** 2

        def der(t, x, kj=kj):
            return kj * np.cos(kj * x) * (1.0 - t / T) ** 2

        out.append(TestFunction(val, der, name=f"sin{j}"))
    return tuple(out)


def _check_test_function(fn: TestFunction, L: float, T: float) -> None:
    x = np.linspace(0.0, L, 17)
    t = np.linspace(0.0, T, 17)
    if np.max(np.abs(fn.value(np.full_like(x, T), x))) > 1e-12:
        raise ValueError("test function must vanish at t = T")
    walls = np.abs(fn.value(t, np.zeros_like(t))) + np.abs(fn.value(t, np.full_like(t, L)))
    if np.max(walls) > 1e-12:
        raise ValueError("test function must vanish at x = 0 and x = L")


class _WindowQuadrature:
    """Shared tensor Gauss data: per-cell x-nodes and per-window t-nodes."""

    def __init__(self, traj: Trajectory, points: int = 5):
        g = traj.grid
        self.g = g
        xs, wx = [], []
        for i in range(g.N):
            nodes, weights = gauss_rule(i * g.dx, (i + 1) * g.dx, 1)
            xs.append(nodes)
            wx.append(weights)
        self.x = np.concatenate(xs)              # (N*q,)
        self.wx = np.concatenate(wx)             # (N*q,)
        self.q = xs[0].size
        self.face_x = g.face_nodes
        # velocity interpolation weights at the x-nodes
        idx = np.minimum((self.x / g.dx).astype(int), g.N - 1)
        self.cell_of_node = idx
        self.frac = self.x / g.dx - idx

    def t_nodes(self, k: int) -> tuple[np.ndarray, np.ndarray]:
        g = self.g
        return gauss_rule((k - 1) * g.dt, k * g.dt, 1)

    def u_at_nodes(self, u: np.ndarray) -> np.ndarray:
        i = self.cell_of_node
        return u[i] + self.frac * (u[i + 1] - u[i])

    def averages(
        self, fn: TestFunction, k: int
    ) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
        """(cell-time averages, time-avg at faces, raw nodes grid, t-weights)."""
        tn, tw = self.t_nodes(k)
        g = self.g
        vals = fn.value(tn[:, None], self.x[None, :])        # (q, N*q)
        cell_avg = (
            (tw[:, None] * vals * self.wx[None, :]).sum(axis=0).reshape(g.N, self.q).sum(axis=1)
        ) / (g.dt * g.dx)
        face_vals = fn.value(tn[:, None], self.face_x[None, :])
        face_avg = (tw[:, None] * face_vals).sum(axis=0) / g.dt
        return cell_avg, face_avg, vals, tw


def weak_residual_continuity(
    traj: Trajectory, phi: TestFunction
) -> tuple[float, float]:
    """Space-time weak residual of the density equation and its exact value.

    Returns (lhs_weak, P1): lhs_weak integrates d_t^h rho_h * phi minus
    rho_h u_h phi_x over [0,T)x(0,L) by per-cell/per-window Gauss quadrature
    on the extended fields; P1 is the same quantity reduced to the closed
    upwind form coupling density jumps to the gap between cell-averaged and
    face traces of phi.  The two agree up to quadrature error plus the
    continuity residual paired with phi, which validates quadrature and
    assembly simultaneously.  phi must vanish at t=T and at both walls.
    """
    g = traj.grid
    _check_test_function(phi, g.L, g.T)
    quad = _WindowQuadrature(traj)
    dt, dx = g.dt, g.dx
    rho_m = traj.rho_matrix
    lhs = 0.0
    p1 = 0.0
    for k in range(1, len(traj)):
        rho, u = rho_m[k], traj.u_matrix[k]
        tn, tw = quad.t_nodes(k)
        phi_vals = phi.value(tn[:, None], quad.x[None, :])
        phix_vals = phi.deriv_x(tn[:, None], quad.x[None, :])
        dt_rho = ((rho - rho_m[k - 1]) / dt)[quad.cell_of_node]
        rho_n = rho[quad.cell_of_node]
        u_n = quad.u_at_nodes(u)
        integrand = dt_rho[None, :] * phi_vals - (rho_n * u_n)[None, :] * phix_vals
        lhs += float(tw @ (integrand @ quad.wx))

        cell_avg, face_avg, _, _ = quad.averages(phi, k)
        up_int = np.maximum(u[1:-1], 0.0)
        um_int = np.minimum(u[1:-1], 0.0)
        jump = rho[1:] - rho[:-1]
        p1 += -dt * float(
            np.sum(
                jump
                * (
                    up_int * (cell_avg[1:] - face_avg[1:-1])
                    + um_int * (cell_avg[:-1] - face_avg[1:-1])
                )
            )
        )
    return lhs, p1


def weak_residual_momentum(traj: Trajectory, v: TestFunction) -> tuple[float, float]:
    """Weak residual of the momentum equation and its exact closed form.

    Returns (lhs_weak, P2): lhs_weak integrates d_t^h(rho_h hat_u_h) v minus
    (rho_h hat_u_h^2 + p(rho_h) - mu (u_h)_x) v_x by Gauss quadrature; P2 is
    the exact mismatch between that integral and the face-collocated scheme,
    consisting of the cell-vs-face trace gap against the momentum time
    difference plus the upwind trace asymmetry of the convection term.
    Pressure and viscosity pair exactly and leave no trace here.  v must
    vanish at t=T and at both walls.
    """
    g, pp = traj.grid, traj.params
    _check_test_function(v, g.L, g.T)
    quad = _WindowQuadrature(traj)
    dt, dx = g.dt, g.dx
    rho_mat = traj.rho_matrix
    u_mat = traj.u_matrix
    lhs = 0.0
    p2 = 0.0
    for k in range(1, len(traj)):
        rho, u = rho_mat[k], u_mat[k]
        hat = _hat(u)
        hat_prev = _hat(u_mat[k - 1])
        mom = rho * hat
        dt_mom = (mom - rho_mat[k - 1] * hat_prev) / dt
        cell_coeff = -(mom * hat + pp.pressure(rho) - pp.mu * diff_cell(u, dx))

        tn, tw = quad.t_nodes(k)
        v_vals = v.value(tn[:, None], quad.x[None, :])
        vx_vals = v.deriv_x(tn[:, None], quad.x[None, :])
        integrand = (
            dt_mom[quad.cell_of_node][None, :] * v_vals
            + cell_coeff[quad.cell_of_node][None, :] * vx_vals
        )
        lhs += float(tw @ (integrand @ quad.wx))

        cell_avg, face_avg, _, _ = quad.averages(v, k)
        j1 = float(
            np.sum(dt_mom * (0.5 * dx * (face_avg[:-1] + face_avg[1:]) - dx * cell_avg))
        )
        up_int = np.maximum(u[1:-1], 0.0)
        um_int = np.minimum(u[1:-1], 0.0)
        dmom = mom[1:] - mom[:-1]
        j2 = 0.5 * float(
            np.sum(
                dmom
                * (
                    up_int * (face_avg[2:] - face_avg[1:-1])
                    - um_int * (face_avg[1:-1] - face_avg[:-2])
                )
            )
        )
        p2 += -dt * (j1 + j2)
    return lhs, p2


# ======================================================================
# Norms and rates
# ======================================================================


def _int_abs_linear_pow(a: np.ndarray, b: np.ndarray, w: float, s: float) -> np.ndarray:
    """Exact ∫_0^w |a + b*sigma|^s d(sigma), vectorized over (a, b); s > 0.

    Uses the antiderivative y|y|^s/(s+1) with a midpoint fallback when the
    slope contribution is too small for the difference to be well-scaled.
    """
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    y1 = a + b * w
    scale = np.abs(a) + np.abs(b) * w
    small = np.abs(b) * w <= 1e-8 * scale

    def anti(y: np.ndarray) -> np.ndarray:
        return y * np.abs(y) ** s / (s + 1.0)

    with np.errstate(divide="ignore", invalid="ignore"):
        exact = (anti(y1) - anti(a)) / np.where(small, 1.0, b)
    mid = w * np.abs(a + 0.5 * b * w) ** s
    return np.where(small, mid, exact)


def rho_power_integral(traj: Trajectory, power: float | None = None) -> float:
    """Space-time integral of rho^power (default gamma+1) over [0,T)."""
    if power is None:
        power = traj.params.gamma + 1.0
    g = traj.grid
    rho_m = traj.rho_matrix
    if rho_m.shape[0] == 1:
        return 0.0
    return g.dt * g.dx * float(np.sum(rho_m[1:] ** power))


def norm_suite(traj: Trajectory) -> dict[str, float]:
    """The a-priori-bounded norms of the extended fields, per trajectory.

    Keys (with r = 2*gamma/(gamma+1); all integrals piecewise exact):
      rho_Linf_Lgamma     sup_m ||rho^m||_{L^gamma}
      pressure_Linf_L1    sup_m ||p(rho^m)||_{L^1}
      u_L2_H1             velocity in L^2 in time of H^1_0 in space
      u_L2_Linf           velocity in L^2 in time of sup norm
      momentum_Linf_Lr    sup_m ||rho hat_u||_{L^r}
      kinetic_Linf_L1     sup_m ||rho hat_u^2||_{L^1}
      rho_u_L2_Lgamma     rho_h u_h in L^2 in time of L^gamma
      rho_u2_L2_Lr        rho_h u_h^2 in L^2 in time of L^r

    Supremum-in-time norms include the initial state; time integrals run over
    the M windows of the extension.
    """
    g, pp = traj.grid, traj.params
    dt, dx = g.dt, g.dx
    gamma = pp.gamma
    r = 2.0 * gamma / (gamma + 1.0)
    rho_m = traj.rho_matrix
    u_mat = traj.u_matrix
    hat_m = 0.5 * (u_mat[:, :-1] + u_mat[:, 1:])

    out: dict[str, float] = {}
    out["rho_Linf_Lgamma"] = float(np.max((dx * np.sum(rho_m**gamma, axis=1)) ** (1.0 / gamma)))
    out["pressure_Linf_L1"] = float(np.max(dx * np.sum(pp.pressure(rho_m), axis=1)))
    mom = rho_m * hat_m
    out["momentum_Linf_Lr"] = float(
        np.max((dx * np.sum(np.abs(mom) ** r, axis=1)) ** (1.0 / r))
    )
    out["kinetic_Linf_L1"] = float(np.max(dx * np.sum(rho_m * hat_m**2, axis=1)))

    steps = rho_m.shape[0] - 1
    h1_sq = linf_sq = ru_g = ru2_r = 0.0
    for k in range(1, steps + 1):
        u = u_mat[k]
        ul, ur = u[:-1], u[1:]
        int_u2 = (dx / 3.0) * float(np.sum(ul * ul + ul * ur + ur * ur))
        int_dudx2 = float(np.sum(np.diff(u) ** 2)) / dx
        h1_sq += dt * (int_u2 + int_dudx2)
        linf_sq += dt * float(np.max(np.abs(u))) ** 2

        rho = rho_m[k]
        slope = np.diff(u) / dx
        int_abs_u_g = _int_abs_linear_pow(ul, slope, dx, gamma)
        ru_g += dt * float(np.sum(rho**gamma * int_abs_u_g)) ** (2.0 / gamma)
        int_abs_u_2r = _int_abs_linear_pow(ul, slope, dx, 2.0 * r)
        ru2_r += dt * float(np.sum(rho**r * int_abs_u_2r)) ** (2.0 / r)
    out["u_L2_H1"] = math.sqrt(h1_sq)
    out["u_L2_Linf"] = math.sqrt(linf_sq)
    out["rho_u_L2_Lgamma"] = math.sqrt(ru_g)
    out["rho_u2_L2_Lr"] = math.sqrt(ru2_r)
    return out


def _pair_order(coarse: float, fine: float, h_ratio: float) -> float | str | None:
    if coarse == 0.0 and fine == 0.0:
        return "exact"
    if coarse == 0.0 or fine == 0.0:
        return None
    return float(np.log(abs(coarse) / abs(fine)) / np.log(h_ratio))


def _summarize_orders(magnitudes: Sequence[float], hs: Sequence[float]) -> dict:
    orders = [
        _pair_order(magnitudes[j], magnitudes[j + 1], hs[j] / hs[j + 1])
        for j in range(len(magnitudes) - 1)
    ]
    numeric = [o for o in orders if isinstance(o, float)]
    if numeric:
        headline: float | str | None = float(np.mean(numeric))
    elif orders and all(o == "exact" for o in orders):
        headline = "exact"
    else:
        headline = None
    return {"magnitudes": list(magnitudes), "orders": orders, "order": headline}


def error_rates(
    trajectories: Sequence[Trajectory],
    phi: TestFunction | None = None,
    v: TestFunction | None = None,
) -> dict[str, dict]:
    """Observed decay orders of the named error functionals across levels.

    Requires at least three trajectories of the same scenario at increasing
    resolution, each with dt == dx.  Orders are per-pair log ratios of
    successive magnitudes against the h-ratio; the headline ``order`` is
    their mean, or the string "exact" when every level is exactly zero.
    The space-time integral of rho^(gamma+1) is reported with its max/min
    ratio as the boundedness proxy instead of an order.
    """
    trajs = sorted(trajectories, key=lambda tr: tr.grid.N)
    if len(trajs) < 3:
        raise ValueError("error_rates needs at least 3 refinement levels")
    for tr in trajs:
        if not tr.meta.get("dt_dx_coupled", abs(tr.grid.dt - tr.grid.dx) <= 1e-12 * tr.grid.dx):
            raise ValueError("error_rates requires dt == dx at every level")
    base = trajs[0]
    if phi is None:
        phi = default_test_functions(base.grid.L, base.grid.T, js=(1,))[0]
    if v is None:
        # j=2 is antisymmetric about L/2: for mirror-symmetric scenarios the
        # momentum field is odd, so an even test function (j=1) pairs to an
        # exact zero and the measured rate would be roundoff noise.
        v = default_test_functions(base.grid.L, base.grid.T, js=(2,))[0]

    hs = [tr.grid.dx for tr in trajs]
    e1s, e2s, p1s, p2s, rints = [], [], [], [], []
    for tr in trajs:
        ledger = flux_ledger(tr)
        e1s.append(abs(ledger.E1))
        e2s.append(abs(ledger.E2))
        p1s.append(abs(weak_residual_continuity(tr, phi)[1]))
        p2s.append(abs(weak_residual_momentum(tr, v)[1]))
        rints.append(rho_power_integral(tr))

    out = {
        "E1": _summarize_orders(e1s, hs),
        "E2": _summarize_orders(e2s, hs),
        "P1": _summarize_orders(p1s, hs),
        "P2": _summarize_orders(p2s, hs),
    }
    finite = [x for x in rints if x > 0.0]
    ratio = (max(finite) / min(finite)) if finite else 1.0
    out["rho_gamma_plus_1"] = {"values": rints, "max_over_min": ratio}
    return out
