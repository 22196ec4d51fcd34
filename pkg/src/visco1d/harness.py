"""Scenario library and mesh-refinement study driver.

A scenario couples initial profiles (named analytic shapes or piecewise
constants), domain/physics parameters, and a ladder of resolutions with the
time step tied to the mesh (dt == dx) unless explicitly decoupled.  The
refinement driver runs every level, gathers the identity diagnostics, forms
Cauchy differences between successive levels by exact projection, and turns
decaying error functionals into observed orders with their theoretical floors
side by side.
"""

from __future__ import annotations

import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .grid import GridSpec, PhysParams, PiecewiseConstant, Trajectory
from . import diagnostics
from .stepper import SolverConfig, StepFailure, run

__all__ = [
    "ScenarioConfig",
    "RefinementReport",
    "builtin_scenarios",
    "run_refinement",
    "resolve_density_profile",
    "resolve_velocity_profile",
    "cauchy_differences",
    "project_cells",
    "restrict_faces",
]


# ======================================================================
# Initial-data profiles
# ======================================================================


def resolve_density_profile(spec: str, L: float):
    """Turn a density-profile spec string into a callable or step function.

    Accepted forms:
      "constant" or "constant:V"        uniform density V (default 1)
      "bump" or "bump:A"                1 + A*sin^2(pi x / L), default A=0.5
      "piecewise:f1,f2|v0,v1,v2"        steps at fractions f_j of L
    """
    kind, _, arg = spec.partition(":")
    if kind == "constant":
        value = float(arg) if arg else 1.0
        return lambda x: value * np.ones_like(np.asarray(x, dtype=float))
    if kind == "bump":
        amp = float(arg) if arg else 0.5
        return lambda x: 1.0 + amp * np.sin(math.pi * np.asarray(x, dtype=float) / L) ** 2
    if kind == "piecewise":
        fracs_txt, _, vals_txt = arg.partition("|")
        breaks = [float(f) * L for f in fracs_txt.split(",") if f.strip()]
        values = [float(v) for v in vals_txt.split(",") if v.strip()]
        return PiecewiseConstant(breakpoints=tuple(breaks), values=tuple(values))
    raise ValueError(f"unknown density profile {spec!r}")


def resolve_velocity_profile(spec: str, L: float) -> Callable:
    """Velocity profile spec: "zero", or "sin2pi"/"sin2pi:A" = A*sin(2 pi x/L)."""
    kind, _, arg = spec.partition(":")
    if kind == "zero":
        return lambda x: np.zeros_like(np.asarray(x, dtype=float))
    if kind == "sin2pi":
        amp = float(arg) if arg else 0.1
        return lambda x: amp * np.sin(2.0 * math.pi * np.asarray(x, dtype=float) / L)
    raise ValueError(f"unknown velocity profile {spec!r}")


@dataclass(frozen=True)
class ScenarioConfig:
    """One named experiment: initial profiles, physics, and a level ladder.

    ``levels`` must be strictly increasing with every entry a multiple of the
    coarsest, so that coarse cells are unions of fine cells and the Cauchy
    projections below are exact.  ``dt`` is only consulted when
    ``couple_dt_dx`` is off.
    """

    name: str
    rho0: str = "constant"
    u0: str = "zero"
    L: float = 1.0
    T: float = 0.25
    params: PhysParams = field(default_factory=PhysParams)
    levels: tuple[int, ...] = (64, 128, 256, 512)
    couple_dt_dx: bool = True
    dt: float | None = None

    def __post_init__(self) -> None:
        if not (self.L > 0 and self.T >= 0):
            raise ValueError("scenario needs L > 0 and T >= 0")
        if not self.levels:
            raise ValueError("scenario needs at least one level")
        if any(n <= 0 for n in self.levels):
            raise ValueError("levels must be positive")
        if list(self.levels) != sorted(set(self.levels)):
            raise ValueError("levels must be strictly increasing")
        base = self.levels[0]
        if any(n % base for n in self.levels):
            raise ValueError("every level must be a multiple of the coarsest")
        if not self.couple_dt_dx and self.dt is not None and self.dt <= 0:
            raise ValueError("decoupled dt must be positive")
        probe = np.linspace(0.0, self.L, 513)
        vals = np.asarray(self.rho0_fn(probe), dtype=float)
        if float(np.min(vals)) <= 0.0:
            raise ValueError("initial density must be strictly positive")
        self.u0_fn  # fail fast on a bad velocity spec

    @property
    def rho0_fn(self):
        return resolve_density_profile(self.rho0, self.L)

    @property
    def u0_fn(self) -> Callable:
        return resolve_velocity_profile(self.u0, self.L)

    def grid_for(self, n: int) -> GridSpec:
        dx = self.L / n
        dt = dx if self.couple_dt_dx else (self.dt if self.dt is not None else dx)
        return GridSpec(L=self.L, N=n, dt=dt, T=self.T)


def builtin_scenarios() -> tuple[ScenarioConfig, ...]:
    """The stock experiments: steady, smooth, discontinuous, and a gamma sweep.

    The smooth scenarios run at mu = 0.05: weak enough viscosity that the
    flow stays convection-dominated over the whole window, which keeps the
    signed error functionals away from accidental zero crossings and makes
    their decay under refinement monotone from N = 64 on.
    """
    smooth = dict(rho0="bump", u0="sin2pi")
    return (
        ScenarioConfig(name="constant"),
        ScenarioConfig(name="smooth-bump", params=PhysParams(mu=0.05), **smooth),
        ScenarioConfig(name="riemann-like", rho0="piecewise:0.5|2,1", u0="zero",
                       params=PhysParams(mu=0.05)),
        ScenarioConfig(name="gamma-1.6", params=PhysParams(gamma=1.6, mu=0.05), **smooth),
        ScenarioConfig(name="gamma-5over3", params=PhysParams(gamma=5.0 / 3.0, mu=0.05), **smooth),
        ScenarioConfig(name="gamma-1.9", params=PhysParams(gamma=1.9, mu=0.05), **smooth),
    )


# ======================================================================
# Exact fine-to-coarse comparisons
# ======================================================================


def project_cells(fine: np.ndarray, ratio: int) -> np.ndarray:
    """Box-average a fine cell field onto the coarse grid (conserves mass)."""
    if fine.size % ratio:
        raise ValueError("fine grid is not a refinement of the coarse grid")
    return fine.reshape(-1, ratio).mean(axis=1)


def restrict_faces(fine: np.ndarray, ratio: int) -> np.ndarray:
    """Sample a fine face field at the shared coarse face nodes."""
    return fine[::ratio]


def _linear_l2_sq(d: np.ndarray, dx: float) -> float:
    """Exact squared L2 norm of the piecewise-linear field with nodes d."""
    dl, dr = d[:-1], d[1:]
    return (dx / 3.0) * float(np.sum(dl * dl + dl * dr + dr * dr))


def cauchy_differences(coarse: Trajectory, fine: Trajectory) -> tuple[float, float]:
    """(L1-in-space-time density gap, L2-in-space-time velocity gap).

    Both trajectories are extended backward in time (state k on window
    (t^{k-1}, t^k]); each fine window compares against the coarse window that
    contains it.  Density is projected by exact box averages, velocity by
    restriction to the shared coarse nodes; the remaining integrals are then
    evaluated in closed form.  Only complete groups of nested windows enter.
    """
    ratio = fine.grid.N // coarse.grid.N
    if ratio * coarse.grid.N != fine.grid.N or ratio < 1:
        raise ValueError("fine level is not a multiple of the coarse level")
    mc, mf = len(coarse) - 1, len(fine) - 1
    tratio = max(round(coarse.grid.dt / fine.grid.dt), 1)
    groups = min(mc, mf // tratio)
    dt_f = fine.grid.dt
    dx_c = coarse.grid.dx
    l1 = 0.0
    l2_sq = 0.0
    for j in range(1, groups * tratio + 1):
        k = (j + tratio - 1) // tratio
        rho_gap = coarse.states[k].rho - project_cells(fine.states[j].rho, ratio)
        l1 += dt_f * dx_c * float(np.sum(np.abs(rho_gap)))
        u_gap = coarse.states[k].u - restrict_faces(fine.states[j].u, ratio)
        l2_sq += dt_f * _linear_l2_sq(u_gap, dx_c)
    return l1, math.sqrt(l2_sq)


# ======================================================================
# Refinement driver
# ======================================================================


_ORDER_FLOORS: dict[str, Callable[[float], float | None]] = {
    "E1": lambda gamma: (2.0 * gamma - 3.0) / (2.0 * gamma),
    "E2": lambda gamma: (3.0 * gamma - 4.0) / (2.0 * gamma),
    "P1": lambda gamma: 0.5,
    "P2": lambda gamma: 0.25,
    "cauchy_rho": lambda gamma: None,
    "cauchy_u": lambda gamma: None,
}


@dataclass(frozen=True)
class RefinementReport:
    """Everything a convergence study produced, as plain data.

    ``orders`` maps each decaying functional to {"magnitudes", "orders",
    "order", "floor"}; ``boundedness`` maps each monitored norm to its
    per-level values and max/min ratio; ``per_level`` holds one diagnostics
    summary dict per completed level.  ``flags`` collects advisory notes
    (regime violations, solver fallbacks, aborted levels); ``failed`` is set
    when a level's solve failed and the report is partial.
    """

    scenario: str
    levels: tuple[int, ...]
    hs: tuple[float, ...]
    per_level: tuple[dict, ...]
    cauchy_rho: tuple[float, ...]
    cauchy_u: tuple[float, ...]
    orders: dict[str, dict]
    boundedness: dict[str, dict]
    flags: tuple[str, ...]
    failed: bool = False


def _thread_budget(n_jobs: int) -> int:
    raw = os.environ.get("VISCO1D_THREADS", "").strip()
    if raw:
        try:
            cap = int(raw)
        except ValueError as exc:
            raise ValueError(f"VISCO1D_THREADS must be an integer, got {raw!r}") from exc
        return max(1, min(cap, n_jobs))
    return max(1, min(os.cpu_count() or 1, n_jobs))


def _level_summary(traj: Trajectory, phi, v) -> dict:
    ledger = diagnostics.energy_ledger(traj)
    masses = diagnostics.mass_history(traj)
    tol_eff = diagnostics.effective_newton_tol(traj)
    steps = len(traj) - 1
    flux = diagnostics.flux_ledger(traj) if steps else None
    pos = diagnostics.positivity_report(traj)
    summary = {
        "N": traj.grid.N,
        "h": traj.grid.dx,
        "steps": steps,
        "newton_tol_max": tol_eff,
        "max_iterations": max((m.iterations for m in traj.solver_meta), default=0),
        "fallback_steps": sum(m.fallback_used for m in traj.solver_meta),
        "mass_drift_rel": float(np.max(np.abs(masses - masses[0]))) / masses[0],
        "energy_balance_max": float(np.max(ledger.balance_residual)),
        "energy_tol": 100.0 * tol_eff * max(steps, 1),
        "diffusion_min_increment": min(
            (float(np.min(ledger.step_increments(nm))) for nm in ("N1", "N2", "N3", "N4")),
            default=0.0,
        )
        if steps
        else 0.0,
        "positivity_margin_min": pos.worst_margin if steps else math.inf,
        "E1": abs(flux.E1) if flux else 0.0,
        "E2": abs(flux.E2) if flux else 0.0,
        "flux_identity_gap": abs(flux.identity_gap) if flux else 0.0,
        "P1": abs(diagnostics.weak_residual_continuity(traj, phi)[1]) if steps else 0.0,
        "P2": abs(diagnostics.weak_residual_momentum(traj, v)[1]) if steps else 0.0,
        "rho_gamma_plus_1": diagnostics.rho_power_integral(traj),
    }
    summary.update(diagnostics.norm_suite(traj))
    return summary


def run_refinement(
    scenario: ScenarioConfig, solver: SolverConfig | None = None
) -> RefinementReport:
    """Run the scenario across its level ladder and assemble the report.

    Levels execute in a thread pool capped by VISCO1D_THREADS (results are
    reduced in level order, so the report is deterministic regardless of
    parallelism).  A failing level aborts the study: completed levels are
    reported, a flag records the failure, and ``failed`` is set.
    """
    solver = solver or SolverConfig()
    levels = scenario.levels
    if len(levels) < 3:
        raise ValueError("a refinement study needs at least 3 levels")
    # phi (even about L/2) probes the density equation; the momentum probe v
    # must be odd so it does not annihilate mirror-symmetric flows.
    phi, v = diagnostics.default_test_functions(scenario.L, scenario.T, js=(1, 2))

    def solve(n: int) -> Trajectory:
        return run(
            scenario,
            scenario.grid_for(n),
            scenario.params,
            solver,
            allow_decoupled_dt=not scenario.couple_dt_dx,
        )

    trajs: dict[int, Trajectory] = {}
    flags: list[str] = []
    failed = False
    workers = _thread_budget(len(levels))
    if workers == 1:
        results: dict[int, Trajectory | Exception] = {}
        for n in levels:
            try:
                results[n] = solve(n)
            except StepFailure as exc:
                results[n] = exc
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            futures = {n: pool.submit(solve, n) for n in levels}
            results = {}
            for n in levels:
                try:
                    results[n] = futures[n].result()
                except StepFailure as exc:
                    results[n] = exc

    for n in levels:
        res = results[n]
        if isinstance(res, Exception):
            flags.append(f"level {n} solve failed: {res}")
            failed = True
            break
        trajs[n] = res

    done = [n for n in levels if n in trajs]
    per_level = tuple(_level_summary(trajs[n], phi, v) for n in done)
    for row in per_level:
        if row["fallback_steps"]:
            flags.append(f"level {row['N']}: {row['fallback_steps']} fixed-point fallback steps")

    cauchy_rho: list[float] = []
    cauchy_u: list[float] = []
    for a, b in zip(done, done[1:]):
        l1, l2 = cauchy_differences(trajs[a], trajs[b])
        cauchy_rho.append(l1)
        cauchy_u.append(l2)

    orders: dict[str, dict] = {}
    # Decay orders are only meaningful on the dt = dx line, and need three
    # completed levels to telescope; otherwise report magnitudes alone.
    if len(done) >= 3 and scenario.couple_dt_dx:
        rates = diagnostics.error_rates([trajs[n] for n in done], phi=phi, v=v)
        for key in ("E1", "E2", "P1", "P2"):
            entry = dict(rates[key])
            entry["floor"] = _ORDER_FLOORS[key](scenario.params.gamma)
            orders[key] = entry
        hs_pairs = [scenario.L / n for n in done[:-1]]
        for key, series in (("cauchy_rho", cauchy_rho), ("cauchy_u", cauchy_u)):
            entry = diagnostics._summarize_orders(series, hs_pairs) if len(series) >= 2 else {
                "magnitudes": list(series),
                "orders": [],
                "order": None,
            }
            entry["floor"] = _ORDER_FLOORS[key](scenario.params.gamma)
            orders[key] = entry
        boundedness = {
            "rho_gamma_plus_1": dict(rates["rho_gamma_plus_1"]),
        }
    else:
        values = [row["rho_gamma_plus_1"] for row in per_level]
        finite = [x for x in values if x > 0.0]
        boundedness = {
            "rho_gamma_plus_1": {
                "values": values,
                "max_over_min": (max(finite) / min(finite)) if finite else 1.0,
            }
        }

    for key in (
        "rho_Linf_Lgamma",
        "pressure_Linf_L1",
        "u_L2_H1",
        "u_L2_Linf",
        "momentum_Linf_Lr",
        "kinetic_Linf_L1",
        "rho_u_L2_Lgamma",
        "rho_u2_L2_Lr",
    ):
        values = [row[key] for row in per_level]
        finite = [x for x in values if x > 0.0]
        ratio = (max(finite) / min(finite)) if finite else 1.0
        boundedness[key] = {"values": values, "max_over_min": ratio}

    if not scenario.couple_dt_dx:
        flags.append("outside convergence-theory regime (dt decoupled from dx)")
    if not scenario.params.in_theory_range:
        flags.append(
            f"gamma={scenario.params.gamma:g} outside 3/2<gamma<2 convergence regime"
        )

    return RefinementReport(
        scenario=scenario.name,
        levels=tuple(done),
        hs=tuple(scenario.L / n for n in done),
        per_level=per_level,
        cauchy_rho=tuple(cauchy_rho),
        cauchy_u=tuple(cauchy_u),
        orders=orders,
        boundedness=boundedness,
        flags=tuple(flags),
        failed=failed,
    )
