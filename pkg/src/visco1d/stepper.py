"""Implicit time stepping for the staggered upwind scheme.

One step advances (rho, u) by solving the coupled nonlinear system

    continuity, cell i:   (rho_i - rho_i^old)/dt + d_i Up(rho u) = 0
    momentum, face f:     d_t[(m_{f-1} + m_f)/2]
                          + (UpM_{f+1} - UpM_{f-1})/(2 dx)
                          + (p(rho_f) - p(rho_{f-1}))/dx
                          - mu * (u_{f-1} - 2 u_f + u_{f+1})/dx^2  = 0

with m_i = rho_i * hat_u_i, Up the donor-cell mass flux, UpM the donor-cell
flux of the averaged momentum, and p(rho) = a * rho**gamma.  Unknowns are
interleaved as (rho_0, u_1, rho_1, u_2, ..., rho_{N-1}), giving a banded
Jacobian with at most four sub- and four super-diagonals (the momentum row at
face f reaches u_{f+-2} through the neighbouring momentum fluxes), solved by
banded LU.

The Newton iteration uses the active-set derivative of the upwind switches
(d u+/du = 1 for u > 0 else 0, and symmetrically for u-; zero exactly at the
kink), damps its steps until every density stays positive, and — because the
downstream identity checks want residuals near machine precision, not merely
below the acceptance tolerance — keeps polishing while the residual still
drops geometrically.  On stagnation above tolerance it falls back to a Picard
splitting whose continuity half is a tridiagonal M-matrix solve: that half
preserves positivity and conserves mass exactly, so the fallback is slow but
safe.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import scipy.sparse
from scipy.linalg import solve_banded

from .grid import FluidState, GridSpec, PhysParams, Trajectory, init_state

__all__ = [
    "StepResidual",
    "SolverConfig",
    "StepMeta",
    "StepFailure",
    "assemble_residual",
    "assemble_jacobian",
    "advance",
    "run",
]

_BANDS = (4, 4)  # Jacobian sub/super-diagonal count in interleaved ordering


# ======================================================================
# Data types
# ======================================================================


@dataclass(frozen=True)
class StepResidual:
    """Residual of one implicit step: N continuity rows, N-1 momentum rows."""

    cont: np.ndarray
    mom: np.ndarray

    @property
    def max_norm(self) -> float:
        cont_max = float(np.max(np.abs(self.cont), initial=0.0))
        mom_max = float(np.max(np.abs(self.mom), initial=0.0))
        return max(cont_max, mom_max)


@dataclass(frozen=True)
class SolverConfig:
    """Newton/Picard knobs.

    newton_tol: accepted residual max-norm.  ``None`` (default) resolves
        per step to 1e-10 * (1 + |residual at the initial guess|).
    max_newton_iters: Newton iteration cap (counted as residual evaluations).
    damping: backtracking factor in (0, 1) for the positivity line search.
    fallback: Picard sweep cap used when Newton stagnates above tolerance.
    regularize_upwind: if > 0, width of a smooth blend replacing the
        active-set derivative of u+ / u- in the Jacobian only; the residual
        always uses the exact upwind values, so the scheme itself is
        unchanged.
    polish_floor: scale of the near-machine residual floor the solver keeps
        polishing toward once newton_tol is met (exact-identity diagnostics
        and the mass budget rely on this).
    """

    newton_tol: float | None = None
    max_newton_iters: int = 50
    damping: float = 0.5
    fallback: int = 500
    regularize_upwind: float = 0.0
    polish_floor: float = 1e-14

    def __post_init__(self) -> None:
        if self.newton_tol is not None and not (self.newton_tol > 0):
            raise ValueError("newton_tol must be positive (or None for adaptive)")
        if not (0.0 < self.damping < 1.0):
            raise ValueError(f"damping must lie in (0,1), got {self.damping}")
        if self.max_newton_iters < 1:
            raise ValueError("max_newton_iters must be at least 1")
        if self.fallback < 0 or self.regularize_upwind < 0 or self.polish_floor <= 0:
            raise ValueError("fallback/regularize_upwind/polish_floor out of range")


@dataclass(frozen=True)
class StepMeta:
    """What one advance() did: iteration counts and the accepted residual."""

    iterations: int
    residual_norm: float
    tol: float
    floor: float
    backtracks: int = 0
    fallback_used: bool = False
    fallback_iterations: int = 0


class StepFailure(RuntimeError):
    """Raised when a step cannot be converged; carries a diagnostic dump."""

    def __init__(self, message: str, k: int, residual_history, min_rho: float):
        hist = ", ".join(f"{r:.3e}" for r in residual_history[-8:])
        super().__init__(
            f"{message} (step k={k}, min rho={min_rho:.6e}, "
            f"recent residual norms: [{hist}])"
        )
        self.k = k
        self.residual_history = list(residual_history)
        self.min_rho = min_rho


# ======================================================================
# Residual
# ======================================================================


def _hat(u: np.ndarray) -> np.ndarray:
    return 0.5 * (u[:-1] + u[1:])


def _upwind_faces(rho_or_m: np.ndarray, up: np.ndarray, um: np.ndarray) -> np.ndarray:
    """Donor-cell flux on the full face range, zero at the walls."""
    flux = np.zeros(rho_or_m.size + 1)
    flux[1:-1] = rho_or_m[:-1] * up[1:-1] + rho_or_m[1:] * um[1:-1]
    return flux


def _residual_arrays(
    rho_old: np.ndarray,
    w_old: np.ndarray,
    rho: np.ndarray,
    u: np.ndarray,
    grid: GridSpec,
    params: PhysParams,
) -> tuple[np.ndarray, np.ndarray]:
    """Continuity and momentum residuals; w_old = face-averaged old momentum."""
    dt, dx = grid.dt, grid.dx
    up = np.maximum(u, 0.0)
    um = np.minimum(u, 0.0)
    flux = _upwind_faces(rho, up, um)
    cont = (rho - rho_old) / dt + (flux[1:] - flux[:-1]) / dx

    m = rho * _hat(u)
    w = 0.5 * (m[:-1] + m[1:])
    mflux = _upwind_faces(m, up, um)
    p = params.pressure(rho)
    mom = (
        (w - w_old) / dt
        + (mflux[2:] - mflux[:-2]) / (2.0 * dx)
        + (p[1:] - p[:-1]) / dx
        - params.mu * (u[:-2] - 2.0 * u[1:-1] + u[2:]) / dx**2
    )
    return cont, mom


def _old_fields(prev: FluidState) -> tuple[np.ndarray, np.ndarray]:
    m_old = prev.rho * _hat(prev.u)
    return prev.rho, 0.5 * (m_old[:-1] + m_old[1:])


def assemble_residual(
    prev: FluidState, trial: FluidState, grid: GridSpec, params: PhysParams
) -> StepResidual:
    """Residual of the implicit step taking ``prev`` to ``trial``.

    ``trial`` must have positive density and zero wall velocities (enforced by
    FluidState itself).  Both wall fluxes vanish, so no stencil ever reaches
    beyond the domain.
    """
    if trial.N != prev.N:
        raise ValueError("states live on different grids")
    rho_old, w_old = _old_fields(prev)
    cont, mom = _residual_arrays(rho_old, w_old, trial.rho, trial.u, grid, params)
    return StepResidual(cont=cont, mom=mom)


# ======================================================================
# Jacobian
# ======================================================================


def _upwind_switch(
    u: np.ndarray, eps: float
) -> tuple[np.ndarray, np.ndarray]:
    """Derivatives of u+ and u- w.r.t. u: active set, or a smooth blend."""
    if eps > 0.0:
        root = np.sqrt(u * u + eps * eps)
        sp = 0.5 * (1.0 + u / root)
        return sp, 1.0 - sp
    return (u > 0.0).astype(float), (u < 0.0).astype(float)


def _jacobian_coo(
    rho: np.ndarray,
    u: np.ndarray,
    grid: GridSpec,
    params: PhysParams,
    eps: float = 0.0,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """All Jacobian entries as (row, col, value) in interleaved indexing.

    Row/col map: rho_i <-> 2i, u_f <-> 2f-1.  Entries repeat per (term,
    neighbour) pair; duplicates are summed by the consumers.
    """
    n = rho.size
    dt, dx = grid.dt, grid.dx
    up = np.maximum(u, 0.0)
    um = np.minimum(u, 0.0)
    sp, sm = _upwind_switch(u, eps)
    sp[0] = sm[0] = sp[-1] = sm[-1] = 0.0  # wall velocities are not unknowns
    hat = _hat(u)
    m = rho * hat
    dp = params.dpressure(rho)

    rows: list[np.ndarray] = []
    cols: list[np.ndarray] = []
    vals: list[np.ndarray] = []

    def add(r: np.ndarray, c: np.ndarray, v: np.ndarray) -> None:
        rows.append(np.asarray(r, dtype=np.intp))
        cols.append(np.asarray(c, dtype=np.intp))
        vals.append(np.asarray(v, dtype=float))

    cells = np.arange(n)
    # ---- continuity rows (2i) ----
    add(2 * cells, 2 * cells, 1.0 / dt + (up[1:] - um[:-1]) / dx)
    i = cells[:-1]  # coupling to the right neighbour exists for i <= N-2
    add(2 * i, 2 * i + 2, um[i + 1] / dx)
    add(2 * i, 2 * i + 1, (rho[i] * sp[i + 1] + rho[i + 1] * sm[i + 1]) / dx)
    i = cells[1:]
    add(2 * i, 2 * i - 2, -up[i] / dx)
    add(2 * i, 2 * i - 1, -(rho[i - 1] * sp[i] + rho[i] * sm[i]) / dx)

    # ---- momentum rows (2f-1), f = 1..N-1 ----
    f = np.arange(1, n)
    row = 2 * f - 1

    # time term d_t (m_{f-1} + m_f)/2 with hat_u linear in u
    add(row, 2 * (f - 1), hat[f - 1] / (2.0 * dt))
    add(row, 2 * f, hat[f] / (2.0 * dt))
    add(row, 2 * f - 1, (rho[f - 1] + rho[f]) / (4.0 * dt))
    g = f[f - 1 >= 1]
    add(2 * g - 1, 2 * (g - 1) - 1, rho[g - 1] / (4.0 * dt))
    g = f[f + 1 <= n - 1]
    add(2 * g - 1, 2 * (g + 1) - 1, rho[g] / (4.0 * dt))

    # pressure gradient
    add(row, 2 * f, dp[f] / dx)
    add(row, 2 * (f - 1), -dp[f - 1] / dx)

    # viscous Laplacian
    add(row, 2 * f - 1, np.full(f.size, 2.0 * params.mu / dx**2))
    g = f[f - 1 >= 1]
    add(2 * g - 1, 2 * (g - 1) - 1, np.full(g.size, -params.mu / dx**2))
    g = f[f + 1 <= n - 1]
    add(2 * g - 1, 2 * (g + 1) - 1, np.full(g.size, -params.mu / dx**2))

    # convection (UpM_{f+1} - UpM_{f-1}) / (2 dx); UpM at the walls is zero,
    # so only interior neighbour faces g contribute.
    c2 = 2.0 * dx

    def mflux_block(face_rows: np.ndarray, g: np.ndarray, sign: float) -> None:
        """d/d(unknowns) of sign * UpM_g / (2 dx) added to the given rows."""
        add(face_rows, 2 * (g - 1), sign * hat[g - 1] * up[g] / c2)
        add(face_rows, 2 * g, sign * hat[g] * um[g] / c2)
        add(
            face_rows,
            2 * g - 1,
            sign
            * (m[g - 1] * sp[g] + m[g] * sm[g] + 0.5 * rho[g - 1] * up[g] + 0.5 * rho[g] * um[g])
            / c2,
        )
        keep = g - 1 >= 1
        add(face_rows[keep], 2 * (g[keep] - 1) - 1, sign * 0.5 * rho[g[keep] - 1] * up[g[keep]] / c2)
        keep = g + 1 <= n - 1
        add(face_rows[keep], 2 * (g[keep] + 1) - 1, sign * 0.5 * rho[g[keep]] * um[g[keep]] / c2)

    right = f[f + 1 <= n - 1]
    mflux_block(2 * right - 1, right + 1, +1.0)
    left = f[f - 1 >= 1]
    mflux_block(2 * left - 1, left - 1, -1.0)

    return np.concatenate(rows), np.concatenate(cols), np.concatenate(vals)


def assemble_jacobian(
    prev: FluidState,
    trial: FluidState,
    grid: GridSpec,
    params: PhysParams,
    regularize_upwind: float = 0.0,
) -> scipy.sparse.csr_matrix:
    """Exact Jacobian of assemble_residual w.r.t. (trial.rho, interior trial.u).

    Rows follow the interleaved unknown ordering (rho_0, u_1, rho_1, ...);
    ``prev`` only sets the time-difference origin, so it never appears in the
    derivative.  Upwind kinks use the active-set convention unless a
    regularization width is supplied.
    """
    del prev  # the residual is affine in the old state
    r, c, v = _jacobian_coo(trial.rho, trial.u, grid, params, regularize_upwind)
    size = 2 * trial.N - 1
    return scipy.sparse.coo_matrix((v, (r, c)), shape=(size, size)).tocsr()


def _jacobian_ab(
    rho: np.ndarray, u: np.ndarray, grid: GridSpec, params: PhysParams, eps: float
) -> np.ndarray:
    """Jacobian in solve_banded layout: ab[4 + r - c, c]."""
    r, c, v = _jacobian_coo(rho, u, grid, params, eps)
    size = 2 * rho.size - 1
    ab = np.zeros((_BANDS[0] + _BANDS[1] + 1, size))
    np.add.at(ab, (_BANDS[1] + r - c, c), v)
    return ab


# ======================================================================
# Nonlinear solves
# ======================================================================


def _interleave(cont: np.ndarray, mom: np.ndarray) -> np.ndarray:
    out = np.empty(cont.size + mom.size)
    out[0::2] = cont
    out[1::2] = mom
    return out


def _positivity_step(
    rho: np.ndarray, drho: np.ndarray, lam: float, damping: float
) -> tuple[float, int]:
    """Shrink lam until rho + lam*drho stays strictly positive."""
    backtracks = 0
    while np.min(rho + lam * drho) <= 0.0:
        lam *= damping
        backtracks += 1
        if backtracks > 200:
            raise FloatingPointError("positivity backtracking collapsed the step")
    return lam, backtracks


def _picard_sweeps(
    rho: np.ndarray,
    u: np.ndarray,
    rho_old: np.ndarray,
    w_old: np.ndarray,
    grid: GridSpec,
    params: PhysParams,
    cfg: SolverConfig,
    tol: float,
    k: int,
    history: list[float],
) -> tuple[np.ndarray, np.ndarray, int, float]:
    """Relaxed alternating linear solves: continuity in rho, momentum in u.

    The continuity matrix has positive diagonal, nonpositive off-diagonals,
    and column sums exactly 1/dt: an M-matrix, so the solved density is
    positive and mass is conserved to rounding.  The momentum solve keeps the
    time and viscous couplings implicit and lags convection and pressure.
    With dt = dx the acoustic rho<->u coupling makes the raw alternation
    expansive, so each sweep is blended into the current iterate with a
    relaxation weight tuned by backtracking: halved while the residual grows,
    nudged back up after clean progress.  Blending preserves both positivity
    (a convex combination of positive fields) and the exact mass sum.
    """
    dt, dx = grid.dt, grid.dx
    n = rho.size

    def residual_norm(r: np.ndarray, w: np.ndarray) -> float:
        cont, mom = _residual_arrays(rho_old, w_old, r, w, grid, params)
        return max(float(np.max(np.abs(cont))), float(np.max(np.abs(mom))))

    nr = residual_norm(rho, u)
    omega = 1.0
    for sweep in range(1, cfg.fallback + 1):
        up = np.maximum(u, 0.0)
        um = np.minimum(u, 0.0)

        ab = np.zeros((3, n))
        ab[1, :] = 1.0 / dt + (up[1:] - um[:-1]) / dx
        ab[0, 1:] = um[1:-1] / dx
        ab[2, :-1] = -up[1:-1] / dx
        rho_t = solve_banded((1, 1), ab, rho_old / dt)
        if np.min(rho_t) <= 0.0:
            raise StepFailure("fixed-point continuity solve lost positivity", k, history, float(np.min(rho_t)))

        hat = _hat(u)
        m = rho_t * hat
        mflux = _upwind_faces(m, up, um)
        p = params.pressure(rho_t)
        rhs = w_old / dt - (mflux[2:] - mflux[:-2]) / (2.0 * dx) - (p[1:] - p[:-1]) / dx
        abm = np.zeros((3, n - 1))
        abm[1, :] = (rho_t[:-1] + rho_t[1:]) / (4.0 * dt) + 2.0 * params.mu / dx**2
        abm[0, 1:] = rho_t[1:-1] / (4.0 * dt) - params.mu / dx**2
        abm[2, :-1] = rho_t[1:-1] / (4.0 * dt) - params.mu / dx**2
        u_t = np.zeros(n + 1)
        u_t[1:-1] = solve_banded((1, 1), abm, rhs)

        while True:
            rho_new = rho + omega * (rho_t - rho)
            u_new = u + omega * (u_t - u)
            nr_new = residual_norm(rho_new, u_new)
            if nr_new <= nr or omega <= 1.0 / 1024.0:
                break
            omega *= 0.5
        rho, u, made_progress = rho_new, u_new, nr_new < nr
        nr = nr_new
        history.append(nr)
        if nr <= tol:
            return rho, u, sweep, nr
        if made_progress:
            omega = min(1.0, 1.5 * omega)
    raise StepFailure(
        "fixed-point fallback exhausted its sweep budget", k, history, float(np.min(rho))
    )


def _check_divergence_bound(
    prev: FluidState, rho: np.ndarray, u: np.ndarray, grid: GridSpec, nr: float, k: int
) -> None:
    """Provable per-step floor on the density minimum.

    At the cell where the new density attains its minimum, the neighbours are
    at least as large, so the continuity update forces
    min rho_new >= (min rho_old - dt*|residual|) / (1 + dt * max (div u)+).
    Violations indicate a solver bug, so this is a hard check.  (The commonly
    quoted variant with max|u| in place of the divergence is generally false
    for this discretization - wall cells break it - and is only *reported*,
    by diagnostics.positivity_report.)
    """
    div = (u[1:] - u[:-1]) / grid.dx
    denom = 1.0 + grid.dt * max(float(np.max(div, initial=0.0)), 0.0)
    bound = (float(np.min(prev.rho)) - grid.dt * nr) / denom
    if float(np.min(rho)) < bound - 1e-12 * (1.0 + bound):
        raise StepFailure(
            "accepted state undercuts the provable positivity floor", k, [nr], float(np.min(rho))
        )


def advance(
    prev: FluidState, grid: GridSpec, params: PhysParams, cfg: SolverConfig | None = None
) -> tuple[FluidState, StepMeta]:
    """One implicit step from ``prev``; returns the new state and its StepMeta.

    Iterations are counted as residual evaluations, so a state that already
    satisfies the scheme (e.g. any constant state) reports one iteration and
    performs zero linear solves.
    """
    cfg = cfg or SolverConfig()
    if prev.N != grid.N:
        raise ValueError("state/grid size mismatch")
    rho_old, w_old = _old_fields(prev)
    rho = prev.rho.copy()
    u = prev.u.copy()
    k = prev.k + 1

    history: list[float] = []
    tol = floor = math.nan
    nr_prev = math.inf
    backtracks = 0
    eps = cfg.regularize_upwind

    for it in range(1, cfg.max_newton_iters + 1):
        cont, mom = _residual_arrays(rho_old, w_old, rho, u, grid, params)
        nr = max(float(np.max(np.abs(cont))), float(np.max(np.abs(mom))))
        history.append(nr)
        if it == 1:
            tol = cfg.newton_tol if cfg.newton_tol is not None else 1e-10 * (1.0 + nr)
            floor = cfg.polish_floor * (1.0 + nr)
        stalled = nr > 0.5 * nr_prev
        if nr <= floor or (nr <= tol and stalled) or (nr <= tol and it == cfg.max_newton_iters):
            meta = StepMeta(it, nr, tol, floor, backtracks, False, 0)
            _check_divergence_bound(prev, rho, u, grid, nr, k)
            return FluidState(rho=rho, u=u, k=k), meta
        diverging = not math.isfinite(nr) or (it >= 5 and stalled and nr > tol)
        if diverging or it == cfg.max_newton_iters:
            break  # hand over to the fixed-point fallback

        ab = _jacobian_ab(rho, u, grid, params, eps)
        resid = _interleave(cont, mom)
        try:
            delta = solve_banded(_BANDS, ab, -resid)
        except np.linalg.LinAlgError:
            break
        if not np.all(np.isfinite(delta)):
            break
        drho = delta[0::2]
        du = delta[1::2]
        try:
            lam, bt = _positivity_step(rho, drho, 1.0, cfg.damping)
        except FloatingPointError:
            break
        backtracks += bt
        rho = rho + lam * drho
        u = u.copy()
        u[1:-1] += lam * du
        nr_prev = nr

    rho, u, sweeps, nr = _picard_sweeps(
        prev.rho.copy(), prev.u.copy(), rho_old, w_old, grid, params, cfg, tol, k, history
    )
    meta = StepMeta(len(history), nr, tol, floor, backtracks, True, sweeps)
    _check_divergence_bound(prev, rho, u, grid, nr, k)
    return FluidState(rho=rho, u=u, k=k), meta


def run(
    scenario,
    grid: GridSpec,
    params: PhysParams,
    cfg: SolverConfig | None = None,
    allow_decoupled_dt: bool = False,
) -> Trajectory:
    """March the scheme from the scenario's initial data to grid.T.

    ``scenario`` is anything with ``rho0``/``u0`` attributes (such as
    harness.ScenarioConfig), a plain (rho0, u0) pair of callables, or an
    initial FluidState.  Unless ``allow_decoupled_dt`` is set, requires the
    refinement coupling dt == dx; the choice is recorded in the trajectory's
    ``meta``.
    """
    cfg = cfg or SolverConfig()
    coupled = abs(grid.dt - grid.dx) <= 1e-12 * grid.dx
    if not coupled and not allow_decoupled_dt:
        raise ValueError(
            f"dt={grid.dt} != dx={grid.dx}; pass allow_decoupled_dt=True to override"
        )

    if isinstance(scenario, FluidState):
        state = scenario
        if state.k != 0:
            state = FluidState(rho=state.rho, u=state.u, k=0)
    else:
        if isinstance(scenario, tuple):
            rho0, u0 = scenario
        else:
            # scenario objects may hold profile *specs* (strings) in rho0/u0
            # and expose the resolved callables as rho0_fn/u0_fn
            rho0 = getattr(scenario, "rho0_fn", None)
            u0 = getattr(scenario, "u0_fn", None)
            if rho0 is None:
                rho0 = scenario.rho0
            if u0 is None:
                u0 = scenario.u0
        state = init_state(grid, rho0, u0)

    states = [state]
    metas = []
    for _ in range(grid.M_steps):
        try:
            state, meta = advance(state, grid, params, cfg)
        except StepFailure as exc:
            raise StepFailure(
                f"run aborted: {exc}", exc.k, exc.residual_history, exc.min_rho
            ) from exc
        states.append(state)
        metas.append(meta)
    return Trajectory(
        grid=grid,
        params=params,
        states=tuple(states),
        solver_meta=tuple(metas),
        meta={"dt_dx_coupled": coupled},
    )
