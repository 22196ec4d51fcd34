"""Discrete spatial operators on the staggered grid.

Two field layouts appear everywhere:

* cell fields — length ``N``, indexed by cells;
* face fields — length ``N+1``, indexed by faces (both wall faces included).

``diff_face`` maps cells to interior faces, ``diff_cell`` maps faces to cells,
and they are adjoint up to sign (summation by parts) whenever the face field
vanishes at the walls.  The two inverse operators at the bottom —
``neumann_inv_grad`` (gradient of a zero-flux inverse Laplacian on cells) and
``dirichlet_inv_grad`` (negative gradient of a wall-pinned inverse Laplacian
on faces) — satisfy the duality

    dx * sum_faces v * neumann_inv_grad(f)  ==  -dx * sum_cells dirichlet_inv_grad(v) * f

for every mean-zero cell field ``f`` and interior face field ``v``.  That
identity is what lets the flux-balance diagnostic trade a face-paired test
field for a cell-paired one, so it is verified here both by a closed-form
prefix sum and by an independent tridiagonal solve.
"""

from __future__ import annotations

import numpy as np
from scipy.linalg import solve_banded

__all__ = [
    "upwind_mass_flux",
    "upwind_momentum_flux",
    "diff_face",
    "diff_cell",
    "laplace_velocity",
    "neumann_inv_grad",
    "neumann_inv_grad_via_solve",
    "dirichlet_inv_grad",
]


def _split_upwind(u: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    return np.maximum(u, 0.0), np.minimum(u, 0.0)


# ======================================================================
# First-order operators
# ======================================================================


def upwind_mass_flux(rho: np.ndarray, u: np.ndarray) -> np.ndarray:
    """Donor-cell mass flux at faces: rho_left*u+ + rho_right*u-.

    Wall faces return exactly zero (their velocity is zero by the no-slip
    condition, and there is no donor cell beyond the wall).
    """
    rho = np.asarray(rho, dtype=float)
    u = np.asarray(u, dtype=float)
    if u.size != rho.size + 1:
        raise ValueError(f"face/cell size mismatch: {u.size} vs {rho.size}")
    up, um = _split_upwind(u[1:-1])
    flux = np.zeros(u.size)
    flux[1:-1] = rho[:-1] * up + rho[1:] * um
    return flux


def upwind_momentum_flux(
    rho: np.ndarray, hat_u: np.ndarray, u: np.ndarray
) -> np.ndarray:
    """Donor-cell flux of the averaged momentum rho*hat_u, at faces."""
    return upwind_mass_flux(np.asarray(rho, dtype=float) * np.asarray(hat_u, dtype=float), u)


def diff_face(cellfield: np.ndarray, dx: float) -> np.ndarray:
    """Difference quotient cells -> interior faces: (f[i+1] - f[i]) / dx."""
    f = np.asarray(cellfield, dtype=float)
    return (f[1:] - f[:-1]) / dx


def diff_cell(facefield: np.ndarray, dx: float) -> np.ndarray:
    """Difference quotient faces -> cells: (v[i+1] - v[i]) / dx."""
    v = np.asarray(facefield, dtype=float)
    return (v[1:] - v[:-1]) / dx


def laplace_velocity(u: np.ndarray, dx: float) -> np.ndarray:
    """Three-point Laplacian of a face field, on interior faces only."""
    u = np.asarray(u, dtype=float)
    return (u[:-2] - 2.0 * u[1:-1] + u[2:]) / dx**2


# ======================================================================
# Inverse Laplacians (only their gradients are ever exposed)
# ======================================================================


def _require_mean_zero(f: np.ndarray, dx: float) -> None:
    mean_tol = 1e-10 * (1.0 + float(np.max(np.abs(f), initial=0.0)))
    total = dx * float(f.sum())
    if abs(total) > mean_tol:
        raise ValueError(
            f"source must have zero mean: dx*sum(f) = {total:g} exceeds {mean_tol:g}"
        )


def neumann_inv_grad(f: np.ndarray, dx: float) -> np.ndarray:
    """Gradient (at faces) of the zero-flux inverse Laplacian of a cell field.

    Defined only for mean-zero sources.  The gradient has the closed form of a
    prefix sum, r[j+1] = dx * (f[0] + ... + f[j]), with both wall values zero;
    the potential itself is determined only up to a constant and never leaves
    this module.
    """
    f = np.asarray(f, dtype=float)
    _require_mean_zero(f, dx)
    r = np.zeros(f.size + 1)
    np.cumsum(f[:-1], out=r[1:-1])
    r[1:-1] *= dx
    return r


def neumann_inv_grad_via_solve(f: np.ndarray, dx: float) -> np.ndarray:
    """Independent oracle for ``neumann_inv_grad`` via a tridiagonal solve.

    Assembles the zero-flux (ghost-cell) Laplacian -(q[i-1] - 2q[i] + q[i+1])/dx^2
    with reflected ghosts q[-1] = q[0], q[N] = q[N-1], pins q[0] = 0 to fix the
    additive constant, solves, and differentiates.  Exists so the prefix-sum
    path above can be cross-checked rather than trusted.
    """
    f = np.asarray(f, dtype=float)
    _require_mean_zero(f, dx)
    n = f.size
    if n == 1:
        return np.zeros(2)
    # Rows 1..n-1 are the interior/reflected-Neumann rows; row 0 pins q[0]=0.
    ab = np.zeros((3, n))
    ab[0, 1:] = -1.0 / dx**2  # superdiagonal
    ab[2, :-1] = -1.0 / dx**2  # subdiagonal
    ab[1, :] = 2.0 / dx**2
    ab[1, -1] = 1.0 / dx**2  # reflected ghost at the right wall
    rhs = f.copy()
    # Pin the first unknown: replace row 0 by q[0] = 0.
    ab[1, 0] = 1.0
    ab[0, 1] = 0.0
    rhs[0] = 0.0
    # The pinned row breaks the usual row 0 (whose Neumann form is
    # (q[0]-q[1])/dx^2 = f[0]); that information is redundant for mean-zero f,
    # which is exactly why the operator needs the mean-zero precondition.
    q = solve_banded((1, 1), ab, rhs)
    grad = np.zeros(n + 1)
    grad[1:-1] = (q[1:] - q[:-1]) / dx
    return -grad


def dirichlet_inv_grad(v: np.ndarray, dx: float) -> np.ndarray:
    """Negative cell gradient of the wall-pinned inverse Laplacian of ``v``.

    ``v`` lives on the N-1 interior faces.  Solves -(w[j-1]-2w[j]+w[j+1])/dx^2
    = v[j] with w = 0 at both wall faces (an SPD tridiagonal system), then
    returns -diff_cell(w), a cell field.  Its entries always sum to zero
    (the gradient of a field pinned to zero at both ends telescopes away),
    which is what makes it blind to constant shifts of its duality partner.
    """
    v = np.asarray(v, dtype=float)
    n = v.size  # number of interior faces = N - 1
    if n == 0:
        raise ValueError("need at least one interior face (N >= 2)")
    ab = np.zeros((3, n))
    ab[0, 1:] = -1.0 / dx**2
    ab[2, :-1] = -1.0 / dx**2
    ab[1, :] = 2.0 / dx**2
    w = solve_banded((1, 1), ab, v)
    w_full = np.zeros(n + 2)
    w_full[1:-1] = w
    return -diff_cell(w_full, dx)
