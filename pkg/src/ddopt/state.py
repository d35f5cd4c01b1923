"""Nonlinear state solver for the coupled flow-transport scheme.

The discrete state system is advanced by frozen-coefficient (Picard) steps
that switch to exact-Jacobian Newton steps once the iterate is in the
attraction basin: each step solves one monolithic linear saddle-point
system with the viscosity at the current temperature, the advecting
velocity in both upwind convection blocks, the affine buoyancy implicit,
and the pressure mean fixed by a scalar Lagrange multiplier (handled as a
bordered system to keep the factorization sparse).  Dirichlet dofs
(velocity on the whole boundary, transported scalars on the Dirichlet
part) are eliminated and carried by a discrete lifting.

``StateStepper`` exposes single steps so the optimization loop can
interleave state linearizations with active-set updates; ``solve_state``
drives the stepper to the increment tolerance.
"""

from dataclasses import dataclass

import numpy as np
from scipy import sparse as sp

from . import assembly as asm
from .linalg import BorderedSolver
from .norms import broken_velocity_norm, broken_transport_norm
from .quadrature import tri_quadrature
from .spaces import (CRVectorField, P0Field, cr_basis_values,
                     cr_values_on_cells, cr_cell_gradients)

__all__ = ["NonlinearSettings", "StateSolution", "NonconvergenceError",
           "DivergedError", "StateStepper", "solve_state", "state_residual",
           "max_cell_div"]


class NonconvergenceError(RuntimeError):
    """The nonlinear iteration ran out of steps; carries the increments."""

    def __init__(self, message, increments):
        super().__init__(message)
        self.increments = list(increments)


class DivergedError(RuntimeError):
    """A NaN/Inf appeared in an iterate."""


@dataclass
class NonlinearSettings:
    """Nonlinear-iteration controls.

    ``tol`` is a dimensionless increment tolerance (measured relative to
    1 + the broken norms of the iterate), ``damping`` applies to the
    Picard phase; Newton acceleration is used only with full steps.
    """
    tol: float = 1e-10
    max_iter: int = 100
    damping: float = 1.0

    def __post_init__(self):
        if self.tol <= 0:
            raise ValueError("tol must be positive")
        if not 0 < self.damping <= 1:
            raise ValueError("damping must lie in (0, 1]")


@dataclass
class StateSolution:
    """Converged state (u, p, y) plus solve metadata.

    ``y_dirichlet_edges`` records which boundary edges carried transported
    Dirichlet data; the adjoint solver reuses the set with zero values.
    """
    u: CRVectorField
    p: P0Field
    y: CRVectorField
    pressure_multiplier: float
    iterations: int
    increments: list
    y_dirichlet_edges: np.ndarray
    penalty_a0: float = 0.0

    def max_divergence(self):
        return max_cell_div(self.u.mesh, self.u.dof)


def max_cell_div(mesh, u_dof):
    """Max over cells of |div u_h| (the divergence is cellwise constant)."""
    g = cr_cell_gradients(mesh, u_dof)
    return float(np.abs(g[:, 0, 0] + g[:, 1, 1]).max())


def _balance_boundary_flux(mesh, values):
    """Remove the net normal flux from prescribed velocity edge averages.

    The cellwise-exact divergence constraint is only attainable when the
    discrete boundary flux sum_e |e| u_e . n_e vanishes; edge quadrature of
    non-polynomial data leaves an O(h^4) defect which is subtracted here as
    a uniform normal correction.
    """
    edges = mesh.boundary_edges
    n = mesh.edge_normal[edges]
    h = mesh.h_edge[edges]
    flux = float(np.sum(h * np.sum(values * n, axis=1)))
    perimeter = float(np.sum(h))
    return values - (flux / perimeter) * n


def _buoyancy_load(mesh, params, y_dof):
    """(F(y_h), v) by quadrature, for buoyancy lagged to the right side."""
    bary, w = tri_quadrature()
    psi = cr_basis_values(bary)
    wts = w[None, :] * mesh.area_cell[:, None]
    yq = cr_values_on_cells(mesh, y_dof, bary)
    Fq = params.buoyancy_at(yq)
    loc = np.einsum("cq,cqd,qi->cid", wts, Fq, psi)
    b = np.zeros(2 * mesh.num_edges)
    idx = 2 * mesh.cell_edges[:, :, None] + np.arange(2)[None, None, :]
    np.add.at(b, idx.ravel(), loc.ravel())
    return b


class _Dofs:
    """Free/fixed dof bookkeeping for one solve."""

    def __init__(self, mesh, y_bc, u_bc):
        ne = mesh.num_edges
        self.mesh = mesh
        bdry = mesh.boundary_edges

        self.u_fixed_edges = bdry
        self.u_free_edges = mesh.interior_edges
        u_values = np.zeros((bdry.size, 2))
        if u_bc is not None:
            loc = {int(e): i for i, e in enumerate(bdry)}
            rows = np.array([loc[int(e)] for e in u_bc.edges], dtype=int)
            u_values[rows] = np.atleast_2d(u_bc.values)
        self.u_fixed_values = _balance_boundary_flux(mesh, u_values)
        self.iu_free = asm.vector_indices(self.u_free_edges)
        self.iu_fixed = asm.vector_indices(self.u_fixed_edges)

        if y_bc is None:
            self.y_fixed_edges = np.zeros(0, dtype=np.int64)
            self.y_fixed_values = np.zeros((0, 2))
        else:
            self.y_fixed_edges = y_bc.edges
            self.y_fixed_values = np.atleast_2d(y_bc.values)
            if self.y_fixed_values.shape != (y_bc.edges.size, 2):
                raise ValueError("transport Dirichlet data needs two "
                                 "components per edge")
        mask = np.ones(ne, dtype=bool)
        mask[self.y_fixed_edges] = False
        self.y_free_edges = np.flatnonzero(mask)
        self.iy_free = asm.vector_indices(self.y_free_edges)
        self.iy_fixed = asm.vector_indices(self.y_fixed_edges)

    def full_u(self, u_free_flat):
        u = np.zeros((self.mesh.num_edges, 2))
        u[self.u_free_edges] = u_free_flat.reshape(-1, 2)
        u[self.u_fixed_edges] = self.u_fixed_values
        return u

    def full_y(self, y_free_flat):
        y = np.zeros((self.mesh.num_edges, 2))
        y[self.y_free_edges] = y_free_flat.reshape(-1, 2)
        if self.y_fixed_edges.size:
            y[self.y_fixed_edges] = self.y_fixed_values
        return y


def _sub(A, rows, cols):
    return A[rows][:, cols]


def _momentum_operator(mesh, params, T_dof, u_dof, penalty_a0):
    A = asm.assemble_brinkman_diffusion(mesh, T_dof, params) \
        + asm.assemble_upwind_advection(mesh, u_dof, n_components=2)
    if penalty_a0 > 0:
        A = A + asm.assemble_jump_penalty(mesh, penalty_a0, params.nu2)
    return A.tocsr()


def _transport_operator(mesh, params, u_dof):
    return (asm.assemble_cross_diffusion(mesh, params.diffusion)
            + asm.assemble_upwind_advection(mesh, u_dof,
                                            n_components=2)).tocsr()


def _control_load(mesh, control):
    if control is None:
        return np.zeros(2 * mesh.num_edges)
    if callable(control):
        return asm.assemble_load(mesh, control, ncomp=2)
    dof = control.dof if isinstance(control, P0Field) else np.asarray(control)
    return asm.assemble_p0_load(mesh, dof)


def _sigma_scale(params):
    """Scalar weight of the L2 part of the velocity norm."""
    s = params.sigma
    return float(s) if np.ndim(s) == 0 else float(np.abs(s).max())


class StateStepper:
    """One nonlinear step at a time on the discrete state system.

    The stepper starts in Picard mode (frozen coefficients) and switches
    to Newton once the increment has dropped enough (or after a few
    steps); damped iterations stay in Picard mode.
    """

    def __init__(self, mesh, params, y_bc, control=None, settings=None,
                 u_bc=None, forcing_mom=None, forcing_tr=None,
                 penalty_a0=0.0, initial=None):
        self.mesh = mesh
        self.params = params
        self.settings = settings or NonlinearSettings()
        self.penalty_a0 = penalty_a0
        self.dofs = _Dofs(mesh, y_bc, u_bc)
        nc = mesh.num_cells

        self.B = asm.assemble_divergence(mesh)
        self.area = asm.assemble_mean_constraint(mesh)
        self.B_free = self.B[:, self.dofs.iu_free]
        # scale only the continuity rows by 1/|K| so the solver residual
        # bounds the cellwise divergence directly; the pressure-gradient
        # block in the momentum row keeps the unscaled transpose
        self.B_scaled = sp.diags(1.0 / self.area) @ self.B_free
        self.nu_free = self.dofs.iu_free.size
        self.ny_free = self.dofs.iy_free.size
        n_all = self.nu_free + nc + self.ny_free
        self.d_col = np.zeros(n_all)
        self.d_col[self.nu_free:self.nu_free + nc] = 1.0
        self.e_row = np.zeros(n_all)
        self.e_row[self.nu_free:self.nu_free + nc] = self.area

        g = -self.B[:, self.dofs.iu_fixed] \
            @ self.dofs.u_fixed_values.reshape(-1)
        self.g = (g - self.area * (g.sum() / self.area.sum())) / self.area

        self.affine_buoyancy = params.F_jac is None
        self.MF = asm.assemble_buoyancy_coupling(mesh, params) \
            if self.affine_buoyancy else None

        self.b_forcing = np.zeros(2 * mesh.num_edges)
        if forcing_mom is not None:
            self.b_forcing += asm.assemble_load(mesh, forcing_mom, ncomp=2)
        if self.affine_buoyancy and params.F0 is not None \
                and np.any(params.F0 != 0.0):
            self.b_forcing += asm.assemble_p0_load(
                mesh, np.tile(params.F0, (nc, 1)))
        self.b_tr = np.zeros(2 * mesh.num_edges) if forcing_tr is None \
            else asm.assemble_load(mesh, forcing_tr, ncomp=2)
        self.b_control = _control_load(mesh, control)

        if initial is not None:
            self.u = initial.u.dof.copy()
            self.u[self.dofs.u_fixed_edges] = self.dofs.u_fixed_values
            self.y = initial.y.dof.copy()
            if self.dofs.y_fixed_edges.size:
                self.y[self.dofs.y_fixed_edges] = self.dofs.y_fixed_values
            self.p = initial.p.dof.copy()
        else:
            self.u = self.dofs.full_u(np.zeros(self.nu_free))
            self.y = self.dofs.full_y(np.zeros(self.ny_free))
            self.p = np.zeros(nc)
        self.m = 0.0
        self.newton = False
        self.steps = 0
        self.increments = []

    def set_control(self, control):
        """Swap the distributed control between steps."""
        self.b_control = _control_load(self.mesh, control)

    def _momentum_rhs_base(self, y_cur):
        b = self.b_forcing + self.b_control
        if not self.affine_buoyancy:
            b = b + _buoyancy_load(self.mesh, self.params, y_cur)
        return b

    def increment_norm(self, du, dy):
        return broken_velocity_norm(self.mesh, du,
                                    _sigma_scale(self.params),
                                    self.params.nu2) \
            + broken_transport_norm(self.mesh, dy, self.params.sigma_bar)

    def iterate_scale(self):
        return 1.0 + broken_velocity_norm(self.mesh, self.u,
                                          _sigma_scale(self.params),
                                          self.params.nu2) \
            + broken_transport_norm(self.mesh, self.y,
                                    self.params.sigma_bar)

    def step(self):
        """Advance one Picard or Newton step; returns the increment norm."""
        mesh, params, dofs = self.mesh, self.params, self.dofs
        nc = mesh.num_cells
        u, y, p = self.u, self.y, self.p
        A_mom = _momentum_operator(mesh, params, y[:, 0], u,
                                   self.penalty_a0)
        A_tr = _transport_operator(mesh, params, u)
        b_mom = self._momentum_rhs_base(y)
        if self.affine_buoyancy and dofs.iy_fixed.size:
            b_mom = b_mom + self.MF[:, dofs.iy_fixed] \
                @ dofs.y_fixed_values.reshape(-1)
        b_mom_free = b_mom[dofs.iu_free] \
            - _sub(A_mom, dofs.iu_free, dofs.iu_fixed) \
            @ dofs.u_fixed_values.reshape(-1)
        b_tr_free = self.b_tr[dofs.iy_free]
        if dofs.iy_fixed.size:
            b_tr_free = b_tr_free \
                - _sub(A_tr, dofs.iy_free, dofs.iy_fixed) \
                @ dofs.y_fixed_values.reshape(-1)

        if not self.newton:
            mom_y_block = -_sub(self.MF, dofs.iu_free, dofs.iy_free) \
                if self.affine_buoyancy else None
            core = sp.bmat(
                [[_sub(A_mom, dofs.iu_free, dofs.iu_free), self.B_free.T,
                  mom_y_block],
                 [self.B_scaled, None, None],
                 [None, None, _sub(A_tr, dofs.iy_free, dofs.iy_free)]],
                format="csc")
            solver = BorderedSolver(core, self.d_col, self.e_row,
                                    pin_row=self.nu_free,
                                    pin_col=self.nu_free)
            x, m_new = solver.solve(
                np.concatenate([b_mom_free, self.g, b_tr_free]))
            d = self.settings.damping
            u_new = d * dofs.full_u(x[:self.nu_free]) + (1 - d) * u
            p_new = d * x[self.nu_free:self.nu_free + nc] + (1 - d) * p
            y_new = d * dofs.full_y(x[self.nu_free + nc:]) + (1 - d) * y
        else:
            MF_cur = self.MF if self.affine_buoyancy \
                else asm.assemble_buoyancy_coupling(mesh, params, y)
            r_mom_full = A_mom @ u.reshape(-1) + self.B.T @ p \
                - self.b_forcing - self.b_control
            if self.affine_buoyancy:
                r_mom_full = r_mom_full - self.MF @ y.reshape(-1)
            else:
                r_mom_full = r_mom_full - _buoyancy_load(mesh, params, y)
            r_mom = r_mom_full[dofs.iu_free]
            r_div = self.B_scaled @ u.reshape(-1)[dofs.iu_free] \
                + self.m - self.g
            r_mean = float(self.area @ p)
            r_tr = (A_tr @ y.reshape(-1) - self.b_tr)[dofs.iy_free]

            A_mom_J = A_mom + asm.assemble_advecting_linearization(
                mesh, u, u)
            K_uy = asm.assemble_viscosity_coupling(mesh, u, y[:, 0],
                                                   params) - MF_cur
            K_yu = asm.assemble_advecting_linearization(mesh, u, y)
            core = sp.bmat(
                [[_sub(A_mom_J, dofs.iu_free, dofs.iu_free),
                  self.B_free.T, _sub(K_uy, dofs.iu_free, dofs.iy_free)],
                 [self.B_scaled, None, None],
                 [_sub(K_yu, dofs.iy_free, dofs.iu_free), None,
                  _sub(A_tr, dofs.iy_free, dofs.iy_free)]],
                format="csc")
            solver = BorderedSolver(core, self.d_col, self.e_row,
                                    pin_row=self.nu_free,
                                    pin_col=self.nu_free)
            x, dm = solver.solve(
                np.concatenate([-r_mom, -r_div, -r_tr]), beta=-r_mean)
            u_new = u.copy()
            u_new[dofs.u_free_edges] += x[:self.nu_free].reshape(-1, 2)
            p_new = p + x[self.nu_free:self.nu_free + nc]
            y_new = y.copy()
            y_new[dofs.y_free_edges] += x[self.nu_free + nc:].reshape(-1, 2)
            m_new = self.m + dm

        if not (np.all(np.isfinite(u_new)) and np.all(np.isfinite(y_new))
                and np.all(np.isfinite(p_new))):
            raise DivergedError(
                "NaN/Inf in iterate {}".format(self.steps + 1))
        incr = self.increment_norm(u_new - u, y_new - y)
        self.u, self.y, self.p, self.m = u_new, y_new, p_new, m_new
        self.steps += 1
        self.increments.append(incr)
        if not self.newton and self.settings.damping == 1.0 \
                and (incr <= 0.2 * self.iterate_scale() or self.steps >= 3):
            self.newton = True
        return incr

    def converged(self, incr):
        return incr <= self.settings.tol * self.iterate_scale()

    def solution(self):
        p = self.p - self.area @ self.p / self.area.sum()
        return StateSolution(
            u=CRVectorField(self.mesh, self.u.copy()),
            p=P0Field(self.mesh, p),
            y=CRVectorField(self.mesh, self.y.copy()),
            pressure_multiplier=self.m, iterations=self.steps,
            increments=list(self.increments),
            y_dirichlet_edges=self.dofs.y_fixed_edges.copy(),
            penalty_a0=self.penalty_a0)


def solve_state(mesh, params, y_bc, control=None, settings=None, u_bc=None,
                forcing_mom=None, forcing_tr=None, penalty_a0=0.0,
                initial=None):
    """Solve the nonlinear discrete state system for a given control.

    Parameters
    ----------
    mesh : Mesh
    params : ProblemParams
    y_bc : BoundaryTrace or None
        Dirichlet edge averages for (T, S); edges not referenced get the
        natural (zero-flux) condition.
    control : P0Field, ndarray (nc, 2), callable or None
        Distributed control (piecewise constant) or a momentum forcing
        function.
    settings : NonlinearSettings, optional
    u_bc : BoundaryTrace, optional
        Velocity Dirichlet averages (no-slip when omitted); a uniform
        normal-flux correction enforces discrete compatibility.
    forcing_mom, forcing_tr : callable, optional
        Extra momentum / transport right-hand sides (manufactured data).
    penalty_a0 : float
        Facet jump-penalty coefficient (Darcy regime), 0 disables.
    initial : StateSolution, optional
        Warm start.

    Returns
    -------
    StateSolution

    Raises
    ------
    NonconvergenceError
        If ``max_iter`` is exhausted before the increment drops below
        ``tol * (1 + ||u|| + ||y||)``.
    DivergedError
        If an iterate contains NaN or Inf.
    """
    stepper = StateStepper(mesh, params, y_bc, control=control,
                           settings=settings, u_bc=u_bc,
                           forcing_mom=forcing_mom, forcing_tr=forcing_tr,
                           penalty_a0=penalty_a0, initial=initial)
    for _ in range(stepper.settings.max_iter):
        incr = stepper.step()
        if stepper.converged(incr):
            return stepper.solution()
    raise NonconvergenceError(
        "state iteration did not reach tol={} in {} steps".format(
            stepper.settings.tol, stepper.settings.max_iter),
        stepper.increments)


def state_residual(mesh, params, solution, y_bc=None, control=None,
                   u_bc=None, forcing_mom=None, forcing_tr=None):
    """Residual norms of each equation block at a given (u, p, y).

    The residual is tested against all free basis functions; returns the
    Euclidean norms per block.
    """
    u = solution.u.dof
    y = solution.y.dof
    p = solution.p.dof
    if not (np.all(np.isfinite(u)) and np.all(np.isfinite(y))
            and np.all(np.isfinite(p))):
        raise ValueError("solution fields contain NaN/Inf")
    dofs = _Dofs(mesh, y_bc, u_bc)

    A_mom = _momentum_operator(mesh, params, y[:, 0], u,
                               solution.penalty_a0)
    A_tr = _transport_operator(mesh, params, u)
    B = asm.assemble_divergence(mesh)
    area = asm.assemble_mean_constraint(mesh)

    b_mom = _control_load(mesh, control)
    if forcing_mom is not None:
        b_mom = b_mom + asm.assemble_load(mesh, forcing_mom, ncomp=2)
    b_mom = b_mom + _buoyancy_load(mesh, params, y)
    b_tr = np.zeros(2 * mesh.num_edges) if forcing_tr is None \
        else asm.assemble_load(mesh, forcing_tr, ncomp=2)

    uf = u.reshape(-1)
    yf = y.reshape(-1)
    r_mom = (A_mom @ uf + B.T @ p - b_mom)[dofs.iu_free]
    r_div = B @ uf  # residual of b(u, q) = 0, i.e. -|K| div u_h per cell
    r_tr = (A_tr @ yf - b_tr)[dofs.iy_free]
    return {
        "momentum": float(np.linalg.norm(r_mom)),
        "continuity": float(np.linalg.norm(r_div)),
        "transport": float(np.linalg.norm(r_tr)),
        "pressure_mean": abs(float(area @ p)),
    }
