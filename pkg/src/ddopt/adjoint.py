"""Discrete adjoint solver and the reduced-cost gradient.

The adjoint system is assembled as the exact transpose of the Jacobian of
the discrete state residual, frozen at the converged state.  Relative to
the state operator this transposes the divergence coupling, turns the
upwind convection into its downwind counterpart, moves the viscosity and
buoyancy couplings into the transport row, and adds the advecting-slot
linearization of the upwind fluxes (|a| differentiated to sign(a), with
sign(0) = 0).  The transpose construction makes the identity

    dJ/dU [dU] = lambda (U, dU) + (phi_h, dU)

hold to solver precision, which is what the finite-difference gradient
check requires.
"""

from dataclasses import dataclass

import numpy as np
from scipy import sparse as sp

from . import assembly as asm
from .linalg import BorderedSolver
from .spaces import BoundaryTrace, CRVectorField, P0Field, p0_project
from .state import _Dofs, _sub, _momentum_operator, _transport_operator

__all__ = ["TrackingData", "AdjointSolution", "solve_adjoint",
           "gradient_of_reduced_cost"]


class _FieldTarget:
    """Discrete tracking target wrapping a CR dof array."""

    def __init__(self, field):
        self.dof = field.dof


@dataclass
class TrackingData:
    """Desired states: callables of (x, y) or None for zero targets.

    ``u_d`` returns two velocity components, ``y_d`` the desired (T, S)
    pair; CR fields can be passed through ``from_fields``.
    """
    u_d: object = None
    y_d: object = None

    @staticmethod
    def from_fields(u_field, y_field):
        """Tracking data given as discrete CR fields."""
        return TrackingData(
            u_d=None if u_field is None else _FieldTarget(u_field),
            y_d=None if y_field is None else _FieldTarget(y_field))


@dataclass
class AdjointSolution:
    """Adjoint velocity, pressure, and transported pair (all zero-trace).

    ``xi`` is reported in the gauge of the continuous adjoint pressure;
    ``xi_raw`` is the multiplier of the transposed system itself (they
    differ by the cellwise average of (u_h . phi_h + y_h . eta_h) / 2,
    which the skew-form linearization absorbs into the pressure).
    """
    phi: CRVectorField
    xi: P0Field
    eta: CRVectorField
    pressure_multiplier: float
    xi_raw: object = None

    def max_divergence(self):
        from .state import max_cell_div
        return max_cell_div(self.phi.mesh, self.phi.dof)


def state_jacobian_blocks(mesh, params, state):
    """Jacobian blocks of the state residual at a converged solution.

    Returns a dict with the momentum, transport, and coupling blocks over
    the full dof sets.
    """
    u = state.u.dof
    y = state.y.dof
    A_mom = _momentum_operator(mesh, params, y[:, 0], u, state.penalty_a0) \
        + asm.assemble_advecting_linearization(mesh, u, u)
    A_tr = _transport_operator(mesh, params, u)
    K_uy = asm.assemble_viscosity_coupling(mesh, u, y[:, 0], params) \
        - asm.assemble_buoyancy_coupling(mesh, params, y)
    K_yu = asm.assemble_advecting_linearization(mesh, u, y)
    return {"A_mom": A_mom.tocsr(), "A_tr": A_tr.tocsr(),
            "K_uy": K_uy.tocsr(), "K_yu": K_yu.tocsr()}


def solve_adjoint(mesh, params, state, data, rtol=1e-12):
    """Solve the linear discrete adjoint system at a converged state.

    Parameters
    ----------
    state : StateSolution
        Converged state; its Dirichlet edge set and penalty setting are
        reused (the adjoint variables carry homogeneous data).
    data : TrackingData

    Returns
    -------
    AdjointSolution
    """
    u = state.u.dof
    y = state.y.dof
    if not (np.all(np.isfinite(u)) and np.all(np.isfinite(y))):
        raise ValueError("state fields contain NaN/Inf")

    y_bc = None
    if state.y_dirichlet_edges.size:
        y_bc = BoundaryTrace(mesh, state.y_dirichlet_edges,
                             np.zeros((state.y_dirichlet_edges.size, 2)))
    dofs = _Dofs(mesh, y_bc, None)

    blocks = state_jacobian_blocks(mesh, params, state)
    B = asm.assemble_divergence(mesh)
    area = asm.assemble_mean_constraint(mesh)

    b_u = asm.tracking_load(mesh, u, data.u_d)[dofs.iu_free]
    b_y = asm.tracking_load(mesh, y, data.y_d)[dofs.iy_free]

    A_mom_T = _sub(blocks["A_mom"], dofs.iu_free, dofs.iu_free).T
    A_tr_T = _sub(blocks["A_tr"], dofs.iy_free, dofs.iy_free).T
    K_yu_T = _sub(blocks["K_yu"], dofs.iy_free, dofs.iu_free).T
    K_uy_T = _sub(blocks["K_uy"], dofs.iu_free, dofs.iy_free).T
    B_free = B[:, dofs.iu_free]
    # continuity rows scaled by 1/|K| as in the state solve
    B_scaled = sp.diags(1.0 / area) @ B_free

    nu_free = dofs.iu_free.size
    nc = mesh.num_cells
    core = sp.bmat([[A_mom_T, B_free.T, K_yu_T],
                    [B_scaled, None, None],
                    [K_uy_T, None, A_tr_T]], format="csc")
    d_col = np.zeros(core.shape[0])
    d_col[nu_free:nu_free + nc] = 1.0
    e_row = np.zeros_like(d_col)
    e_row[nu_free:nu_free + nc] = area
    solver = BorderedSolver(core, d_col, e_row,
                            pin_row=nu_free, pin_col=nu_free)
    x, mult = solver.solve(
        np.concatenate([b_u, np.zeros(nc), b_y]), rtol=rtol)
    phi_f = x[:nu_free]
    xi = x[nu_free:nu_free + nc]
    eta_f = x[nu_free + nc:]

    phi = np.zeros((mesh.num_edges, 2))
    phi[dofs.u_free_edges] = phi_f.reshape(-1, 2)
    eta = np.zeros((mesh.num_edges, 2))
    eta[dofs.y_free_edges] = eta_f.reshape(-1, 2)
    xi_raw = xi - area @ xi / area.sum()
    # The transposed skew convection pairs -b(v, (u.phi + y.eta)/2) into
    # the momentum row; div v_h is cellwise constant, so this is exactly a
    # pressure gauge.  Remove it to report the adjoint pressure itself.
    gauge = 0.5 * (_cell_mean_dot(mesh, u, phi) + _cell_mean_dot(mesh, y, eta))
    xi = xi_raw - gauge
    xi = xi - area @ xi / area.sum()
    return AdjointSolution(
        phi=CRVectorField(mesh, phi), xi=P0Field(mesh, xi),
        eta=CRVectorField(mesh, eta), pressure_multiplier=float(mult),
        xi_raw=xi_raw)


def _cell_mean_dot(mesh, a_dof, b_dof):
    """Cell averages of the dot product of two CR fields (exact for P2)."""
    from .quadrature import tri_quadrature
    from .spaces import cr_values_on_cells
    bary, w = tri_quadrature()
    av = cr_values_on_cells(mesh, a_dof, bary)
    bv = cr_values_on_cells(mesh, b_dof, bary)
    return np.einsum("q,cqd,cqd->c", w, av, bv)


def gradient_of_reduced_cost(adjoint, control, lam):
    """Cellwise Riesz gradient of the reduced cost: lambda U + Pi0 phi.

    Parameters
    ----------
    adjoint : AdjointSolution
    control : P0Field with (nc, 2) dofs, or ndarray
    lam : float

    Returns
    -------
    P0Field
        Per-cell 2-vector g with dJ/dU[dU] = sum_K |K| g_K . dU_K.
    """
    mesh = adjoint.phi.mesh
    U = control.dof if isinstance(control, P0Field) else \
        np.asarray(control, dtype=float)
    if U.ndim == 1:
        U = np.zeros((mesh.num_cells, 2)) + U
    pphi = p0_project(adjoint.phi, mesh).dof
    return P0Field(mesh, lam * U + pphi)
