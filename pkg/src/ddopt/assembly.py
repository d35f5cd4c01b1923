"""Assembly of the discrete operators of the flow-transport scheme.

Volume integrals use a six-point degree-4 rule (nonlinear coefficients are
not polynomial), facet integrals a two-point Gauss rule (exact for the cubic
trace products that occur).  All matrices are returned over the full dof
sets; Dirichlet elimination is done by the solvers through index slicing.

Dof conventions: scalar CR dof = edge index; vector / two-component CR dofs
are interleaved (2*edge + component); piecewise constants use the cell
index (2*cell + component for controls).

Upwind convection.  The convective forms are assembled as

    c(w; u, v) = skew(w; u, v) + sum_e theta_e(w; u, v) + flux_e(w; u, v),

where skew is the antisymmetrized volume term, theta_e carries the
integrated-by-parts boundary transfer and flux_e the inflow coupling, both
with the advecting normal velocity a_e = w(m_e) . n_e frozen at the edge
midpoint (the single point where a Crouzeix-Raviart trace is one-valued).
With this choice the quadratic form reduces algebraically to
(1/2) sum_e |a_e| int_e |[u]|^2 >= 0, so the upwind positivity property
holds to machine precision for every advecting field.
"""

from dataclasses import dataclass, field

import numpy as np
from scipy import sparse as sp

from .quadrature import tri_quadrature, edge_quadrature, cell_quad_points
from .spaces import (cr_basis_values, cell_gradients, cr_values_on_cells,
                     cr_cell_gradients)

__all__ = ["ProblemParams", "assemble_mass", "assemble_stiffness",
           "assemble_brinkman_diffusion", "assemble_divergence",
           "assemble_cross_diffusion", "assemble_upwind_advection",
           "assemble_advecting_linearization", "assemble_viscosity_coupling",
           "assemble_buoyancy_coupling", "assemble_jump_penalty",
           "assemble_load", "assemble_p0_load", "assemble_mean_constraint",
           "tracking_load", "tracking_cost", "vector_indices"]


@dataclass
class ProblemParams:
    """Coefficients of the flow-transport model.

    Attributes
    ----------
    sigma : float or (2, 2) ndarray
        Inverse permeability scale, K^{-1} = sigma * I (or a constant SPD
        matrix).
    diffusion : (2, 2) ndarray
        Constant positive-definite diffusion matrix D (off-diagonal entries
        are the Soret/Dufour couplings).
    nu : callable, optional
        Temperature-dependent viscosity T -> nu(T); None means nu == 1.
    nu_T : callable, optional
        Derivative T -> nu'(T); None means 0.
    nu1, nu2 : float
        Lower/upper viscosity bounds (nu2 is also the gradient norm weight).
    F_y : (2, 2) ndarray, optional
        Jacobian of an affine buoyancy F(y) = F_y y + F0; the affine form is
        kept implicit in the solver.
    F0 : (2,) ndarray
        Constant part of the affine buoyancy.
    F_fun, F_jac : callable, optional
        General buoyancy y -> F(y) and its Jacobian; when given they
        override the affine data and the solver lags F to the right-hand
        side.
    g : (2,) ndarray
        Gravity direction (metadata for constructing F).
    lam : float
        Tikhonov regularization weight, > 0.
    bounds : (2, 2) ndarray
        Control box [[Ua_1, Ub_1], [Ua_2, Ub_2]].
    """

    sigma: object = 1.0
    diffusion: object = None
    nu: object = None
    nu_T: object = None
    nu1: float = 1.0
    nu2: float = 1.0
    F_y: object = None
    F0: object = None
    F_fun: object = None
    F_jac: object = None
    g: object = None
    lam: float = 1.0
    bounds: object = field(default=None)

    def __post_init__(self):
        if self.diffusion is None:
            self.diffusion = np.eye(2)
        self.diffusion = np.asarray(self.diffusion, dtype=float)
        if self.F_fun is not None and self.F_jac is None:
            raise ValueError("a general buoyancy F_fun requires its "
                             "Jacobian F_jac")
        if self.F0 is not None:
            self.F0 = np.asarray(self.F0, dtype=float)
        if self.F_y is not None:
            self.F_y = np.asarray(self.F_y, dtype=float)
            if self.F0 is None:
                self.F0 = np.zeros(2)
        if self.g is not None:
            self.g = np.asarray(self.g, dtype=float)
        if self.bounds is not None:
            self.bounds = np.asarray(self.bounds, dtype=float)

    @property
    def sigma_bar(self):
        """Transport gradient weight, the max-norm of D."""
        return float(np.abs(self.diffusion).max())

    def nu_at(self, T):
        if self.nu is None:
            return np.ones_like(np.asarray(T, dtype=float))
        return np.asarray(self.nu(T), dtype=float)

    def nu_T_at(self, T):
        if self.nu_T is None:
            return np.zeros_like(np.asarray(T, dtype=float))
        return np.asarray(self.nu_T(T), dtype=float)

    def buoyancy_at(self, yvals):
        """F evaluated at stacked (..., 2) values of (T, S)."""
        if self.F_fun is not None:
            return np.asarray(self.F_fun(yvals), dtype=float)
        if self.F_y is None:
            return np.zeros_like(yvals)
        return yvals @ self.F_y.T + self.F0

    def validate(self, T_samples=None, s_samples=None):
        """Check the standing assumptions on the coefficients.

        Viscosity bounds are checked at sampled temperatures and positive
        definiteness of D at sampled directions.
        """
        if self.lam <= 0:
            raise ValueError("lambda must be positive")
        if self.nu1 <= 0:
            raise ValueError("nu1 must be positive")
        if self.nu1 > self.nu2:
            raise ValueError("nu1 must not exceed nu2")
        if T_samples is None:
            T_samples = np.linspace(-2.0, 2.0, 41)
        nu_vals = self.nu_at(T_samples)
        if np.any(nu_vals < self.nu1 * (1 - 1e-12)) \
                or np.any(nu_vals > self.nu2 * (1 + 1e-12)):
            raise ValueError("nu(T) leaves [nu1, nu2] on sampled "
                             "temperatures")
        if s_samples is None:
            ang = np.linspace(0, 2 * np.pi, 17)
            s_samples = np.column_stack([np.cos(ang), np.sin(ang)])
        quad = np.einsum("sd,de,se->s", s_samples, self.diffusion, s_samples)
        if np.any(quad <= 0):
            raise ValueError("diffusion matrix is not positive definite")
        if self.bounds is not None:
            if np.any(self.bounds[:, 0] >= self.bounds[:, 1]):
                raise ValueError("control bounds must satisfy Ua < Ub")
        return self


def vector_indices(edges, ncomp=2):
    """Interleaved dof indices for a set of edges (all components)."""
    edges = np.asarray(edges, dtype=np.int64)
    return (ncomp * edges[:, None] + np.arange(ncomp)[None, :]).ravel()


def _cell_quad_data(mesh):
    bary, w = tri_quadrature()
    psi = cr_basis_values(bary)            # (nq, 3)
    pts = cell_quad_points(mesh, bary)     # (nc, nq, 2)
    wts = w[None, :] * mesh.area_cell[:, None]  # (nc, nq)
    return psi, pts, wts


def assemble_mass(mesh, coeff_cells=None, ncomp=1):
    """Scalar CR mass matrix, optionally with a cellwise weight.

    The CR cell mass matrix is diagonal (int psi_i psi_j = delta_ij |K|/3),
    so the matrix is assembled exactly.  For ncomp > 1 the 2-component
    interleaved version kron(M, I) is returned.
    """
    w = mesh.area_cell / 3.0
    if coeff_cells is not None:
        w = w * coeff_cells
    diag = np.zeros(mesh.num_edges)
    np.add.at(diag, mesh.cell_edges.ravel(), np.repeat(w, 3))
    M = sp.diags(diag).tocsr()
    if ncomp == 1:
        return M
    return sp.kron(M, sp.eye(ncomp), format="csr")


def assemble_stiffness(mesh, coeff_cells=None):
    """Scalar CR stiffness matrix sum_K c_K int_K grad u . grad v."""
    grads = cell_gradients(mesh)  # (nc, 3, 2)
    c = mesh.area_cell if coeff_cells is None \
        else mesh.area_cell * coeff_cells
    loc = np.einsum("cix,cjx,c->cij", grads, grads, c)
    rows = np.repeat(mesh.cell_edges, 3, axis=1).ravel()
    cols = np.tile(mesh.cell_edges, (1, 3)).ravel()
    ne = mesh.num_edges
    return sp.coo_matrix((loc.ravel(), (rows, cols)),
                         shape=(ne, ne)).tocsr()


def assemble_brinkman_diffusion(mesh, T_dof, params):
    """Velocity block: reaction K^{-1} u . v  +  nu(T_h) grad u : grad v.

    Parameters
    ----------
    T_dof : ndarray (ne,) or None
        CR temperature dofs at which the viscosity is evaluated (at the
        volume quadrature points); None evaluates nu at T == 0.

    Returns
    -------
    csr_matrix (2 ne, 2 ne), symmetric.
    """
    bary, w = tri_quadrature()
    if T_dof is None:
        Tq = np.zeros((mesh.num_cells, bary.shape[0]))
    else:
        Tq = cr_values_on_cells(mesh, T_dof, bary)
    nu_bar = np.einsum("q,cq->c", w, params.nu_at(Tq))
    K = assemble_stiffness(mesh, nu_bar)
    M = assemble_mass(mesh)
    sigma = params.sigma
    if np.ndim(sigma) == 0:
        return sp.kron(float(sigma) * M + K, sp.eye(2), format="csr")
    return (sp.kron(M, np.asarray(sigma, dtype=float))
            + sp.kron(K, sp.eye(2))).tocsr()


def assemble_divergence(mesh):
    """Divergence block B with B[K, dof] = -int_K div v.

    The divergence of a CR velocity is constant per cell, so entries are
    exact: -|K| * d(psi_e)/dx_c.
    """
    grads = cell_gradients(mesh)
    vals = -grads * mesh.area_cell[:, None, None]  # (nc, 3, 2)
    rows = np.repeat(np.arange(mesh.num_cells), 6)
    cols = vector_indices(mesh.cell_edges.ravel()).ravel()
    return sp.coo_matrix((vals.ravel(), (rows, cols)),
                         shape=(mesh.num_cells, 2 * mesh.num_edges)).tocsr()


def assemble_cross_diffusion(mesh, D):
    """Coupled transport stiffness int D grad y : grad s.

    With interleaved (T, S) dofs this is kron(K_scalar, D).
    """
    K = assemble_stiffness(mesh)
    return sp.kron(K, np.asarray(D, dtype=float), format="csr")


class _EdgeTraceData:
    """Per-edge trace values of the CR basis at the edge quadrature points.

    For every edge and each adjacent side, stores the scalar dof (edge)
    indices of the side's three basis functions and their trace values at
    the edge quadrature points.
    """

    def __init__(self, mesh, nq=2):
        t, w = edge_quadrature(nq)
        self.t = t
        self.w = w
        ne = mesh.num_edges
        self.dofs = np.full((ne, 2, 3), -1, dtype=np.int64)
        self.psi = np.zeros((ne, 2, nq, 3))
        for side in range(2):
            cells_s = mesh.edge_cells[:, side]
            valid = np.flatnonzero(cells_s >= 0)
            cs = cells_s[valid]
            ce = mesh.cell_edges[cs]                 # (m, 3)
            pos = np.argmax(ce == valid[:, None], axis=1)
            j = (pos + 1) % 3
            # parameter s measured from local vertex j toward k
            vj = mesh.cells[cs, j]
            same = vj == mesh.edges[valid, 0]
            s = np.where(same[:, None], t[None, :], 1.0 - t[None, :])
            m = valid.size
            psi = np.zeros((m, nq, 3))
            ar = np.arange(m)
            psi[ar, :, pos] = 1.0
            psi[ar, :, j] = 2.0 * s - 1.0
            psi[ar, :, (pos + 2) % 3] = 1.0 - 2.0 * s
            self.dofs[valid, side] = ce
            self.psi[valid, side] = psi
        # int_e psi_i psi_j for the four side pairings, shape (ne, 2, 2, 3, 3)
        self.pairs = np.einsum("q,esqi,erqj,e->esrij", w, self.psi, self.psi,
                               mesh.h_edge)


_EDGE_CACHE = {}


def _edge_trace_data(mesh):
    key = id(mesh)
    data = _EDGE_CACHE.get(key)
    if data is None or data[0] is not mesh:
        data = (mesh, _EdgeTraceData(mesh))
        _EDGE_CACHE.clear()
        _EDGE_CACHE[key] = data
    return data[1]


def _volume_convection(mesh, w_dof):
    """Raw volume convection int (w . grad u) v over scalar CR dofs."""
    psi, pts, wts = _cell_quad_data(mesh)
    bary, _ = tri_quadrature()
    wq = cr_values_on_cells(mesh, w_dof, bary)      # (nc, nq, 2)
    grads = cell_gradients(mesh)                    # (nc, 3, 2)
    adv = np.einsum("cqd,cjd->cqj", wq, grads)      # w . grad psi_j
    loc = np.einsum("cq,qi,cqj->cij", wts, psi, adv)
    rows = np.repeat(mesh.cell_edges, 3, axis=1).ravel()
    cols = np.tile(mesh.cell_edges, (1, 3)).ravel()
    ne = mesh.num_edges
    return sp.coo_matrix((loc.ravel(), (rows, cols)),
                         shape=(ne, ne)).tocsr()


def _facet_blocks(mesh, coef11, coef12, coef21, coef22):
    """Assemble sum_e of the four side-pair trace blocks with given per-edge
    coefficients (boundary edges use only coef11)."""
    td = _edge_trace_data(mesh)
    interior = mesh.interior_edges
    ne = mesh.num_edges
    rows, cols, vals = [], [], []

    def add(edges, coefs, side_r, side_c):
        if edges.size == 0:
            return
        block = td.pairs[edges, side_r, side_c] * coefs[:, None, None]
        r = np.repeat(td.dofs[edges, side_r], 3, axis=1)
        c = np.tile(td.dofs[edges, side_c], (1, 3))
        rows.append(r.ravel())
        cols.append(c.ravel())
        vals.append(block.ravel())

    add(np.arange(ne), coef11, 0, 0)
    add(interior, coef12[interior], 0, 1)
    add(interior, coef21[interior], 1, 0)
    add(interior, coef22[interior], 1, 1)
    return sp.coo_matrix(
        (np.concatenate(vals),
         (np.concatenate(rows), np.concatenate(cols))),
        shape=(ne, ne)).tocsr()


def _midpoint_flux(mesh, w_dof):
    """a_e = w(m_e) . n_e; single-valued since CR dofs sit at midpoints."""
    return np.einsum("ed,ed->e", w_dof, mesh.edge_normal)


def assemble_upwind_advection(mesh, w_dof, n_components=1):
    """Upwind-stabilized convection matrix N(w).

    Realizes the convective trilinear form with the advecting field w
    frozen: volume transport plus the upwind inflow flux, with w . n taken
    at each edge midpoint (interior-side trace, where it is single-valued).
    Assembled as the antisymmetric volume part plus facet transfer blocks,
    which makes the quadratic form exactly (1/2) sum_e int |w.n| [u]^2.

    Parameters
    ----------
    w_dof : ndarray (ne, 2)
        Advecting CR velocity dofs.
    n_components : int
        1 returns the scalar-space matrix; 2 the interleaved block version
        acting on vector / (T, S) fields.

    Returns
    -------
    csr_matrix
    """
    C = _volume_convection(mesh, w_dof)
    N = 0.5 * (C - C.T)
    a = _midpoint_flux(mesh, w_dof)
    boundary_half_a = np.where(mesh.boundary_edge, 0.5 * a, 0.5 * np.abs(a))
    N = N + _facet_blocks(mesh,
                          boundary_half_a,
                          np.minimum(a, 0.0),
                          -np.maximum(a, 0.0),
                          0.5 * np.abs(a))
    N = N.tocsr()
    if n_components == 1:
        return N
    return sp.kron(N, sp.eye(n_components), format="csr")


def assemble_advecting_linearization(mesh, w_dof, carried_dof):
    """Derivative of the convection form with respect to the advecting slot.

    Returns the matrix G with G[(e, c), (e', x)] = d/d(dw) of
    c(w; carried, .) at w, i.e. the Gateaux derivative of
    ``assemble_upwind_advection(mesh, w)(carried)`` in the direction of the
    velocity dof (e', x).  The absolute values in the flux are linearized
    as sign(a_e) with sign(0) = 0 (ties at no-flow facets).

    Parameters
    ----------
    w_dof : ndarray (ne, 2)
        Base advecting field (the state velocity).
    carried_dof : ndarray (ne, k)
        Frozen transported field (velocity or (T, S) pair).

    Returns
    -------
    csr_matrix (k*ne, 2*ne)
    """
    ne = mesh.num_edges
    k = carried_dof.shape[1]
    psi, pts, wts = _cell_quad_data(mesh)
    bary, _ = tri_quadrature()
    grads = cell_gradients(mesh)
    cvals = cr_values_on_cells(mesh, carried_dof, bary)   # (nc, nq, k)
    cgrad = cr_cell_gradients(mesh, carried_dof, grads)   # (nc, k, 2)

    rows, cols, vals = [], [], []

    # volume skew part: 1/2 [ (dw . grad c) . v - (dw . grad v) . c ]
    # term 1: 1/2 int psi_j psi_i (grad c_m)_x, rows (i, m), cols (j, x)
    mloc = np.einsum("cq,qi,qj->cij", wts, psi, psi)      # (nc, 3, 3)
    t1 = 0.5 * np.einsum("cij,cmx->cimjx", mloc, cgrad)
    # term 2: -1/2 int psi_j c_m (grad psi_i)_x
    pc = np.einsum("cq,qj,cqm->cjm", wts, psi, cvals)
    t2 = -0.5 * np.einsum("cjm,cix->cimjx", pc, grads)
    loc = t1 + t2                                         # (nc,3,k,3,2)
    ce = mesh.cell_edges
    r = (k * ce[:, :, None] + np.arange(k)[None, None, :])
    r = np.repeat(r.reshape(mesh.num_cells, -1), 6, axis=1)
    c = (2 * ce[:, :, None] + np.arange(2)[None, None, :])
    c = np.tile(c.reshape(mesh.num_cells, -1), (1, 3 * k))
    rows.append(r.ravel())
    cols.append(c.ravel())
    vals.append(loc.reshape(mesh.num_cells, -1).ravel())

    # facet part: coefficients differentiated with respect to a_e
    td = _edge_trace_data(mesh)
    a = _midpoint_flux(mesh, w_dof)
    sgn = np.sign(a)
    dcoef = {
        (0, 0): np.where(mesh.boundary_edge, 0.5, 0.5 * sgn),
        (0, 1): (a < 0).astype(float),
        (1, 0): -(a > 0).astype(float),
        (1, 1): 0.5 * sgn,
    }
    interior = mesh.interior_edges
    all_edges = np.arange(ne)
    for (sr, sc), coef in dcoef.items():
        edges = all_edges if (sr, sc) == (0, 0) else interior
        if edges.size == 0:
            continue
        cf = coef[edges]
        pare = td.pairs[edges, sr, sc]                      # (m, 3, 3)
        cloc = carried_dof[td.dofs[edges, sc]]              # (m, 3, k)
        # row value for test dof (i, m): coef * sum_j pairs[i, j] c[j, m]
        rv = np.einsum("e,eij,ejm->eim", cf, pare, cloc)    # (m, 3, k)
        col_e = 2 * edges
        for x in range(2):
            nx = mesh.edge_normal[edges, x]
            v = rv * nx[:, None, None]
            r = (k * td.dofs[edges, sr][:, :, None]
                 + np.arange(k)[None, None, :])
            c = np.broadcast_to((col_e + x)[:, None, None], v.shape)
            rows.append(r.ravel())
            cols.append(c.ravel())
            vals.append(v.ravel())

    return sp.coo_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
        shape=(k * ne, 2 * ne)).tocsr()


def assemble_viscosity_coupling(mesh, u_dof, T_dof, params):
    """Momentum-temperature coupling int nu'(T_h) dT (grad u_h : grad v).

    Rows are velocity dofs, columns the full (T, S) dofs with only the
    temperature component populated.

    Returns
    -------
    csr_matrix (2*ne, 2*ne)
    """
    ne = mesh.num_edges
    bary, w = tri_quadrature()
    psi, pts, wts = _cell_quad_data(mesh)
    Tq = cr_values_on_cells(mesh, T_dof, bary)
    grads = cell_gradients(mesh)
    ugrad = cr_cell_gradients(mesh, u_dof, grads)          # (nc, 2, 2)
    nuT = params.nu_T_at(Tq)                               # (nc, nq)
    # weight int nu'(T) psi_j per cell
    wj = np.einsum("cq,cq,qj->cj", wts, nuT, psi)          # (nc, 3)
    # (grad u_c . grad psi_i) per cell
    gg = np.einsum("cdx,cix->cdi", ugrad, grads)           # (nc, 2, 3)
    loc = np.einsum("cdi,cj->cidj", gg, wj)                # (nc, 3, 2, 3)
    ce = mesh.cell_edges
    r = (2 * ce[:, :, None] + np.arange(2)[None, None, :])
    rows = np.repeat(r.reshape(mesh.num_cells, -1), 3, axis=1).ravel()
    cols = np.tile(2 * ce, (1, 6)).ravel()  # T component: index 2*e'
    return sp.coo_matrix((loc.reshape(mesh.num_cells, -1).ravel(),
                          (rows, cols)),
                         shape=(2 * ne, 2 * ne)).tocsr()


def assemble_buoyancy_coupling(mesh, params, y_dof=None):
    """Buoyancy Jacobian block int (F_y(y_h) dy) . v.

    For affine buoyancy this is kron(M, F_y) exactly; otherwise F_jac is
    sampled at the quadrature points.

    Returns
    -------
    csr_matrix (2*ne, 2*ne), rows velocity dofs, columns (T, S) dofs.
    """
    if params.F_jac is None:
        Fy = params.F_y if params.F_y is not None else np.zeros((2, 2))
        M = assemble_mass(mesh)
        return sp.kron(M, Fy, format="csr")
    bary, w = tri_quadrature()
    psi, pts, wts = _cell_quad_data(mesh)
    yq = cr_values_on_cells(mesh, y_dof, bary)             # (nc, nq, 2)
    Fj = np.asarray(params.F_jac(yq), dtype=float)         # (nc, nq, 2, 2)
    loc = np.einsum("cq,qi,qj,cqde->cidje", wts, psi, psi, Fj)
    ce = mesh.cell_edges
    ne = mesh.num_edges
    r = (2 * ce[:, :, None] + np.arange(2)[None, None, :])
    r = np.repeat(r.reshape(mesh.num_cells, -1), 6, axis=1)
    c = (2 * ce[:, :, None] + np.arange(2)[None, None, :])
    c = np.tile(c.reshape(mesh.num_cells, -1), (1, 6))
    return sp.coo_matrix((loc.reshape(mesh.num_cells, -1).ravel(),
                          (r.ravel(), c.ravel())),
                         shape=(2 * ne, 2 * ne)).tocsr()


def assemble_jump_penalty(mesh, a0, nu2):
    """Symmetric facet penalty sum_e (a0 nu2 / h_e) int_e [u] . [v].

    The jump is the full vector trace difference on interior edges and the
    trace itself on boundary edges.  Returns the interleaved vector version.
    """
    if a0 < 0:
        raise ValueError("penalty parameter a0 must be nonnegative")
    ne = mesh.num_edges
    if a0 == 0:
        Z = sp.csr_matrix((2 * ne, 2 * ne))
        return Z
    coef = a0 * nu2 / mesh.h_edge
    P = _facet_blocks(mesh, coef, -coef, -coef, coef)
    return sp.kron(P, sp.eye(2), format="csr")


def assemble_load(mesh, f, ncomp=2):
    """Load vector (f, v) by the degree-4 cell rule.

    f(x, y) returns a scalar array (ncomp=1) or two stacked components.
    Vector loads are interleaved.
    """
    bary, w = tri_quadrature()
    psi = cr_basis_values(bary)
    pts = cell_quad_points(mesh, bary)
    wts = w[None, :] * mesh.area_cell[:, None]
    ne = mesh.num_edges
    b = np.zeros(ncomp * ne)
    fv = np.asarray(f(pts[:, :, 0], pts[:, :, 1]), dtype=float)
    if ncomp == 1:
        fv = fv.reshape(mesh.num_cells, -1)
        loc = np.einsum("cq,cq,qi->ci", wts, fv, psi)
        np.add.at(b, mesh.cell_edges.ravel(), loc.ravel())
        return b
    if fv.shape[0] == ncomp:
        fv = np.moveaxis(fv, 0, -1)
    loc = np.einsum("cq,cqd,qi->cid", wts, fv, psi)
    idx = (ncomp * mesh.cell_edges[:, :, None]
           + np.arange(ncomp)[None, None, :])
    np.add.at(b, idx.ravel(), loc.ravel())
    return b


def assemble_p0_load(mesh, U_cells):
    """Exact load of a piecewise-constant (control) field against CR bases.

    int_K U_K . v distributes |K|/3 U_K to each edge dof of K.
    """
    U = np.asarray(U_cells, dtype=float)
    ncomp = 1 if U.ndim == 1 else U.shape[1]
    ne = mesh.num_edges
    b = np.zeros(ncomp * ne)
    w = mesh.area_cell / 3.0
    if ncomp == 1:
        np.add.at(b, mesh.cell_edges.ravel(),
                  np.repeat(w * U, 3))
        return b
    loc = (w[:, None] * U)[:, None, :] * np.ones((1, 3, 1))
    idx = (ncomp * mesh.cell_edges[:, :, None]
           + np.arange(ncomp)[None, None, :])
    np.add.at(b, idx.ravel(), loc.ravel())
    return b


def assemble_mean_constraint(mesh):
    """Row vector of cell areas enforcing the zero-mean pressure."""
    return mesh.area_cell.copy()


def _target_at(target, pts):
    """Evaluate tracking data (a callable of x, y) at points (nc, nq, 2)."""
    x, y = pts[:, :, 0], pts[:, :, 1]
    fv = np.asarray(target(x, y), dtype=float)
    if fv.shape[0] == 2 and fv.shape != pts.shape[:2] + (2,):
        fv = np.moveaxis(fv, 0, -1)
    return fv


def _difference_values(mesh, dof, target, bary, pts):
    """(field_h - target) at the cell quadrature points.

    ``target`` may be None, a callable of (x, y), or an object carrying a
    matching CR ``dof`` array (discrete target).
    """
    if target is not None and hasattr(target, "dof"):
        return cr_values_on_cells(mesh, dof - target.dof, bary)
    vals = cr_values_on_cells(mesh, dof, bary)
    if target is not None:
        vals = vals - _target_at(target, pts)
    return vals


def tracking_load(mesh, dof, target):
    """Load vector of (field_h - target, v) with the cost quadrature.

    Shares the degree-4 rule with ``tracking_cost`` so the assembled load is
    the exact derivative of the quadrature cost.
    """
    bary, w = tri_quadrature()
    psi = cr_basis_values(bary)
    pts = cell_quad_points(mesh, bary)
    wts = w[None, :] * mesh.area_cell[:, None]
    vals = _difference_values(mesh, dof, target, bary, pts)  # (nc, nq, k)
    k = vals.shape[2]
    loc = np.einsum("cq,cqd,qi->cid", wts, vals, psi)
    b = np.zeros(k * mesh.num_edges)
    idx = (k * mesh.cell_edges[:, :, None] + np.arange(k)[None, None, :])
    np.add.at(b, idx.ravel(), loc.ravel())
    return b


def tracking_cost(mesh, dof, target):
    """(1/2) int |field_h - target|^2 with the degree-4 cell rule."""
    bary, w = tri_quadrature()
    pts = cell_quad_points(mesh, bary)
    wts = w[None, :] * mesh.area_cell[:, None]
    vals = _difference_values(mesh, dof, target, bary, pts)
    return 0.5 * float(np.einsum("cq,cqd,cqd->", wts, vals, vals))
