"""Box-constrained control of the coupled flow by a primal-dual active set
strategy (semi-smooth Newton on the projection fixed-point equation).

Each outer iteration solves the state and adjoint systems to convergence,
classifies every cell/component against the box through the projection
formula

    U = max(Ua, min(Ub, -(Pi0 phi) / lambda)),

assigns the bound on active cells and the projection value on inactive
ones, and stops when the active sets repeat and the control update falls
below the tolerance.
"""

from dataclasses import dataclass, field

import numpy as np

from . import assembly as asm
from .adjoint import solve_adjoint
from .norms import l2_p0
from .spaces import P0Field, p0_project
from .state import NonlinearSettings, solve_state, state_residual

__all__ = ["ControlBounds", "PdasSettings", "OptResult", "project_control",
           "eval_cost", "pdas_solve", "kkt_residuals",
           "PdasNonconvergence"]


class PdasNonconvergence(RuntimeError):
    """Active sets failed to settle; carries the set-change history."""

    def __init__(self, message, set_changes):
        super().__init__(message)
        self.set_changes = list(set_changes)


@dataclass
class ControlBounds:
    """Componentwise box constraints, Ua_j < Ub_j."""
    lower: object
    upper: object

    def __post_init__(self):
        self.lower = np.broadcast_to(
            np.asarray(self.lower, dtype=float), (2,)).copy()
        self.upper = np.broadcast_to(
            np.asarray(self.upper, dtype=float), (2,)).copy()
        if np.any(self.lower >= self.upper):
            raise ValueError("bounds must satisfy Ua_j < Ub_j "
                             "componentwise")

    @staticmethod
    def symmetric(radius):
        return ControlBounds(-abs(radius), abs(radius))


@dataclass
class PdasSettings:
    """Outer-loop controls.

    ``tol_mode`` selects the absolute or relative reading of ``tol`` for
    the control-change criterion.  ``coupling`` picks the granularity of
    one outer iteration: "oneshot" performs a single linearization of the
    full optimality system per iteration (state step, adjoint solve,
    active-set update), "decoupled" converges the state fully before each
    adjoint solve.
    """
    lam: float = 1.0
    tol: float = 1e-6
    tol_mode: str = "absolute"
    max_iter: int = 50
    coupling: str = "oneshot"
    inner: NonlinearSettings = field(default_factory=NonlinearSettings)

    def __post_init__(self):
        if self.tol_mode not in ("absolute", "relative"):
            raise ValueError("tol_mode must be 'absolute' or 'relative'")
        if self.coupling not in ("oneshot", "decoupled"):
            raise ValueError("coupling must be 'oneshot' or 'decoupled'")
        if self.lam <= 0:
            raise ValueError("lambda must be positive")


@dataclass
class OptResult:
    """Converged KKT triple with iteration diagnostics."""
    control: P0Field
    state: object
    adjoint: object
    iterations: int
    cost_history: list
    active_set_history: list
    control_changes: list
    context: dict


def project_control(v_cells, lam, bounds):
    """Componentwise projection max(Ua, min(Ub, -v/lambda)).

    Parameters
    ----------
    v_cells : ndarray (nc, 2)
        Cell averages of the adjoint velocity (Pi0 phi).
    """
    v = np.asarray(v_cells, dtype=float)
    return np.clip(-v / lam, bounds.lower, bounds.upper)


def _classify(v_cells, lam, bounds):
    """Active-set labels: -1 lower, 0 inactive, +1 upper (ties inactive)."""
    q = -np.asarray(v_cells, dtype=float) / lam
    labels = np.zeros(q.shape, dtype=np.int8)
    labels[q > bounds.upper] = 1
    labels[q < bounds.lower] = -1
    return labels


def eval_cost(state, control, data, lam):
    """Tracking-plus-regularization cost of a state/control pair.

    J = 1/2 ||u - u_d||^2 + 1/2 ||y - y_d||^2 + lambda/2 ||U||^2, all by
    the same degree-4 quadrature used for the adjoint right-hand side.
    """
    mesh = state.u.mesh
    U = control.dof if isinstance(control, P0Field) \
        else np.asarray(control, dtype=float)
    J = asm.tracking_cost(mesh, state.u.dof, data.u_d)
    J += asm.tracking_cost(mesh, state.y.dof, data.y_d)
    J += 0.5 * lam * l2_p0(mesh, U) ** 2
    return float(J)


def pdas_solve(mesh, params, y_bc, data, bounds, settings=None, u_bc=None,
               forcing_mom=None, forcing_tr=None, penalty_a0=0.0):
    """Solve the discrete optimality system by the active-set outer loop.

    With the default "oneshot" coupling every outer iteration performs one
    linearization step of the state system, one adjoint solve at the
    current iterate, and one active-set/control update, so the iteration
    count reflects the semi-smooth Newton resolution of the whole
    optimality system.  With "decoupled" coupling the state is converged
    fully before each adjoint solve.  Termination requires the active
    sets to repeat, the control change to drop below the tolerance, and
    (oneshot) the state increment to meet the inner tolerance.

    Parameters
    ----------
    y_bc : BoundaryTrace or None
        Transport Dirichlet data for the state (the adjoint gets zeros on
        the same edges).
    data : TrackingData
    bounds : ControlBounds
    settings : PdasSettings

    Returns
    -------
    OptResult

    Raises
    ------
    PdasNonconvergence
        When ``max_iter`` outer iterations do not settle the active sets.
    """
    from .state import StateStepper

    settings = settings or PdasSettings()
    lam = settings.lam
    nc = mesh.num_cells
    oneshot = settings.coupling == "oneshot"

    U = np.clip(np.zeros((nc, 2)), bounds.lower, bounds.upper)
    labels_prev = None
    state = None
    cost_history = []
    set_history = []
    changes = []
    stepper = StateStepper(mesh, params, y_bc, control=U,
                           settings=settings.inner, u_bc=u_bc,
                           forcing_mom=forcing_mom, forcing_tr=forcing_tr,
                           penalty_a0=penalty_a0) if oneshot else None

    for it in range(1, settings.max_iter + 1):
        if oneshot:
            stepper.set_control(U)
            state_incr = stepper.step()
            state = stepper.solution()
        else:
            state = solve_state(mesh, params, y_bc, control=U,
                                settings=settings.inner, u_bc=u_bc,
                                forcing_mom=forcing_mom,
                                forcing_tr=forcing_tr,
                                penalty_a0=penalty_a0, initial=state)
            state_incr = 0.0
        adjoint = solve_adjoint(mesh, params, state, data)
        pphi = p0_project(adjoint.phi, mesh).dof
        labels = _classify(pphi, lam, bounds)
        U_new = project_control(pphi, lam, bounds)

        cost_history.append(eval_cost(state, U_new, data, lam))
        set_history.append(labels)
        change = l2_p0(mesh, U_new - U)
        if settings.tol_mode == "relative":
            change_measure = change / max(l2_p0(mesh, U_new), 1e-300)
        else:
            change_measure = change
        changes.append(change_measure)

        converged = labels_prev is not None \
            and np.array_equal(labels, labels_prev) \
            and change_measure <= settings.tol
        if oneshot:
            converged = converged and stepper.converged(state_incr)
        U = U_new
        labels_prev = labels
        if converged:
            break
    else:
        raise PdasNonconvergence(
            "active sets did not settle in {} iterations".format(
                settings.max_iter), changes)

    context = {"mesh": mesh, "params": params, "y_bc": y_bc, "data": data,
               "bounds": bounds, "settings": settings, "u_bc": u_bc,
               "forcing_mom": forcing_mom, "forcing_tr": forcing_tr,
               "penalty_a0": penalty_a0}
    return OptResult(control=P0Field(mesh, U), state=state, adjoint=adjoint,
                     iterations=it, cost_history=cost_history,
                     active_set_history=set_history,
                     control_changes=changes, context=context)


def kkt_residuals(result):
    """Residuals of the three optimality-system blocks at an OptResult.

    ``vi_res`` is the max-norm violation of the projection fixed point
    cellwise; state and adjoint residuals are Euclidean norms of the
    assembled equation residuals.
    """
    ctx = result.context
    mesh = ctx["mesh"]
    lam = ctx["settings"].lam
    pphi = p0_project(result.adjoint.phi, mesh).dof
    fixed_point = project_control(pphi, lam, ctx["bounds"])
    vi_res = float(np.abs(result.control.dof - fixed_point).max())

    st = state_residual(mesh, ctx["params"], result.state,
                        y_bc=ctx["y_bc"], control=result.control,
                        u_bc=ctx["u_bc"], forcing_mom=ctx["forcing_mom"],
                        forcing_tr=ctx["forcing_tr"])
    state_res = float(np.sqrt(st["momentum"] ** 2 + st["continuity"] ** 2
                              + st["transport"] ** 2))
    adjoint_res = _adjoint_residual(mesh, ctx["params"], result.state,
                                    result.adjoint, ctx["data"])
    return {"state_res": state_res, "adjoint_res": adjoint_res,
            "vi_res": vi_res}


def _adjoint_residual(mesh, params, state, adjoint, data):
    from .adjoint import state_jacobian_blocks
    from .state import _Dofs
    from .spaces import BoundaryTrace

    y_bc = None
    if state.y_dirichlet_edges.size:
        y_bc = BoundaryTrace(mesh, state.y_dirichlet_edges,
                             np.zeros((state.y_dirichlet_edges.size, 2)))
    dofs = _Dofs(mesh, y_bc, None)
    blocks = state_jacobian_blocks(mesh, params, state)
    B = asm.assemble_divergence(mesh)
    area = asm.assemble_mean_constraint(mesh)

    phi = adjoint.phi.dof.reshape(-1)
    eta = adjoint.eta.dof.reshape(-1)
    xi = adjoint.xi_raw if adjoint.xi_raw is not None else adjoint.xi.dof
    b_u = asm.tracking_load(mesh, state.u.dof, data.u_d)
    b_y = asm.tracking_load(mesh, state.y.dof, data.y_d)

    r_u = (blocks["A_mom"].T @ phi + B.T @ xi + blocks["K_yu"].T @ eta
           - b_u)[dofs.iu_free]
    r_div = (B @ phi)
    r_y = (blocks["K_uy"].T @ phi + blocks["A_tr"].T @ eta
           - b_y)[dofs.iy_free]
    return float(np.sqrt(np.linalg.norm(r_u) ** 2
                         + np.linalg.norm(r_div) ** 2
                         + np.linalg.norm(r_y) ** 2
                         + float(area @ xi) ** 2))
