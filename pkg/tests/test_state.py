import numpy as np
import pytest

from conftest import manufactured_setup
from ddopt import assembly as asm
from ddopt.assembly import ProblemParams
from ddopt.norms import broken_velocity_norm
from ddopt.spaces import CRVectorField, P0Field, boundary_interpolate, \
    p0_project
from ddopt.state import (NonlinearSettings, NonconvergenceError,
                         StateSolution, solve_state, state_residual)


def test_settings_validation():
    with pytest.raises(ValueError):
        NonlinearSettings(tol=0.0)
    with pytest.raises(ValueError):
        NonlinearSettings(damping=1.5)


def test_zero_data_gives_zero_solution(mesh8):
    params = ProblemParams(sigma=1.0, nu1=1.0, nu2=1.0)
    sol = solve_state(mesh8, params, y_bc=None)
    assert sol.iterations <= 2
    assert np.abs(sol.u.dof).max() == 0.0
    assert np.abs(sol.y.dof).max() == 0.0
    assert np.abs(sol.p.dof).max() < 1e-14


def test_manufactured_state_finite_and_divfree():
    s = manufactured_setup(16)
    U = p0_project(lambda x, y: s["case"].U(x, y), s["mesh"])
    sol = solve_state(s["mesh"], s["params"], s["y_bc"], control=U,
                      u_bc=s["u_bc"], forcing_mom=s["f_mom"],
                      forcing_tr=s["f_tr"])
    assert np.all(np.isfinite(sol.u.dof))
    umax = np.abs(sol.u.dof).max()
    assert sol.max_divergence() <= 1e-10 * (1.0 + umax)
    # fields stay near the exact ranges
    assert umax < 2.0
    assert 0.4 < sol.y.dof[:, 0].max() <= 1.1


def test_dirichlet_exactness():
    s = manufactured_setup(8)
    sol = solve_state(s["mesh"], s["params"], s["y_bc"], u_bc=s["u_bc"])
    mesh = s["mesh"]
    # transported pair matches the prescribed edge averages exactly
    pos = {int(e): k for k, e in enumerate(s["y_bc"].edges)}
    for e in mesh.boundary_edges:
        assert np.allclose(sol.y.dof[e], s["y_bc"].values[pos[int(e)]],
                           atol=1e-13)
    # velocity boundary dofs equal the flux-balanced data: the correction
    # is a uniform normal shift of size |net flux| / perimeter
    vals = np.zeros((mesh.boundary_edges.size, 2))
    upos = {int(e): k for k, e in enumerate(s["u_bc"].edges)}
    for k, e in enumerate(mesh.boundary_edges):
        vals[k] = s["u_bc"].values[upos[int(e)]]
    n = mesh.edge_normal[mesh.boundary_edges]
    h = mesh.h_edge[mesh.boundary_edges]
    flux = np.sum(h * np.sum(vals * n, axis=1))
    assert np.allclose(sol.u.dof[mesh.boundary_edges],
                       vals - (flux / h.sum()) * n, atol=1e-13)
    assert abs(flux) / h.sum() < 1e-6


def test_picard_contraction():
    s = manufactured_setup(8)
    sol = solve_state(s["mesh"], s["params"], s["y_bc"], u_bc=s["u_bc"],
                      forcing_mom=s["f_mom"], forcing_tr=s["f_tr"])
    inc = sol.increments
    assert all(b < a for a, b in zip(inc[1:-1], inc[2:]))


def test_energy_stability_under_refinement():
    norms = []
    for n in (8, 16, 32):
        s = manufactured_setup(n)
        sol = solve_state(s["mesh"], s["params"], s["y_bc"],
                          u_bc=s["u_bc"], forcing_mom=s["f_mom"],
                          forcing_tr=s["f_tr"])
        norms.append(broken_velocity_norm(s["mesh"], sol.u.dof,
                                          s["params"].sigma,
                                          s["params"].nu2))
    for a, b in zip(norms, norms[1:]):
        assert abs(b - a) / a < 0.05


def test_pressure_mean_zero():
    s = manufactured_setup(8)
    sol = solve_state(s["mesh"], s["params"], s["y_bc"], u_bc=s["u_bc"],
                      forcing_mom=s["f_mom"], forcing_tr=s["f_tr"])
    assert abs(np.sum(s["mesh"].area_cell * sol.p.dof)) < 1e-10


def test_max_iter_exhaustion_raises():
    s = manufactured_setup(8)
    with pytest.raises(NonconvergenceError) as err:
        solve_state(s["mesh"], s["params"], s["y_bc"], u_bc=s["u_bc"],
                    forcing_mom=s["f_mom"], forcing_tr=s["f_tr"],
                    settings=NonlinearSettings(tol=1e-10, max_iter=2))
    assert len(err.value.increments) == 2


def test_residual_of_converged_solution_small():
    s = manufactured_setup(8)
    sol = solve_state(s["mesh"], s["params"], s["y_bc"], u_bc=s["u_bc"],
                      forcing_mom=s["f_mom"], forcing_tr=s["f_tr"],
                      settings=NonlinearSettings(tol=1e-11))
    res = state_residual(s["mesh"], s["params"], sol, y_bc=s["y_bc"],
                         u_bc=s["u_bc"], forcing_mom=s["f_mom"],
                         forcing_tr=s["f_tr"])
    assert res["momentum"] < 1e-7
    assert res["continuity"] < 1e-10
    assert res["transport"] < 1e-7
    assert res["pressure_mean"] < 1e-10


def test_residual_zero_solution_equals_load_norm(mesh4):
    params = ProblemParams(sigma=1.0, nu1=1.0, nu2=1.0)
    zero = StateSolution(
        u=CRVectorField(mesh4), p=P0Field(mesh4), y=CRVectorField(mesh4),
        pressure_multiplier=0.0, iterations=0, increments=[],
        y_dirichlet_edges=np.zeros(0, dtype=np.int64))
    f = lambda x, y: np.stack([np.sin(x + y), np.cos(x - y)])
    res = state_residual(mesh4, params, zero, forcing_mom=f)
    b = asm.assemble_load(mesh4, f, ncomp=2)
    iu = asm.vector_indices(mesh4.interior_edges)
    assert res["momentum"] == pytest.approx(np.linalg.norm(b[iu]),
                                            rel=1e-12)
    assert res["continuity"] == 0.0


def test_residual_column_jump_for_linear_unknown(mesh4):
    # pressure enters linearly: perturbing one pressure dof moves the
    # momentum residual by exactly that column of the gradient block
    params = ProblemParams(sigma=1.0, nu1=1.0, nu2=1.0)
    ybc = boundary_interpolate(
        lambda x, y: np.stack([x, np.zeros_like(x)]), mesh4)
    sol = solve_state(mesh4, params, ybc)
    res0 = state_residual(mesh4, params, sol, y_bc=ybc)
    pert = sol.p.dof.copy()
    cell = 3
    pert[cell] += 1.0
    sol_p = StateSolution(
        u=sol.u, p=P0Field(mesh4, pert), y=sol.y,
        pressure_multiplier=sol.pressure_multiplier, iterations=0,
        increments=[], y_dirichlet_edges=sol.y_dirichlet_edges)
    res1 = state_residual(mesh4, params, sol_p, y_bc=ybc)
    B = asm.assemble_divergence(mesh4)
    iu = asm.vector_indices(mesh4.interior_edges)
    col = np.asarray(B.T[:, cell].todense()).ravel()[iu]
    assert res1["momentum"] == pytest.approx(
        np.sqrt(res0["momentum"] ** 2 + np.linalg.norm(col) ** 2),
        rel=1e-6)


def test_residual_rejects_nan(mesh4):
    params = ProblemParams()
    bad = StateSolution(
        u=CRVectorField(mesh4, np.full((mesh4.num_edges, 2), np.nan)),
        p=P0Field(mesh4), y=CRVectorField(mesh4), pressure_multiplier=0.0,
        iterations=0, increments=[],
        y_dirichlet_edges=np.zeros(0, dtype=np.int64))
    with pytest.raises(ValueError):
        state_residual(mesh4, params, bad)


def test_warm_start_converges_faster():
    s = manufactured_setup(8)
    cold = solve_state(s["mesh"], s["params"], s["y_bc"], u_bc=s["u_bc"],
                       forcing_mom=s["f_mom"], forcing_tr=s["f_tr"])
    warm = solve_state(s["mesh"], s["params"], s["y_bc"], u_bc=s["u_bc"],
                       forcing_mom=s["f_mom"], forcing_tr=s["f_tr"],
                       initial=cold)
    assert warm.iterations <= 2
    assert np.allclose(warm.u.dof, cold.u.dof, atol=1e-9)


def test_lagged_general_buoyancy_matches_affine():
    # the same affine F supplied as a general callable must give the same
    # solution through the lagged right-hand side path
    s = manufactured_setup(8)
    sol_a = solve_state(s["mesh"], s["params"], s["y_bc"], u_bc=s["u_bc"],
                        forcing_mom=s["f_mom"], forcing_tr=s["f_tr"])
    pg = ProblemParams(
        sigma=s["params"].sigma, diffusion=s["params"].diffusion,
        nu=s["params"].nu, nu_T=s["params"].nu_T, nu1=s["params"].nu1,
        nu2=s["params"].nu2,
        F_fun=lambda yv: yv @ s["case"].F_y.T,
        F_jac=lambda yv: np.broadcast_to(s["case"].F_y,
                                         yv.shape[:-1] + (2, 2)),
        lam=1.0)
    sol_g = solve_state(s["mesh"], pg, s["y_bc"], u_bc=s["u_bc"],
                        forcing_mom=s["f_mom"], forcing_tr=s["f_tr"],
                        settings=NonlinearSettings(tol=1e-12))
    assert np.allclose(sol_g.u.dof, sol_a.u.dof, atol=1e-8)
    assert np.allclose(sol_g.y.dof, sol_a.y.dof, atol=1e-8)
