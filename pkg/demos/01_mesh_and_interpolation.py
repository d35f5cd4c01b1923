"""Meshes and nonconforming interpolation.

Builds structured triangulations of the unit square, refines them, and
shows what the edge-midpoint (Crouzeix-Raviart) interpolation and the
piecewise-constant projection do to smooth data.
"""

import numpy as np

from ddopt import (build_unit_square_mesh, refine_uniform, mesh_stats,
                   cr_interpolate, p0_project)
from ddopt.norms import h1_semi_cr

print("== structured meshes ==")
mesh = build_unit_square_mesh(4)
print(mesh)
stats = mesh_stats(mesh)
print("h_max = {:.4f}, min angle = {:.1f} deg".format(
    stats["h_max"], np.degrees(stats["min_angle"])))

refined = refine_uniform(mesh)
print("after red refinement:", refined, "h_max halves:",
      mesh_stats(refined)["h_max"] / stats["h_max"])

print("\n== Crouzeix-Raviart interpolation ==")
print("dofs live on edge midpoints; affine functions are reproduced"
      " exactly:")
f = cr_interpolate(lambda x, y: 1 + 2 * x - y, mesh)
print("  interpolated 1 + 2x - y, broken H1 seminorm = {:.6f}"
      " (exact sqrt(5) = {:.6f})".format(h1_semi_cr(mesh, f.dof),
                                         np.sqrt(5)))

print("\nsmooth data converges at first order in the broken H1 norm:")
for n in (8, 16, 32):
    m = build_unit_square_mesh(n)
    g = cr_interpolate(lambda x, y: np.sin(np.pi * x) * np.sin(np.pi * y),
                       m)
    # compare the cellwise gradient with the exact one by quadrature
    from ddopt.verification import _quadrature_error_parts

    def value(x, y):
        return (np.sin(np.pi * x) * np.sin(np.pi * y))[None]

    def grad(x, y):
        return np.stack([np.pi * np.cos(np.pi * x) * np.sin(np.pi * y),
                         np.pi * np.sin(np.pi * x)
                         * np.cos(np.pi * y)])[None]

    _, h1 = _quadrature_error_parts(m, g.dof[:, None], value, grad)
    print("  n={:3d}: |grad error| = {:.4e}".format(n, np.sqrt(h1)))

print("\n== piecewise-constant projection ==")
m = build_unit_square_mesh(8)
proj = p0_project(lambda x, y: x, m)
print("projection of f(x,y) = x gives the centroid values;"
      " first three cells:", np.round(proj.dof[:3], 4))
