"""Triangulations of polygonal domains with full edge/cell adjacency.

Meshes are immutable after construction: all adjacency arrays (edges,
cell-to-edge maps, normals, sizes) are built once in ``__init__`` and the
class exposes them as plain numpy arrays.  Cells are stored counter-clockwise
and edges in canonical order (lower vertex index first, list sorted
lexicographically) so that degree-of-freedom numbering is reproducible.
"""

import numpy as np

__all__ = ["Mesh", "build_unit_square_mesh", "refine_uniform", "mesh_stats",
           "dump_ascii"]


class Mesh:
    """Conforming triangulation with edge and cell adjacency data.

    Attributes
    ----------
    vertices : ndarray (nv, 2)
        Vertex coordinates.
    cells : ndarray (nc, 3) of int
        Vertex indices per triangle, counter-clockwise.
    edges : ndarray (ne, 2) of int
        Vertex pairs, lower index first, sorted lexicographically.
    cell_edges : ndarray (nc, 3) of int
        Edge index opposite each local vertex.
    cell_edge_signs : ndarray (nc, 3) of int
        +1 if the local edge direction (v_{i+1} -> v_{i+2}) agrees with the
        canonical direction of the global edge, else -1.
    edge_cells : ndarray (ne, 2) of int
        Adjacent cells (cell_plus, cell_minus); cell_minus is -1 on the
        boundary.  cell_plus is the lower cell index.
    boundary_edge : ndarray (ne,) of bool
        True for boundary edges.
    edge_normal : ndarray (ne, 2)
        Unit normal per edge, oriented from cell_plus to cell_minus
        (outward on the boundary).
    edge_midpoint : ndarray (ne, 2)
    h_edge : ndarray (ne,)
        Edge lengths.
    h_cell : ndarray (nc,)
        Cell diameters (longest edge).
    area_cell : ndarray (nc,)
    """

    def __init__(self, vertices, cells):
        self.vertices = np.asarray(vertices, dtype=float)
        self.cells = np.asarray(cells, dtype=np.int64)
        if self.vertices.ndim != 2 or self.vertices.shape[1] != 2:
            raise ValueError("vertices must have shape (nv, 2)")
        if self.cells.ndim != 2 or self.cells.shape[1] != 3:
            raise ValueError("cells must have shape (nc, 3)")

        v = self.vertices
        c = self.cells
        e1 = v[c[:, 1]] - v[c[:, 0]]
        e2 = v[c[:, 2]] - v[c[:, 0]]
        signed = 0.5 * (e1[:, 0] * e2[:, 1] - e1[:, 1] * e2[:, 0])
        if np.any(signed <= 0):
            raise ValueError("all cells must be counter-clockwise with "
                             "positive area")
        self.area_cell = signed

        # local edge i is opposite local vertex i
        raw = np.stack([c[:, [1, 2]], c[:, [2, 0]], c[:, [0, 1]]], axis=1)
        canon = np.sort(raw.reshape(-1, 2), axis=1)
        self.edges, inv = np.unique(canon, axis=0, return_inverse=True)
        self.cell_edges = inv.reshape(-1, 3)
        local_lo = np.minimum(raw[:, :, 0], raw[:, :, 1])
        self.cell_edge_signs = np.where(raw[:, :, 0] == local_lo, 1, -1)

        ne = self.edges.shape[0]
        nc = c.shape[0]
        self.edge_cells = np.full((ne, 2), -1, dtype=np.int64)
        order = np.argsort(self.cell_edges.ravel(), kind="stable")
        cell_of = np.repeat(np.arange(nc), 3)[order]
        edge_of = self.cell_edges.ravel()[order]
        first = np.ones(edge_of.size, dtype=bool)
        first[1:] = edge_of[1:] != edge_of[:-1]
        self.edge_cells[edge_of[first], 0] = cell_of[first]
        second = ~first
        self.edge_cells[edge_of[second], 1] = cell_of[second]
        if np.any(np.bincount(edge_of) > 2):
            raise ValueError("non-manifold edge: more than two adjacent "
                             "cells")
        self.boundary_edge = self.edge_cells[:, 1] < 0

        tang = v[self.edges[:, 1]] - v[self.edges[:, 0]]
        self.h_edge = np.hypot(tang[:, 0], tang[:, 1])
        self.edge_midpoint = 0.5 * (v[self.edges[:, 0]] + v[self.edges[:, 1]])
        normal = np.column_stack([tang[:, 1], -tang[:, 0]]) \
            / self.h_edge[:, None]
        centroid = v[c].mean(axis=1)
        toward_plus = centroid[self.edge_cells[:, 0]] - self.edge_midpoint
        flip = np.sum(normal * toward_plus, axis=1) > 0
        normal[flip] *= -1.0
        self.edge_normal = normal

        lengths = self.h_edge[self.cell_edges]
        self.h_cell = lengths.max(axis=1)

    @property
    def num_vertices(self):
        return self.vertices.shape[0]

    @property
    def num_cells(self):
        return self.cells.shape[0]

    @property
    def num_edges(self):
        return self.edges.shape[0]

    @property
    def interior_edges(self):
        """Indices of interior edges."""
        return np.flatnonzero(~self.boundary_edge)

    @property
    def boundary_edges(self):
        """Indices of boundary edges."""
        return np.flatnonzero(self.boundary_edge)

    @property
    def cell_centroid(self):
        return self.vertices[self.cells].mean(axis=1)

    def __repr__(self):
        return "Mesh({} vertices, {} edges, {} cells)".format(
            self.num_vertices, self.num_edges, self.num_cells)


def build_unit_square_mesh(n):
    """Structured triangulation of the unit square.

    The square is divided into ``n x n`` subsquares, each split into two
    triangles by the diagonal running from the lower-left to the upper-right
    corner (fixed direction for determinism across refinement levels).

    Parameters
    ----------
    n : int
        Number of subsquares per side, n >= 1.

    Returns
    -------
    Mesh
    """
    if not isinstance(n, (int, np.integer)) or n < 1:
        raise ValueError("n must be a positive integer, got {!r}".format(n))
    n = int(n)
    coords = np.linspace(0.0, 1.0, n + 1)
    xx, yy = np.meshgrid(coords, coords, indexing="xy")
    vertices = np.column_stack([xx.ravel(), yy.ravel()])

    def vid(i, j):
        return j * (n + 1) + i

    i, j = np.meshgrid(np.arange(n), np.arange(n), indexing="xy")
    i = i.ravel()
    j = j.ravel()
    v00 = vid(i, j)
    v10 = vid(i + 1, j)
    v01 = vid(i, j + 1)
    v11 = vid(i + 1, j + 1)
    lower = np.column_stack([v00, v10, v11])
    upper = np.column_stack([v00, v11, v01])
    cells = np.vstack([lower, upper])
    return Mesh(vertices, cells)


def refine_uniform(mesh):
    """Red refinement: split every triangle into four congruent children.

    New vertices are the edge midpoints, so the mesh size halves exactly.

    Parameters
    ----------
    mesh : Mesh

    Returns
    -------
    Mesh
    """
    nv = mesh.num_vertices
    new_vertices = np.vstack([mesh.vertices, mesh.edge_midpoint])
    c = mesh.cells
    m = nv + mesh.cell_edges  # midpoint vertex of edge opposite vertex i
    children = np.vstack([
        np.column_stack([c[:, 0], m[:, 2], m[:, 1]]),
        np.column_stack([c[:, 1], m[:, 0], m[:, 2]]),
        np.column_stack([c[:, 2], m[:, 1], m[:, 0]]),
        np.column_stack([m[:, 0], m[:, 1], m[:, 2]]),
    ])
    return Mesh(new_vertices, children)


def mesh_stats(mesh):
    """Global mesh quantities.

    Returns
    -------
    dict
        ``h_max`` (largest cell diameter), ``min_angle`` (radians),
        ``cell_count`` and ``edge_count``.
    """
    v = mesh.vertices
    c = mesh.cells
    min_angle = np.pi
    for k in range(3):
        a = v[c[:, (k + 1) % 3]] - v[c[:, k]]
        b = v[c[:, (k + 2) % 3]] - v[c[:, k]]
        cosang = np.sum(a * b, axis=1) / (
            np.hypot(a[:, 0], a[:, 1]) * np.hypot(b[:, 0], b[:, 1]))
        min_angle = min(min_angle, np.arccos(np.clip(cosang, -1, 1)).min())
    return {
        "h_max": float(mesh.h_cell.max()),
        "min_angle": float(min_angle),
        "cell_count": mesh.num_cells,
        "edge_count": mesh.num_edges,
    }


def dump_ascii(mesh, stream):
    """Write a plain-text mesh listing ('v x y' and 'c i j k' lines)."""
    for x, y in mesh.vertices:
        stream.write("v {:.17g} {:.17g}\n".format(x, y))
    for i, j, k in mesh.cells:
        stream.write("c {} {} {}\n".format(i, j, k))
