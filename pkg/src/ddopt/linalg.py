"""Sparse direct solution of the saddle-point systems.

Compressed sparse row storage and the factorization are delegated to
scipy (SuperLU with partial pivoting and a COLAMD fill-reducing ordering),
which matches the role the external direct solver played in the original
computations.  A factorization is immutable and reusable across right-hand
sides.
"""

import numpy as np
from scipy import sparse as sp
from scipy.sparse import linalg as spla

__all__ = ["SingularMatrixError", "LinearSolveError", "DirectSolver",
           "solve_direct", "BlockSystem"]


class SingularMatrixError(RuntimeError):
    """Raised when the factorization hits a numerically singular pivot."""

    def __init__(self, message, pivot=None):
        super().__init__(message)
        self.pivot = pivot


class LinearSolveError(RuntimeError):
    """Raised when the direct solve cannot reach the residual tolerance."""


class DirectSolver:
    """Sparse LU factorization with reusable solves.

    Parameters
    ----------
    A : sparse matrix
        Square, structurally nonsingular.
    """

    def __init__(self, A):
        A = sp.csc_matrix(A)
        if A.shape[0] != A.shape[1]:
            raise ValueError("matrix must be square")
        self._A = A
        try:
            self._lu = spla.splu(A)
        except RuntimeError as exc:
            raise SingularMatrixError(str(exc)) from exc
        diag = self._lu.U.diagonal()
        bad = np.flatnonzero(~np.isfinite(diag) | (diag == 0.0))
        if bad.size:
            raise SingularMatrixError(
                "numerically singular pivot at index {}".format(bad[0]),
                pivot=int(bad[0]))

    def solve(self, b, rtol=1e-9, refine=4):
        """Solve A x = b with iterative refinement to relative residual rtol.
        """
        b = np.asarray(b, dtype=float)
        x = self._lu.solve(b)
        norm_b = np.linalg.norm(b)
        if norm_b == 0.0:
            return np.zeros_like(b)
        for _ in range(refine):
            r = b - self._A @ x
            if np.linalg.norm(r) <= rtol * norm_b:
                return x
            x = x + self._lu.solve(r)
        r = b - self._A @ x
        if np.linalg.norm(r) > rtol * norm_b:
            raise LinearSolveError(
                "direct solve stalled at relative residual {:.3e}".format(
                    np.linalg.norm(r) / norm_b))
        return x


def solve_direct(A, b, rtol=1e-9):
    """One-shot sparse direct solve, see ``DirectSolver``."""
    return DirectSolver(A).solve(b, rtol=rtol)


class BlockSystem:
    """Monolithic matrix and right-hand side from named blocks.

    Parameters
    ----------
    blocks : list of list
        2D layout accepted by ``scipy.sparse.bmat`` (None for empty blocks).
    rhs : list of ndarray
        One vector per block row.
    """

    def __init__(self, blocks, rhs):
        self.matrix = sp.bmat(blocks, format="csc")
        self.rhs = np.concatenate([np.asarray(r, dtype=float) for r in rhs])
        self.sizes = [np.asarray(r).shape[0] for r in rhs]
        if self.matrix.shape[0] != self.rhs.shape[0]:
            raise ValueError("block dimensions inconsistent with rhs")

    def split(self, x):
        """Cut a solution vector back into the block components."""
        out = []
        start = 0
        for s in self.sizes:
            out.append(x[start:start + s])
            start += s
        return out

    def solve(self, rtol=1e-12):
        return self.split(solve_direct(self.matrix, self.rhs, rtol=rtol))


class BorderedSolver:
    """Direct solver for [[K, d], [e^T, 0]] with a dense border.

    A scalar Lagrange multiplier (the zero-mean pressure constraint) adds a
    dense row and column to an otherwise sparse system; factoring them
    directly causes catastrophic fill in the LU.  Instead only the core K
    is factorized, made nonsingular by adding a rank-one pin at
    (pin_row, pin_col); the border and the pin are then eliminated exactly
    by block elimination and the Sherman-Morrison formula, followed by
    iterative refinement on the full bordered system.

    Parameters
    ----------
    K : sparse matrix (n, n)
        Core; singular only through the constraint pair (d, e).
    d : ndarray (n,)
        Multiplier column.
    e : ndarray (n,)
        Constraint row.
    pin_row, pin_col : int
        Pin entry; K + e_{pin_row} e_{pin_col}^T must be nonsingular.
    """

    def __init__(self, K, d, e, pin_row, pin_col):
        n = K.shape[0]
        self.d = np.asarray(d, dtype=float)
        self.e = np.asarray(e, dtype=float)
        self.pin_col = pin_col
        self.K = sp.csc_matrix(K)
        pin = sp.coo_matrix(([1.0], ([pin_row], [pin_col])), shape=(n, n))
        self.core = DirectSolver(self.K + pin)
        # bordered elimination data: s = Ktilde^{-1} d
        self.s = self.core._lu.solve(self.d)
        self.es = float(self.e @ self.s)
        if self.es == 0.0 or not np.isfinite(self.es):
            raise SingularMatrixError("constraint row is orthogonal to the "
                                      "multiplier column image")
        # Sherman-Morrison data for removing the pin: q = Mtilde^{-1} W
        w = np.zeros(n)
        w[pin_row] = 1.0
        self.qx, self.qm = self._mtilde_solve(w, 0.0)
        self.denom = 1.0 - self.qx[pin_col]
        if self.denom == 0.0 or not np.isfinite(self.denom):
            raise SingularMatrixError("pin elimination degenerate")

    def _mtilde_solve(self, r, rho):
        y = self.core._lu.solve(r)
        m = (float(self.e @ y) - rho) / self.es
        return y - m * self.s, m

    def _apply_once(self, b, beta):
        x, m = self._mtilde_solve(b, beta)
        alpha = x[self.pin_col] / self.denom
        return x + alpha * self.qx, m + alpha * self.qm

    def solve(self, b, beta=0.0, rtol=1e-12, accept=1e-8, refine=6):
        """Solve the bordered system for (x, m).

        Refines to relative residual ``rtol`` when possible and accepts up
        to ``accept`` (raising LinearSolveError beyond that).
        """
        b = np.asarray(b, dtype=float)
        x, m = self._apply_once(b, beta)
        norm = np.linalg.norm(b) + abs(beta)
        if norm == 0.0:
            return np.zeros_like(b), 0.0
        best = None
        for _ in range(refine + 1):
            rx = b - (self.K @ x + m * self.d)
            rm = beta - float(self.e @ x)
            res = np.sqrt(np.linalg.norm(rx) ** 2 + rm ** 2)
            if best is None or res < best[0]:
                best = (res, x.copy(), m)
            if res <= rtol * norm:
                return x, m
            dx, dm = self._apply_once(rx, rm)
            x = x + dx
            m = m + dm
        res, x, m = best
        if res > accept * norm:
            raise LinearSolveError(
                "bordered solve stalled at relative residual {:.3e}".format(
                    res / norm))
        return x, m
