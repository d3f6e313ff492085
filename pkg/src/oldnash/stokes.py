"""Implicit Stokes step ``(I/dt - mu Lap) u + grad p = rhs, div u = 0``."""

import numpy as np
import scipy.linalg as sla
from scipy.linalg.lapack import dpbtrs
import scipy.sparse as sp

from .errors import SolverError
from .geometry import factorize_saddle, saddle_matrix, solve_saddle


class SaddleFactorization:
    """Assembled saddle-point matrix for fixed ``(grid, dt, mu)`` and its LU.

    ``dt=np.inf`` drops the mass term, leaving the steady Stokes operator.
    """

    def __init__(self, grid, dt, mu):
        if not (dt > 0 and mu >= 0):
            raise ValueError("need dt > 0 and mu >= 0")
        self.grid, self.dt, self.mu = grid, float(dt), float(mu)
        mass = 0.0 if np.isinf(dt) else 1.0 / dt
        self.velocity_block = (mass * sp.identity(grid.n_faces, format="csr")
                               - self.mu * grid.lap_matrix).tocsr()
        self.matrix = saddle_matrix(grid, self.velocity_block)
        try:
            self._lu = factorize_saddle(self.matrix)
        except RuntimeError as exc:
            raise SolverError(f"saddle-point factorisation failed: {exc}") from exc

        self._reduced = None

    def _reduced_factor(self):
        # banded Cholesky of C^T A C, with C the stream-function curl
        if self._reduced is None:
            C = self.grid.curl_matrix
            R = (C.T @ self.velocity_block @ C).tocoo()
            lower = R.row >= R.col
            bw = int(np.max(R.row[lower] - R.col[lower]))
            ab = np.zeros((bw + 1, R.shape[0]))
            np.add.at(ab, (R.row[lower] - R.col[lower], R.col[lower]), R.data[lower])
            try:
                chol = sla.cholesky_banded(ab, lower=True)
            except sla.LinAlgError as exc:
                raise SolverError(f"reduced step factorisation failed: {exc}") from exc
            self._reduced = (chol, C, C.T.tocsr())
        return self._reduced

    @property
    def key(self):
        return (self.grid.spec, self.dt, self.mu)

    @property
    def shape(self):
        return self.matrix.shape

    def solve(self, rhs):
        """Solve for a batch of right-hand sides of shape ``(..., n_faces)``."""
        return solve_saddle(self._lu, self.grid, np.asarray(rhs, dtype=float))

    def solve_velocity(self, rhs):
        """Velocity part of :meth:`solve` by the null-space method.

        Same discrete solution (the divergence-free space is the range of the
        curl), about twice as fast; used by the time marching.
        """
        chol, C, CT = self._reduced_factor()
        rhs = np.asarray(rhs, dtype=float)
        flat = rhs.reshape(-1, self.grid.n_faces).T
        psi, info = dpbtrs(chol, CT @ flat, lower=1)
        if info != 0:
            raise SolverError(f"reduced step solve failed (info={info})")
        return (C @ psi).T.reshape(rhs.shape)


def assemble(grid, dt, mu):
    return SaddleFactorization(grid, dt, mu)


def stokes_step(rhs, fact):
    """Return ``(u, p)`` for one implicit step; ``p`` has zero mean."""
    rhs = fact.grid.check_faces(rhs, "rhs")
    u, p = fact.solve(rhs)
    if not (np.all(np.isfinite(u)) and np.all(np.isfinite(p))):
        raise SolverError("non-finite values in Stokes step")
    return u, p


def momentum_residual(fact, u, p, rhs):
    """``(||A u + G p - rhs||, ||div u||)`` in Euclidean norms."""
    grid = fact.grid
    r = fact.velocity_block @ u + grid.grad_matrix @ p - rhs
    return float(np.linalg.norm(r)), float(np.linalg.norm(grid.div_matrix @ u))
