"""Rectangular domain, MAC grid and the discrete function-space operators.

Velocity fields are flat float64 arrays holding the interior x-face values
(``(nx-1)*ny`` entries, C-ordered as ``(nx-1, ny)``) followed by the interior
y-face values (``nx*(ny-1)`` entries, ordered as ``(nx, ny-1)``).  Boundary
normal faces carry the homogeneous Dirichlet value and are not stored.
Pressures are cell-centred arrays of length ``nx*ny``.  Leading batch axes
are allowed everywhere; operators act on the last axis.
"""

from dataclasses import dataclass
from functools import cached_property

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .errors import GridError, RegionError

__all__ = [
    "GridSpec",
    "Grid",
    "Region",
    "build_grid",
    "indicator",
    "make_weight",
    "inner_product_H",
    "norm_H",
    "divergence",
    "gradient",
    "laplacian",
    "h1_seminorm_sq",
    "leray_project",
    "saddle_matrix",
    "factorize_saddle",
    "solve_saddle",
]


@dataclass(frozen=True)
class GridSpec:
    nx: int = 16
    ny: int = 16
    lx: float = 1.0
    ly: float = 1.0
    nt: int = 16
    t_final: float = 1.0

    def validate(self):
        if self.nx < 4 or self.ny < 4:
            raise GridError(f"grid too coarse: nx={self.nx}, ny={self.ny} (need >= 4)")
        if self.nt < 2:
            raise GridError(f"need at least 2 time steps, got nt={self.nt}")
        if not (self.lx > 0 and self.ly > 0 and self.t_final > 0):
            raise GridError("domain lengths and horizon must be positive")


@dataclass(frozen=True)
class Region:
    """Axis-aligned rectangle ``[x0, x1) x [y0, y1)`` in domain coordinates."""

    x0: float
    x1: float
    y0: float
    y1: float

    def __post_init__(self):
        if self.x1 < self.x0 or self.y1 < self.y0:
            raise RegionError(f"region has negative extent: {self}")

    @property
    def area(self):
        return (self.x1 - self.x0) * (self.y1 - self.y0)

    def contains(self, other):
        return (self.x0 <= other.x0 and other.x1 <= self.x1
                and self.y0 <= other.y0 and other.y1 <= self.y1)

    def overlaps(self, other):
        """True when the intersection has positive area."""
        return (min(self.x1, other.x1) > max(self.x0, other.x0)
                and min(self.y1, other.y1) > max(self.y0, other.y0))

    def as_tuple(self):
        return (self.x0, self.x1, self.y0, self.y1)


def _second_difference(n, h, wall_ghost):
    # wall_ghost: ends carry -3 (cell-centred unknowns, mirrored ghost) instead of -2
    main = -2.0 * np.ones(n)
    if wall_ghost:
        main[0] = main[-1] = -3.0
    off = np.ones(n - 1)
    return sp.diags([off, main, off], [-1, 0, 1], format="csr") / h**2


def _face_to_cell(n, h):
    """(n, n-1) difference: interior faces -> cells; boundary faces are zero."""
    rows, cols, vals = [], [], []
    for i in range(n):
        if i + 1 <= n - 1:
            rows.append(i), cols.append(i), vals.append(1.0)
        if i >= 1:
            rows.append(i), cols.append(i - 1), vals.append(-1.0)
    return sp.csr_matrix((vals, (rows, cols)), shape=(n, n - 1)) / h


class Grid:
    """Immutable discretisation of ``Omega x (0, T)``."""

    def __init__(self, spec: GridSpec):
        spec.validate()
        self.spec = spec
        self.nx, self.ny, self.nt = spec.nx, spec.ny, spec.nt
        self.lx, self.ly, self.t_final = float(spec.lx), float(spec.ly), float(spec.t_final)
        self.hx = self.lx / self.nx
        self.hy = self.ly / self.ny
        self.dt = self.t_final / self.nt
        self.n_u = (self.nx - 1) * self.ny
        self.n_v = self.nx * (self.ny - 1)
        self.n_faces = self.n_u + self.n_v
        self.n_cells = self.nx * self.ny
        self.volume = self.hx * self.hy

        xu = np.arange(1, self.nx) * self.hx
        yu = (np.arange(self.ny) + 0.5) * self.hy
        xv = (np.arange(self.nx) + 0.5) * self.hx
        yv = np.arange(1, self.ny) * self.hy
        XU, YU = np.meshgrid(xu, yu, indexing="ij")
        XV, YV = np.meshgrid(xv, yv, indexing="ij")
        self.face_x = np.concatenate([XU.ravel(), XV.ravel()])
        self.face_y = np.concatenate([YU.ravel(), YV.ravel()])
        xc = (np.arange(self.nx) + 0.5) * self.hx
        yc = (np.arange(self.ny) + 0.5) * self.hy
        XC, YC = np.meshgrid(xc, yc, indexing="ij")
        self.cell_x, self.cell_y = XC.ravel(), YC.ravel()
        self.times = np.linspace(0.0, self.t_final, self.nt + 1)
        for arr in (self.face_x, self.face_y, self.cell_x, self.cell_y, self.times):
            arr.setflags(write=False)

    def __repr__(self):
        return f"Grid(nx={self.nx}, ny={self.ny}, lx={self.lx}, ly={self.ly}, nt={self.nt}, T={self.t_final})"

    def __eq__(self, other):
        return isinstance(other, Grid) and self.spec == other.spec

    def __hash__(self):
        return hash(self.spec)

    @property
    def domain(self):
        return Region(0.0, self.lx, 0.0, self.ly)

    def split(self, field):
        """View a face array as its ``(nx-1, ny)`` and ``(nx, ny-1)`` parts."""
        field = np.asarray(field)
        lead = field.shape[:-1]
        return (field[..., :self.n_u].reshape(lead + (self.nx - 1, self.ny)),
                field[..., self.n_u:].reshape(lead + (self.nx, self.ny - 1)))

    def check_faces(self, field, name="field"):
        field = np.asarray(field, dtype=float)
        if field.shape[-1:] != (self.n_faces,):
            raise GridError(f"{name} has trailing size {field.shape[-1:]} but grid has {self.n_faces} faces")
        return field

    @cached_property
    def div_matrix(self):
        du = sp.kron(_face_to_cell(self.nx, self.hx), sp.identity(self.ny))
        dv = sp.kron(sp.identity(self.nx), _face_to_cell(self.ny, self.hy))
        return sp.hstack([du, dv], format="csr")

    @cached_property
    def grad_matrix(self):
        # exact negative transpose of the divergence: (grad p, u)_H = -(p, div u)
        return (-self.div_matrix.T).tocsr()

    @cached_property
    def lap_matrix(self):
        lu = (sp.kron(_second_difference(self.nx - 1, self.hx, False), sp.identity(self.ny))
              + sp.kron(sp.identity(self.nx - 1), _second_difference(self.ny, self.hy, True)))
        lv = (sp.kron(_second_difference(self.nx, self.hx, True), sp.identity(self.ny - 1))
              + sp.kron(sp.identity(self.nx), _second_difference(self.ny - 1, self.hy, False)))
        return sp.block_diag([lu, lv], format="csr")

    @cached_property
    def curl_matrix(self):
        """Discrete curl of an interior-node stream function.

        Its range is exactly the discrete divergence-free subspace: the
        columns number ``(nx-1)*(ny-1)``, which is the kernel dimension of
        ``div`` on a simply connected box.
        """
        cu = sp.kron(sp.identity(self.nx - 1), _face_to_cell(self.ny, self.hy))
        cv = -sp.kron(_face_to_cell(self.nx, self.hx), sp.identity(self.ny - 1))
        return sp.vstack([cu, cv], format="csr")

    @cached_property
    def _projector(self):
        return factorize_saddle(saddle_matrix(self, sp.identity(self.n_faces, format="csr")))


def build_grid(spec: GridSpec) -> Grid:
    return Grid(spec)


def saddle_matrix(grid: Grid, velocity_block):
    """Symmetric saddle matrix ``[[A, G], [G^T, C]]``.

    ``C`` holds a single unit entry on the first pressure diagonal.  Since
    the divergence rows sum to zero, that entry forces ``p[0] = 0`` and leaves
    ``div u = 0`` exact; callers shift the pressure to zero mean afterwards.
    """
    G = grid.grad_matrix
    C = sp.csr_matrix(([1.0], ([0], [0])), shape=(grid.n_cells, grid.n_cells))
    return sp.bmat([[velocity_block, G], [G.T, C]], format="csc")


def factorize_saddle(matrix):
    return spla.splu(matrix, permc_spec="MMD_ATA")


def solve_saddle(lu, grid, rhs):
    """Solve for face right-hand sides of shape ``(..., n_faces)``; returns ``(u, p)``."""
    flat = rhs.reshape(-1, grid.n_faces)
    full = np.zeros((grid.n_faces + grid.n_cells, flat.shape[0]))
    full[:grid.n_faces] = flat.T
    sol = lu.solve(full)
    u = sol[:grid.n_faces].T.reshape(rhs.shape)
    p = sol[grid.n_faces:].T
    p = (p - p.mean(axis=1, keepdims=True)).reshape(rhs.shape[:-1] + (grid.n_cells,))
    return u, p


def _check_inside(region, grid):
    dom = grid.domain
    tol = 1e-12 * max(grid.lx, grid.ly)
    if (region.x0 < -tol or region.y0 < -tol
            or region.x1 > dom.x1 + tol or region.y1 > dom.y1 + tol):
        raise RegionError(f"region {region.as_tuple()} lies outside the domain {dom.as_tuple()}")


def indicator(region: Region, grid: Grid) -> np.ndarray:
    """0/1 mask of the faces whose centres lie in the half-open rectangle."""
    _check_inside(region, grid)
    inside = ((grid.face_x >= region.x0) & (grid.face_x < region.x1)
              & (grid.face_y >= region.y0) & (grid.face_y < region.y1))
    return inside.astype(float)


def _taper(coord, c0, c1, s0, s1):
    s = np.zeros_like(coord)
    lo = coord < c0
    hi = coord >= c1
    if c0 > s0:
        s[lo] = (c0 - coord[lo]) / (c0 - s0)
    else:
        s[lo] = 1.0
    if s1 > c1:
        s[hi] = (coord[hi] - c1) / (s1 - c1)
    else:
        s[hi] = 1.0
    s = np.clip(s, 0.0, 1.0)
    out = 0.5 * (1.0 + np.cos(np.pi * s))
    # outside the half-open support the weight vanishes exactly
    out[(coord < s0) | (coord >= s1)] = 0.0
    return out


def make_weight(core: Region, support: Region, grid: Grid) -> np.ndarray:
    """Weight equal to 1 on ``core``, 0 outside ``support``, cosine taper between."""
    _check_inside(support, grid)
    if not support.contains(core):
        raise RegionError(f"core {core.as_tuple()} is not inside support {support.as_tuple()}")
    wx = _taper(grid.face_x, core.x0, core.x1, support.x0, support.x1)
    wy = _taper(grid.face_y, core.y0, core.y1, support.y0, support.y1)
    return wx * wy


def inner_product_H(grid: Grid, a, b):
    """Face-volume weighted L2 product over the last axis.

    Uses ``np.sum`` rather than BLAS so the result does not depend on the
    thread count.
    """
    a = grid.check_faces(a, "a")
    b = grid.check_faces(b, "b")
    return grid.volume * np.sum(a * b, axis=-1)


def norm_H(grid: Grid, a):
    return np.sqrt(inner_product_H(grid, a, a))


def divergence(grid: Grid, u):
    u = grid.check_faces(u, "u")
    return (grid.div_matrix @ u.reshape(-1, grid.n_faces).T).T.reshape(u.shape[:-1] + (grid.n_cells,))


def gradient(grid: Grid, p):
    p = np.asarray(p, dtype=float)
    if p.shape[-1] != grid.n_cells:
        raise GridError(f"pressure has {p.shape[-1]} entries, grid has {grid.n_cells} cells")
    return (grid.grad_matrix @ p.reshape(-1, grid.n_cells).T).T.reshape(p.shape[:-1] + (grid.n_faces,))


def laplacian(grid: Grid, u):
    u = grid.check_faces(u, "u")
    return (grid.lap_matrix @ u.reshape(-1, grid.n_faces).T).T.reshape(u.shape)


def h1_seminorm_sq(grid: Grid, u):
    """Discrete ``||grad u||^2 = (u, -Lap u)_H``."""
    return -inner_product_H(grid, u, laplacian(grid, u))


def leray_project(grid: Grid, f, return_pressure=False):
    """Orthogonal projection onto the discrete divergence-free subspace.

    Solves ``u + grad q = f, div u = 0`` with zero-mean ``q``.
    """
    f = grid.check_faces(f, "f")
    u, q = solve_saddle(grid._projector, grid, f)
    if not np.all(np.isfinite(u)):
        raise GridError("singular pressure solve in Leray projection")
    return (u, q) if return_pressure else u
