#!/usr/bin/env python3
"""
Mesh and basis layer for fevolve
Tensor grids, piecewise-multilinear hat projectors and inner-product (Gram)
matrices with their triangular factors.

All objects here are immutable after construction and may be shared between
threads; callers can assemble different grids concurrently.
"""

import logging
import math
from dataclasses import dataclass
from itertools import product
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import scipy.sparse as sp
from scipy import linalg
from scipy.sparse import linalg as spla

from errors import (
    DimensionMismatch,
    DimensionUnsupported,
    FactorizationFailed,
    InsufficientSamples,
    NonConformingSpacing,
)

logger = logging.getLogger(__name__)

BASIS_KIND = "piecewise-multilinear-hat"
BC_KINDS = ("dirichlet", "none")
SPACING_RTOL = 1e-12
SYMMETRY_RTOL = 1e-12
DENSE_LIMIT = 2000
ZERO_ERROR = 1e-12

Bounds = Union[Tuple[float, float], Sequence[Tuple[float, float]]]
Field = Callable[..., np.ndarray]


@dataclass(frozen=True, eq=False)
class Grid:
    """Tensor-product node set over a box, nodes in lexicographic order"""
    dim: int
    bounds: Tuple[Tuple[float, float], ...]
    h: Tuple[float, ...]
    shape: Tuple[int, ...]
    axes: Tuple[np.ndarray, ...]
    nodes: np.ndarray
    interior_mask: np.ndarray
    boundary_mask: np.ndarray
    bc: str = "dirichlet"

    @property
    def node_count(self) -> int:
        return self.nodes.shape[0]

    @property
    def h_min(self) -> float:
        return min(self.h)

    @property
    def cell_volume(self) -> float:
        return float(np.prod(self.h))

    @property
    def index_map(self) -> Dict[int, Tuple[float, ...]]:
        return {k: tuple(float(c) for c in node) for k, node in enumerate(self.nodes)}


@dataclass(frozen=True, eq=False)
class Projector:
    """Particular projector P = p p† on a hat basis.

    decompose is p† (nodal sampling at the dof nodes), expand is p
    (multilinear interpolation of a coefficient vector).
    """
    grid: Grid
    bc: str
    dof_indices: np.ndarray
    basis_kind: str = BASIS_KIND
    projection_order: int = 2

    @property
    def dof_count(self) -> int:
        return int(self.dof_indices.size)

    @property
    def dof_nodes(self) -> np.ndarray:
        return self.grid.nodes[self.dof_indices]

    def to_nodal(self, coeffs: np.ndarray) -> np.ndarray:
        coeffs = np.asarray(coeffs)
        if coeffs.shape != (self.dof_count,):
            raise DimensionMismatch(
                f"expected {self.dof_count} coefficients, got shape {coeffs.shape}")
        nodal = np.zeros(self.grid.node_count, dtype=np.result_type(coeffs, float))
        nodal[self.dof_indices] = coeffs
        return nodal

    def decompose(self, u: Field) -> np.ndarray:
        values = np.asarray(u(*self.dof_nodes.T))
        return np.broadcast_to(values, (self.dof_count,)).copy()

    def expand(self, coeffs: np.ndarray) -> Field:
        nodal = self.to_nodal(coeffs)
        cells, origins = cell_connectivity(self.grid)
        lower = np.array([b[0] for b in self.grid.bounds])
        h = np.array(self.grid.h)
        cell_shape = np.array(self.grid.shape) - 1
        corners = np.array(list(product((0, 1), repeat=self.grid.dim)))
        strides = _cell_strides(cell_shape)

        def field(*coords):
            points = np.stack(np.broadcast_arrays(*[np.asarray(c, dtype=float) for c in coords]), axis=-1)
            flat = points.reshape(-1, self.grid.dim)
            local = (flat - lower) / h
            base = np.clip(np.floor(local).astype(int), 0, cell_shape - 1)
            xi = local - base
            cell = base @ strides
            values = np.zeros(flat.shape[0], dtype=nodal.dtype)
            for a, corner in enumerate(corners):
                weight = np.prod(np.where(corner == 1, xi, 1.0 - xi), axis=1)
                values += weight * nodal[cells[cell, a]]
            return values.reshape(points.shape[:-1])

        return field

    def basis_function(self, k: int) -> Field:
        unit = np.zeros(self.dof_count)
        unit[k] = 1.0
        return self.expand(unit)


@dataclass(frozen=True, eq=False)
class GramMatrix:
    """SPD inner-product matrix M with lower factor L, L Lᵀ = M.

    The weighted map m of the discrete norm ‖x‖ = ‖m x‖₂ is m = Lᵀ.
    """
    matrix: sp.csr_matrix
    lower: sp.csr_matrix
    band: np.ndarray
    kappa: float
    space_volume: float
    label: str = "mass"

    @property
    def size(self) -> int:
        return self.matrix.shape[0]

    def apply_factor(self, x: np.ndarray) -> np.ndarray:
        return self.lower.T @ x

    def solve_factor(self, y: np.ndarray) -> np.ndarray:
        """Apply m⁻¹ = L⁻ᵀ"""
        bw = self.band.shape[0] - 1
        n = self.size
        upper = np.zeros_like(self.band)
        for d in range(bw + 1):
            upper[bw - d, d:] = self.band[d, :n - d]
        return _split_complex(lambda b: linalg.solve_banded((0, bw), upper, b), y)

    def solve(self, b: np.ndarray) -> np.ndarray:
        """Apply M⁻¹ through the cached banded Cholesky factor"""
        return _split_complex(lambda rhs: linalg.cho_solve_banded((self.band, True), rhs), b)


def _split_complex(solver: Callable[[np.ndarray], np.ndarray], b: np.ndarray) -> np.ndarray:
    b = np.asarray(b)
    if np.iscomplexobj(b):
        return solver(b.real) + 1j * solver(b.imag)
    return solver(b.astype(float))


def _cell_strides(shape: np.ndarray) -> np.ndarray:
    return np.array([int(np.prod(shape[d + 1:])) for d in range(len(shape))], dtype=int)


def build_tensor_grid(bounds: Bounds, h: Union[float, Sequence[float]], bc: str = "dirichlet") -> Grid:
    """Build a lexicographically ordered tensor grid over a box"""
    if bc not in BC_KINDS:
        raise ValueError(f"Unknown boundary condition {bc!r}; use one of {BC_KINDS}")

    if np.ndim(bounds) == 1:
        bounds = (tuple(bounds),)
    bounds = tuple((float(lo), float(hi)) for lo, hi in bounds)
    dim = len(bounds)
    if dim < 1 or dim > 3:
        raise DimensionUnsupported(f"grids support 1 to 3 dimensions, got {dim}")

    spacing = (float(h),) * dim if np.ndim(h) == 0 else tuple(float(s) for s in h)
    if len(spacing) != dim:
        raise DimensionMismatch(f"{len(spacing)} spacings for a {dim}-dimensional box")

    axes = []
    for (lo, hi), step in zip(bounds, spacing):
        if step <= 0 or hi <= lo:
            raise NonConformingSpacing(f"invalid axis [{lo}, {hi}] with h={step}")
        cells = (hi - lo) / step
        if abs(cells - round(cells)) > SPACING_RTOL * max(1.0, cells) or round(cells) < 1:
            raise NonConformingSpacing(
                f"axis length {hi - lo} is not an integer multiple of h={step}")
        axes.append(np.linspace(lo, hi, int(round(cells)) + 1))

    shape = tuple(len(axis) for axis in axes)
    mesh = np.meshgrid(*axes, indexing="ij")
    nodes = np.stack([m.ravel() for m in mesh], axis=1)
    index = np.indices(shape).reshape(dim, -1)
    last = (np.array(shape) - 1)[:, None]
    boundary = np.any((index == 0) | (index == last), axis=0)

    for arr in (nodes, boundary, *axes):
        arr.setflags(write=False)
    interior = ~boundary
    interior.setflags(write=False)

    logger.debug(f"📐 Grid dim={dim} shape={shape} h={spacing}")
    return Grid(dim=dim, bounds=bounds, h=spacing, shape=shape, axes=tuple(axes),
                nodes=nodes, interior_mask=interior, boundary_mask=boundary, bc=bc)


def build_projector(grid: Grid, bc: Optional[str] = None) -> Projector:
    """Hat-basis projector; Dirichlet eliminates the boundary dofs"""
    bc = bc or grid.bc
    if bc not in BC_KINDS:
        raise ValueError(f"Unknown boundary condition {bc!r}; use one of {BC_KINDS}")
    if bc == "dirichlet":
        dofs = np.flatnonzero(grid.interior_mask)
    else:
        dofs = np.arange(grid.node_count)
    dofs.setflags(write=False)
    return Projector(grid=grid, bc=bc, dof_indices=dofs)


def reference_element(dim: int, points_per_axis: int) -> Tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Tensor Gauss rule on the unit cell with hat values and reference gradients.

    Returns (phi, dphi, weights, xi) with shapes (nq, nloc), (nq, nloc, dim),
    (nq,), (nq, dim). Local corner order matches cell_connectivity.
    """
    g, w = np.polynomial.legendre.leggauss(points_per_axis)
    g = 0.5 * (g + 1.0)
    w = 0.5 * w
    xi = np.array(list(product(g, repeat=dim)))
    weights = np.prod(np.array(list(product(w, repeat=dim))), axis=1)
    corners = np.array(list(product((0, 1), repeat=dim)))

    factors = np.where(corners[None, :, :] == 1, xi[:, None, :], 1.0 - xi[:, None, :])
    slopes = np.where(corners == 1, 1.0, -1.0)
    phi = np.prod(factors, axis=2)
    dphi = np.empty(phi.shape + (dim,))
    for d in range(dim):
        others = np.prod(np.delete(factors, d, axis=2), axis=2) if dim > 1 else np.ones_like(phi)
        dphi[:, :, d] = slopes[None, :, d] * others
    return phi, dphi, weights, xi


def cell_connectivity(grid: Grid) -> Tuple[np.ndarray, np.ndarray]:
    """Global node indices of each cell's corners and each cell's lower corner"""
    shape = np.array(grid.shape)
    cell_shape = shape - 1
    base = np.indices(tuple(cell_shape)).reshape(grid.dim, -1).T
    corners = np.array(list(product((0, 1), repeat=grid.dim)))
    cells = (base[:, None, :] + corners[None, :, :]) @ _cell_strides(shape)
    lower = np.array([b[0] for b in grid.bounds])
    origins = lower + base * np.array(grid.h)
    return cells, origins


def scatter_cells(proj: Projector, local: np.ndarray) -> sp.csr_matrix:
    """Assemble an identical per-cell matrix over all cells, restricted to dofs"""
    cells, _ = cell_connectivity(proj.grid)
    nloc = cells.shape[1]
    rows = np.broadcast_to(cells[:, :, None], (cells.shape[0], nloc, nloc))
    cols = np.broadcast_to(cells[:, None, :], (cells.shape[0], nloc, nloc))
    data = np.broadcast_to(local, (cells.shape[0], nloc, nloc))
    n = proj.grid.node_count
    full = sp.coo_matrix((data.ravel(), (rows.ravel(), cols.ravel())), shape=(n, n)).tocsr()
    return full[proj.dof_indices][:, proj.dof_indices].tocsr()


def banded_cholesky(matrix: sp.spmatrix) -> np.ndarray:
    """Lower banded Cholesky factor of a sparse SPD matrix"""
    coo = matrix.tocoo()
    n = matrix.shape[0]
    bw = int(np.max(np.abs(coo.row - coo.col))) if coo.nnz else 0
    ab = np.zeros((bw + 1, n))
    for d in range(bw + 1):
        ab[d, :n - d] = matrix.diagonal(-d)
    return linalg.cholesky_banded(ab, lower=True)


def band_to_lower(band: np.ndarray) -> sp.csr_matrix:
    n = band.shape[1]
    diagonals = [band[d, :n - d] for d in range(band.shape[0])]
    offsets = [-d for d in range(band.shape[0])]
    return sp.diags(diagonals, offsets, shape=(n, n), format="csr")


def extremal_eigenvalues(matrix: sp.spmatrix, mass: Optional[sp.spmatrix] = None) -> Tuple[float, float]:
    """Smallest and largest eigenvalue of A x = λ B x (B = I when mass is None)"""
    n = matrix.shape[0]
    if n <= DENSE_LIMIT:
        dense_mass = None if mass is None else mass.toarray()
        values = linalg.eigh(matrix.toarray(), dense_mass, eigvals_only=True)
        return float(values[0]), float(values[-1])
    hi = spla.eigsh(matrix, k=1, M=mass, which="LA", return_eigenvectors=False, tol=1e-12)[0]
    lo = spla.eigsh(matrix, k=1, M=mass, sigma=0.0, which="LM", return_eigenvectors=False, tol=1e-12)[0]
    return float(lo), float(hi)


def gram_from_matrix(matrix: Union[np.ndarray, sp.spmatrix], label: str = "gram") -> GramMatrix:
    """Wrap an SPD matrix as a GramMatrix (factor, condition number, μ(G))"""
    matrix = sp.csr_matrix(matrix, dtype=float)
    scale = abs(matrix).max() if matrix.nnz else 0.0
    asymmetry = abs(matrix - matrix.T).max() if matrix.nnz else 0.0
    if asymmetry > SYMMETRY_RTOL * scale:
        raise FactorizationFailed(f"{label}: symmetry residual {asymmetry:.3e} exceeds tolerance")

    try:
        band = banded_cholesky(matrix)
    except linalg.LinAlgError as e:
        raise FactorizationFailed(f"{label}: nonpositive pivot in triangular factorization") from e
    if np.any(band[0] <= 0):
        raise FactorizationFailed(f"{label}: nonpositive pivot in triangular factorization")

    lo, hi = extremal_eigenvalues(matrix)
    lower = band_to_lower(band)
    ones = np.ones(matrix.shape[0])
    volume = float(np.linalg.norm(lower.T @ ones))
    return GramMatrix(matrix=matrix, lower=lower, band=band, kappa=max(1.0, hi / lo),
                      space_volume=volume, label=label)


def assemble_gram(proj: Projector, points_per_axis: int = 2) -> GramMatrix:
    """Mass matrix M_ij = ∫ p_i p_j by per-cell Gauss quadrature"""
    phi, _, weights, _ = reference_element(proj.grid.dim, points_per_axis)
    local = proj.grid.cell_volume * (phi.T * weights) @ phi
    matrix = scatter_cells(proj, local)
    gram = gram_from_matrix(matrix, label=f"mass[{proj.grid.dim}d,h={proj.grid.h_min:g}]")
    logger.info(f"📐 Gram assembled: {gram.size} dofs, κ={gram.kappa:.4g}, μ(G)={gram.space_volume:.6g}")
    return gram


def lumped_mass(g: GramMatrix) -> np.ndarray:
    """Row-sum diagonal of the Gram matrix"""
    return np.asarray(g.matrix.sum(axis=1)).ravel()


def _check_size(x: np.ndarray, g: GramMatrix) -> np.ndarray:
    x = np.asarray(x)
    if x.shape != (g.size,):
        raise DimensionMismatch(f"vector of shape {x.shape} against a {g.size}-dof Gram matrix")
    return x


def discrete_inner(x: np.ndarray, y: np.ndarray, g: GramMatrix) -> complex:
    """⟨x, y⟩ = y* M x, evaluated as (m y)* (m x)"""
    x = _check_size(x, g)
    y = _check_size(y, g)
    value = np.vdot(g.apply_factor(y), g.apply_factor(x))
    return value if np.iscomplexobj(value) and value.imag != 0 else float(np.real(value))


def discrete_norm(x: np.ndarray, g: GramMatrix) -> float:
    """‖x‖ = ‖m x‖₂"""
    x = _check_size(x, g)
    return float(np.linalg.norm(g.apply_factor(x)))


def l2_error(proj: Projector, u: Field, points_per_axis: int = 5) -> float:
    """‖P u − u‖ in L²(G) by high-order per-cell Gauss quadrature"""
    grid = proj.grid
    phi, _, weights, xi = reference_element(grid.dim, points_per_axis)
    cells, origins = cell_connectivity(grid)
    nodal = proj.to_nodal(proj.decompose(u))
    points = origins[:, None, :] + xi[None, :, :] * np.array(grid.h)
    interpolant = np.einsum("qa,ca->cq", phi, nodal[cells])
    exact = np.asarray(u(*np.moveaxis(points, -1, 0)))
    exact = np.broadcast_to(exact, interpolant.shape)
    err2 = grid.cell_volume * np.sum(weights[None, :] * np.abs(interpolant - exact) ** 2)
    return float(math.sqrt(err2))


@dataclass
class OrderFit:
    """Least-squares fit of log-error against log-h"""
    order: float
    hs: List[float]
    errors: List[float]


def fit_order(hs: Sequence[float], errors: Sequence[float]) -> float:
    """Slope of log error vs log h; +inf when every error vanishes"""
    if len(hs) < 3:
        raise InsufficientSamples(f"need at least 3 spacings, got {len(hs)}")
    errors = np.asarray(errors, dtype=float)
    if np.max(errors) <= ZERO_ERROR:
        return math.inf
    errors = np.maximum(errors, ZERO_ERROR)
    slope = np.polyfit(np.log(np.asarray(hs, dtype=float)), np.log(errors), 1)[0]
    return float(slope)


def projection_order_estimate(family: Sequence[Projector], u: Field) -> OrderFit:
    """Fitted projection order μ_m of ‖P_h u − u‖ ≤ c h^μ"""
    if len(family) < 3:
        raise InsufficientSamples(f"need at least 3 projectors, got {len(family)}")
    hs = [proj.grid.h_min for proj in family]
    errors = [l2_error(proj, u) for proj in family]
    order = fit_order(hs, errors)
    logger.info(f"📐 Projection order μ_m ≈ {order:.4f} over h={hs}")
    return OrderFit(order=order, hs=hs, errors=errors)


def grid_document(proj: Projector) -> Dict:
    """JSON description of a projector's grid"""
    grid = proj.grid
    return {
        "dim": grid.dim,
        "bounds": [list(b) for b in grid.bounds],
        "h": list(grid.h),
        "bc": proj.bc,
        "dof_count": proj.dof_count,
    }
