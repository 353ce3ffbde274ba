#!/usr/bin/env python3
"""
Exactly factorizable discrete operators
Builds A[v] = a† W D(v) a on a hat projector, particular representations
q† B p of abstract operator actions, and the weighted operator norms used by
the certificates downstream.

Tensor callbacks handed to StateTensor must be reentrant: they are called
repeatedly with the same samples and must not keep hidden mutable state.
"""

import dataclasses
import logging
from dataclasses import dataclass
from typing import Callable, Dict, Optional, Sequence, Tuple, Union

import numpy as np
import scipy.sparse as sp
from scipy import linalg
from scipy.sparse import linalg as spla

from errors import ActionFailure, DimensionMismatch, NoConvergence, NonSPDTensor
from mesh_basis import (
    DENSE_LIMIT,
    Field,
    GramMatrix,
    OrderFit,
    Projector,
    assemble_gram,
    cell_connectivity,
    discrete_inner,
    discrete_norm,
    fit_order,
    reference_element,
)

logger = logging.getLogger(__name__)

POWER_TOL = 1e-10
POWER_MAX_ITER = 10_000
SPD_TOL = 1e-12


@dataclass(frozen=True)
class IdentityTensor:
    kind: str = "identity"

    def bound(self, r: float) -> float:
        return 1.0

    def lipschitz(self, r: float) -> float:
        return 0.0


@dataclass(frozen=True, eq=False)
class ConstantTensor:
    K: np.ndarray
    kind: str = "constant"

    def bound(self, r: float) -> float:
        return float(np.linalg.norm(self.K, 2))

    def lipschitz(self, r: float) -> float:
        return 0.0


@dataclass(frozen=True, eq=False)
class StateTensor:
    """D(v) sampled from the expanded field.

    callback maps field samples (ns,) to tensors (ns, dim, dim) or to scalars
    (ns,) meaning scalar·I. bound_model(r) is M_D and lipschitz_model(r) is
    c_D on the ball of radius r.
    """
    callback: Callable[[np.ndarray], np.ndarray]
    bound_model: Callable[[float], float]
    lipschitz_model: Callable[[float], float]
    degenerate_ok: bool = False
    kind: str = "state"

    def bound(self, r: float) -> float:
        return float(self.bound_model(r))

    def lipschitz(self, r: float) -> float:
        return float(self.lipschitz_model(r))


TensorModel = Union[IdentityTensor, ConstantTensor, StateTensor]


def scalar_tensor(coefficient: Callable[[np.ndarray], np.ndarray],
                  bound: Callable[[float], float],
                  lipschitz: Callable[[float], float],
                  degenerate_ok: bool = False) -> StateTensor:
    """State-dependent tensor coefficient(v)·I"""
    return StateTensor(callback=coefficient, bound_model=bound, lipschitz_model=lipschitz,
                       degenerate_ok=degenerate_ok)


@dataclass(frozen=True, eq=False)
class DiscreteOperator:
    """Matrix of a discrete operator with its domain and codomain Gram matrices.

    A form (is_form=True) holds S with 𝓐[x](y) = y* S x; its coefficient map is
    M⁻¹ S. Otherwise the matrix already acts on coefficient vectors.
    """
    matrix: Union[np.ndarray, sp.spmatrix]
    domain_gram: GramMatrix
    codomain_gram: GramMatrix
    label: str = ""
    is_form: bool = False

    def __post_init__(self):
        data = self.matrix.data if sp.issparse(self.matrix) else np.asarray(self.matrix)
        if not np.all(np.isfinite(data)):
            raise ValueError(f"operator {self.label!r} has non-finite entries")
        rows, cols = self.matrix.shape
        if cols != self.domain_gram.size or rows != self.codomain_gram.size:
            raise DimensionMismatch(
                f"operator {self.label!r} of shape {self.matrix.shape} against Grams "
                f"{self.domain_gram.size}/{self.codomain_gram.size}")

    @property
    def shape(self) -> Tuple[int, int]:
        return self.matrix.shape

    @property
    def is_square(self) -> bool:
        return self.shape[0] == self.shape[1]

    def dense(self) -> np.ndarray:
        return self.matrix.toarray() if sp.issparse(self.matrix) else np.asarray(self.matrix)

    def coefficient_map(self) -> np.ndarray:
        if self.is_form:
            return self.codomain_gram.solve(self.dense())
        return self.dense()

    def form_matrix(self) -> np.ndarray:
        if self.is_form:
            return self.dense()
        return self.codomain_gram.matrix @ self.dense()


@dataclass(frozen=True, eq=False)
class FactoredOperator:
    """A[v] = a† W D(v) a with a sampling basis gradients at quadrature points"""
    projector: Projector
    mass: GramMatrix
    a: sp.csr_matrix
    weights: np.ndarray
    values: sp.csr_matrix
    tensor: TensorModel
    inv_estimate: float
    mu_AI: float

    @property
    def dim(self) -> int:
        return self.projector.grid.dim

    @property
    def sample_count(self) -> int:
        return self.weights.size

    @property
    def W(self) -> sp.dia_matrix:
        return sp.diags(np.repeat(self.weights, self.dim))

    def with_tensor(self, tensor: TensorModel) -> "FactoredOperator":
        return dataclasses.replace(self, tensor=tensor)

    def sample_tensor(self, v: Optional[np.ndarray] = None) -> np.ndarray:
        ns, dim = self.sample_count, self.dim
        if isinstance(self.tensor, IdentityTensor):
            return np.broadcast_to(np.eye(dim), (ns, dim, dim))
        if isinstance(self.tensor, ConstantTensor):
            return np.broadcast_to(np.asarray(self.tensor.K, dtype=float), (ns, dim, dim))
        if v is None:
            raise ValueError("a state-dependent tensor needs the state v")
        samples = self.values @ np.asarray(v)
        tensors = np.asarray(self.tensor.callback(samples))
        if tensors.shape == (ns,):
            tensors = tensors[:, None, None] * np.eye(dim)
        if tensors.shape != (ns, dim, dim):
            raise DimensionMismatch(f"tensor callback returned shape {tensors.shape}")
        return tensors

    def action(self, v: np.ndarray) -> np.ndarray:
        """A(v) = [a† W D(v) a] v without assembling the matrix"""
        v = np.asarray(v)
        grads = self.a @ v
        if not isinstance(self.tensor, IdentityTensor):
            tensors = self.sample_tensor(v)
            grads = np.einsum("sij,sj->si", tensors, grads.reshape(self.sample_count, self.dim)).ravel()
        return self.a.T @ (np.repeat(self.weights, self.dim) * grads)


def _largest_generalized_eigenvalue(S: sp.spmatrix, M: sp.spmatrix) -> float:
    if S.shape[0] <= DENSE_LIMIT:
        return float(linalg.eigh(S.toarray(), M.toarray(), eigvals_only=True)[-1])
    return float(spla.eigsh(S, k=1, M=M, which="LA", return_eigenvectors=False, tol=1e-12)[0])


def build_difference_factor(proj: Projector, mass: Optional[GramMatrix] = None,
                            points_per_axis: Optional[int] = None) -> FactoredOperator:
    """Gradient factor a at per-cell Gauss points, D = Identity.

    One midpoint sample per cell in 1D, 2^dim Gauss points otherwise, so
    aᵀWa is the exact hat-function stiffness matrix of −Δ.
    """
    grid = proj.grid
    dim = grid.dim
    if points_per_axis is None:
        points_per_axis = 1 if dim == 1 else 2
    mass = mass or assemble_gram(proj)

    phi, dphi, qweights, _ = reference_element(dim, points_per_axis)
    cells, _ = cell_connectivity(grid)
    ncells, nloc = cells.shape
    nq = qweights.size
    ns = ncells * nq
    h = np.array(grid.h)

    sample = (np.arange(ncells)[:, None] * nq + np.arange(nq)[None, :])
    grad_rows = (sample[:, :, None, None] * dim + np.arange(dim)[None, None, None, :])
    grad_rows = np.broadcast_to(grad_rows, (ncells, nq, nloc, dim))
    grad_cols = np.broadcast_to(cells[:, None, :, None], (ncells, nq, nloc, dim))
    grad_data = np.broadcast_to((dphi / h)[None], (ncells, nq, nloc, dim))
    a_full = sp.coo_matrix((grad_data.ravel(), (grad_rows.ravel(), grad_cols.ravel())),
                           shape=(ns * dim, grid.node_count)).tocsr()

    val_rows = np.broadcast_to(sample[:, :, None], (ncells, nq, nloc))
    val_cols = np.broadcast_to(cells[:, None, :], (ncells, nq, nloc))
    val_data = np.broadcast_to(phi[None], (ncells, nq, nloc))
    values_full = sp.coo_matrix((val_data.ravel(), (val_rows.ravel(), val_cols.ravel())),
                                shape=(ns, grid.node_count)).tocsr()

    a = a_full[:, proj.dof_indices].tocsr()
    values = values_full[:, proj.dof_indices].tocsr()
    weights = np.tile(qweights, ncells) * grid.cell_volume
    weights.setflags(write=False)

    stiffness = (a.T @ sp.diags(np.repeat(weights, dim)) @ a).tocsr()
    mu_AI = _largest_generalized_eigenvalue(stiffness, mass.matrix)
    inv_estimate = mu_AI * grid.h_min ** 2
    logger.info(f"📐 Difference factor: {ns} samples, K_a={inv_estimate:.6g}, μ(A[I])={mu_AI:.6g}")
    return FactoredOperator(projector=proj, mass=mass, a=a, weights=weights, values=values,
                            tensor=IdentityTensor(), inv_estimate=inv_estimate, mu_AI=mu_AI)


def check_tensor_samples(tensors: np.ndarray, degenerate_ok: bool = False) -> float:
    """Smallest eigenvalue over all sampled tensors; raises NonSPDTensor"""
    sym = 0.5 * (tensors + np.swapaxes(tensors, -1, -2))
    lowest = float(np.min(np.linalg.eigvalsh(sym))) if tensors.size else 1.0
    scale = max(1.0, float(np.max(np.abs(tensors)))) if tensors.size else 1.0
    if lowest < -SPD_TOL * scale or (lowest <= 0.0 and not degenerate_ok):
        raise NonSPDTensor(f"sampled diffusion tensor has eigenvalue {lowest:.3e}")
    return lowest


def assemble_operator(fo: FactoredOperator, v: Optional[np.ndarray] = None) -> DiscreteOperator:
    """Stiffness form S[v] = aᵀ W D(v) a"""
    if isinstance(fo.tensor, StateTensor) and v is None:
        raise ValueError("assemble_operator needs v for a state-dependent tensor")
    dim, ns = fo.dim, fo.sample_count
    W = fo.W
    if isinstance(fo.tensor, IdentityTensor):
        S = fo.a.T @ W @ fo.a
    else:
        tensors = np.ascontiguousarray(fo.sample_tensor(v), dtype=float)
        check_tensor_samples(tensors, getattr(fo.tensor, "degenerate_ok", False))
        D = sp.bsr_matrix((tensors, np.arange(ns), np.arange(ns + 1)), shape=(ns * dim, ns * dim))
        S = fo.a.T @ (W @ D) @ fo.a
    label = f"stiffness[{fo.tensor.kind}]"
    return DiscreteOperator(matrix=sp.csr_matrix(S), domain_gram=fo.mass, codomain_gram=fo.mass,
                            label=label, is_form=True)


def as_operator(form: DiscreteOperator, label: Optional[str] = None) -> DiscreteOperator:
    """Coefficient map M⁻¹S of a form (the particular representation of A)"""
    return DiscreteOperator(matrix=form.coefficient_map(), domain_gram=form.domain_gram,
                            codomain_gram=form.codomain_gram,
                            label=label or f"rep[{form.label}]", is_form=False)


def particular_representation(op_action: Callable[[Field], Field], projX: Projector, projY: Projector,
                              gramX: Optional[GramMatrix] = None, gramY: Optional[GramMatrix] = None,
                              label: str = "particular") -> DiscreteOperator:
    """B_h = q† B p, column j = projY.decompose(op_action(projX.expand(e_j)))"""
    gramX = gramX or assemble_gram(projX)
    gramY = gramY or (gramX if projY is projX else assemble_gram(projY))
    columns = []
    for j in range(projX.dof_count):
        try:
            columns.append(projY.decompose(op_action(projX.basis_function(j))))
        except Exception as e:
            raise ActionFailure(f"operator action failed on column {j}: {e}", column=j) from e
    matrix = np.column_stack(columns) if columns else np.zeros((projY.dof_count, 0))
    return DiscreteOperator(matrix=matrix, domain_gram=gramX, codomain_gram=gramY, label=label)


def weighted_matrix(B: DiscreteOperator) -> np.ndarray:
    """m_Y B m_X⁻¹ for the coefficient map of B"""
    inverse_factor = B.domain_gram.solve_factor(np.eye(B.domain_gram.size))
    return B.codomain_gram.apply_factor(B.coefficient_map() @ inverse_factor)


def operator_norm(B: DiscreteOperator, tol: float = POWER_TOL, max_iter: int = POWER_MAX_ITER) -> float:
    """‖B‖ = ‖m_Y B m_X⁻¹‖₂ by power iteration from the normalized all-ones vector"""
    C = weighted_matrix(B)
    n = C.shape[1]
    if n == 0:
        return 0.0
    x = np.ones(n) / np.sqrt(n)
    sigma = 0.0
    for iteration in range(1, max_iter + 1):
        y = C @ x
        estimate = float(np.linalg.norm(y))
        if estimate == 0.0:
            return 0.0
        z = C.conj().T @ y
        norm_z = np.linalg.norm(z)
        if norm_z == 0.0:
            return estimate
        x = z / norm_z
        if abs(estimate - sigma) <= tol * estimate:
            logger.debug(f"🔁 Power iteration converged in {iteration} steps: ‖B‖={estimate:.12g}")
            return estimate
        sigma = estimate
    raise NoConvergence(f"power iteration did not converge in {max_iter} steps", best_estimate=sigma)


def gershgorin_bound(B: DiscreteOperator) -> float:
    """Row-sum bound ‖m B m⁻¹‖_∞ for a square operator on one space"""
    if not B.is_square or B.domain_gram.size != B.codomain_gram.size:
        raise DimensionMismatch(f"Gershgorin bound needs a square operator, got {B.shape}")
    C = weighted_matrix(B)
    return float(np.max(np.sum(np.abs(C), axis=1))) if C.size else 0.0


def sesquilinear_eval(B: DiscreteOperator, x: np.ndarray, y: np.ndarray) -> complex:
    """𝓐[x](y) = ⟨B x, y⟩ in the codomain inner product"""
    x = np.asarray(x)
    if x.shape != (B.shape[1],):
        raise DimensionMismatch(f"vector of shape {x.shape} for operator of shape {B.shape}")
    return discrete_inner(B.coefficient_map() @ x, y, B.codomain_gram)


@dataclass
class CoercivityReport:
    epsilon: float
    sampled_min: float
    samples: int


def coercivity_estimate(B: DiscreteOperator, samples: int = 64, seed: int = 0) -> CoercivityReport:
    """Numeric ε of |𝓐[x](x)| ≥ ε‖x‖² over random unit vectors and the extremal eigenvector"""
    C = weighted_matrix(B)
    H = 0.5 * (C + C.conj().T)
    epsilon = float(np.linalg.eigvalsh(H)[0])
    rng = np.random.default_rng(seed)
    sampled = np.inf
    for _ in range(samples):
        y = rng.standard_normal(C.shape[1])
        y /= np.linalg.norm(y)
        sampled = min(sampled, float(np.real(np.vdot(y, C @ y))))
    return CoercivityReport(epsilon=min(epsilon, sampled), sampled_min=sampled, samples=samples)


def approximation_order_estimate(family: Sequence[Tuple[Projector, DiscreteOperator]],
                                 reference_action: Callable[[Field], Field], u: Field) -> OrderFit:
    """Fitted ν_m of ‖B_h p†u − q†(B u)‖ ≤ c h^ν in the codomain norm"""
    hs, errors = [], []
    for proj, B in family:
        x = proj.decompose(u)
        target = proj.decompose(reference_action(u))
        errors.append(discrete_norm(B.coefficient_map() @ x - target, B.codomain_gram))
        hs.append(proj.grid.h_min)
    order = fit_order(hs, errors)
    logger.info(f"📐 Representation order ν_m ≈ {order:.4f} over h={hs}")
    return OrderFit(order=order, hs=hs, errors=errors)


def symmetry_residual(matrix: Union[np.ndarray, sp.spmatrix]) -> float:
    """‖S − Sᵀ‖_∞ / ‖S‖_∞"""
    if sp.issparse(matrix):
        scale = spla.norm(matrix, np.inf)
        diff = spla.norm(matrix - matrix.T, np.inf)
    else:
        scale = np.linalg.norm(matrix, np.inf)
        diff = np.linalg.norm(matrix - matrix.T, np.inf)
    return float(diff / scale) if scale else 0.0


def operator_header(B: DiscreteOperator) -> Dict:
    return {
        "rows": B.shape[0],
        "cols": B.shape[1],
        "label": B.label,
        "gram_ids": [B.domain_gram.label, B.codomain_gram.label],
    }
