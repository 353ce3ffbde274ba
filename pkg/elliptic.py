#!/usr/bin/env python3
"""
Semilinear elliptic solver
Discrete Green operator of S u = M f and the contraction iteration
u_{k+1} = G f(u_k) for −Δu = f(u) with homogeneous Dirichlet data, together
with its a-priori error bound and ball-confinement certificate.
"""

import logging
import math
import threading
import weakref
from dataclasses import dataclass, field
from functools import cached_property
from typing import Callable, Dict, Optional, Sequence, Tuple

import numpy as np
import scipy.sparse as sp
from scipy import linalg

from contraction import ContractionReport, fixed_point_iterate
from errors import (
    BallEscape,
    ContractionConditionViolated,
    DimensionMismatch,
    InvalidConstants,
    SingularOperator,
)
from mesh_basis import GramMatrix, OrderFit, Projector, banded_cholesky, discrete_norm, fit_order
from operator_factory import DiscreteOperator, FactoredOperator, assemble_operator, symmetry_residual

logger = logging.getLogger(__name__)

GREEN_RTOL = 1e-10
SYMMETRY_TOL = 1e-12
BALL_RTOL = 1e-12
DEFAULT_TOL = 1e-11
DEFAULT_MAX_ITER = 200

Nonlinearity = Callable[[np.ndarray], np.ndarray]
ConstantModel = Callable[[float], float]

# stiffness operator -> lower band of its Cholesky factor; entries die with the operator
_green_factors: "weakref.WeakKeyDictionary[DiscreteOperator, np.ndarray]" = weakref.WeakKeyDictionary()
_green_lock = threading.Lock()


@dataclass
class SemilinearProblem:
    """−Δu = f(u) on G, u = 0 on ∂G, discretized as S u = M f(u).

    f acts nodally on coefficient vectors. c_f(r) and M_f(r) are its Lipschitz
    constant and sup bound on the nodal ball of radius r; m is the coercivity
    constant of S against M.
    """
    fo: FactoredOperator
    mass: GramMatrix
    f: Nonlinearity
    c_f: ConstantModel
    M_f: ConstantModel
    r: float
    m: float
    name: str = "semilinear"
    m_source: str = "analytic"
    metadata: Dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.r > 0:
            raise InvalidConstants(f"ball radius must be positive, got {self.r}")
        if not self.m > 0:
            raise InvalidConstants(f"coercivity constant must be positive, got {self.m}")
        for label, value in (("c_f", self.c_f(self.r)), ("M_f", self.M_f(self.r))):
            if not (math.isfinite(value) and value >= 0):
                raise InvalidConstants(f"{label}({self.r}) = {value} must be finite and nonnegative")

    @cached_property
    def stiffness(self) -> DiscreteOperator:
        return assemble_operator(self.fo)

    @property
    def contraction_ratio(self) -> float:
        return self.c_f(self.r) / self.m


def _form(S: DiscreteOperator) -> sp.csr_matrix:
    return sp.csr_matrix(S.matrix if S.is_form else S.form_matrix())


def _green_factor(S: DiscreteOperator) -> np.ndarray:
    with _green_lock:
        band = _green_factors.get(S)
    if band is not None:
        return band

    form = _form(S)
    if symmetry_residual(form) > SYMMETRY_TOL:
        raise SingularOperator(f"{S.label}: stiffness is not symmetric")
    try:
        band = banded_cholesky(form)
    except linalg.LinAlgError as e:
        raise SingularOperator(f"{S.label}: stiffness is not positive definite ({e})") from e
    if np.any(band[0] <= 0):
        raise SingularOperator(f"{S.label}: nonpositive pivot in stiffness factorization")

    with _green_lock:
        _green_factors[S] = band
    logger.debug(f"📐 Green factor cached for {S.label} ({form.shape[0]} dofs, band {band.shape[0]})")
    return band


def clear_green_cache() -> None:
    with _green_lock:
        _green_factors.clear()


def green_apply(S: DiscreteOperator, mass: GramMatrix, f_coeffs: np.ndarray) -> np.ndarray:
    """Discrete Green operator: the solution u of S u = M f"""
    f_coeffs = np.asarray(f_coeffs)
    if f_coeffs.shape != (mass.size,) or S.shape != (mass.size, mass.size):
        raise DimensionMismatch(
            f"Green solve with operator {S.shape}, Gram {mass.size} and data {f_coeffs.shape}")
    band = _green_factor(S)
    rhs = mass.matrix @ f_coeffs

    def solve(b):
        return linalg.cho_solve_banded((band, True), b)

    u = solve(rhs.real) + 1j * solve(rhs.imag) if np.iscomplexobj(rhs) else solve(rhs.astype(float))

    rhs_norm = float(np.linalg.norm(rhs))
    residual = float(np.linalg.norm(_form(S) @ u - rhs))
    if residual > GREEN_RTOL * max(rhs_norm, np.finfo(float).tiny) and residual > 0.0:
        raise SingularOperator(f"{S.label}: Green solve residual {residual:.3e} against ‖M f‖={rhs_norm:.3e}")
    return u


def _ball_monitor(r: float, peaks: list) -> Callable[[int, np.ndarray], None]:
    def confine(k: int, u: np.ndarray) -> None:
        peak = float(np.max(np.abs(u))) if u.size else 0.0
        peaks.append(peak)
        if peak > r * (1.0 + BALL_RTOL):
            raise BallEscape(f"iterate {k} left the ball: ‖u‖∞={peak:.6g} > r={r:g}", index=k, norm=peak)
    return confine


def semilinear_solve(p: SemilinearProblem, u0: Optional[np.ndarray] = None,
                     tol: float = DEFAULT_TOL, max_iter: int = DEFAULT_MAX_ITER
                     ) -> Tuple[np.ndarray, ContractionReport, Dict]:
    """Contraction iteration u_{k+1} = G f(u_k) with K = c_f(r)/m.

    Returns the fixed point, the contraction report (increments in the mass
    norm) and a certificate dict.
    """
    c_f = p.c_f(p.r)
    if c_f >= p.m:
        raise ContractionConditionViolated(
            f"{p.name}: c_f(r)={c_f:.6g} ≥ m={p.m:.6g} at r={p.r:g}, choose a smaller radius")
    K = c_f / p.m

    u0 = np.zeros(p.mass.size) if u0 is None else np.asarray(u0, dtype=float)
    start_peak = float(np.max(np.abs(u0))) if u0.size else 0.0
    if start_peak > p.r * (1.0 + BALL_RTOL):
        raise BallEscape(f"start vector outside the ball: ‖u0‖∞={start_peak:.6g} > r={p.r:g}",
                         index=0, norm=start_peak)

    S = p.stiffness
    peaks = [start_peak]
    u, report = fixed_point_iterate(lambda v: green_apply(S, p.mass, p.f(v)), u0,
                                    norm=lambda x: discrete_norm(x, p.mass),
                                    K_hint=K, tol=tol, max_iter=max_iter,
                                    monitor=_ball_monitor(p.r, peaks))

    defect = _form(S) @ u - p.mass.matrix @ p.f(u)
    residual = discrete_norm(p.mass.solve(defect), p.mass)
    certificate = {
        "K": K,
        "c_f": c_f,
        "m": p.m,
        "m_source": p.m_source,
        "r": p.r,
        "M_f": p.M_f(p.r),
        "converged": report.converged,
        "residual": residual,
        "residual_ok": bool(residual <= 10.0 * tol),
        "ball_ok": bool(max(peaks) <= p.r * (1.0 + BALL_RTOL)),
        "max_iterate_norm_inf": max(peaks),
        "bounds_dominate": report.bounds_dominate,
        "max_observed_ratio": max(report.increment_ratios, default=0.0),
    }
    certificate["ok"] = bool(certificate["converged"] and certificate["residual_ok"]
                             and certificate["ball_ok"] and certificate["bounds_dominate"])
    if certificate["ok"]:
        logger.info(f"✅ {p.name}: solved in {report.iterations} iterations, residual {residual:.3e}")
    else:
        logger.warning(f"⚠️ {p.name}: certificate failed {certificate}")
    return u, report, certificate


def elliptic_apriori_bound(p: SemilinearProblem, k: int, h: float, norm_Ah: float, c_u: float,
                           nu: float = 2.0, mu_G: Optional[float] = None) -> float:
    """c_u h^ν + (c_f/m)^k (m − c_f)⁻¹ (r ‖A_h‖ + M_f) μ(G)

    μ(G) defaults to ‖1‖ in the problem's Gram norm.
    """
    c_f, M_f = p.c_f(p.r), p.M_f(p.r)
    if c_f >= p.m:
        raise InvalidConstants(f"c_f(r)={c_f:.6g} must be below m={p.m:.6g}")
    if k < 0 or h <= 0 or norm_Ah < 0 or c_u < 0:
        raise InvalidConstants(f"invalid bound inputs k={k}, h={h}, ‖A_h‖={norm_Ah}, c_u={c_u}")
    mu = p.mass.space_volume if mu_G is None else mu_G
    K = c_f / p.m
    return c_u * h ** nu + K ** k / (p.m - c_f) * (p.r * norm_Ah + M_f) * mu


def restrict_to_coarse(coarse: Projector, fine: Projector, u_fine: np.ndarray) -> np.ndarray:
    """Fine solution sampled at the coarse dof nodes"""
    return coarse.decompose(fine.expand(u_fine))


def self_convergence_order(solutions: Sequence[Tuple[Projector, np.ndarray]],
                           reference: Tuple[Projector, np.ndarray]) -> OrderFit:
    """Order of max-norm errors at shared nodes against a fine-grid solution"""
    ref_proj, ref_u = reference
    hs, errors = [], []
    for proj, u in solutions:
        target = restrict_to_coarse(proj, ref_proj, ref_u)
        errors.append(float(np.max(np.abs(u - target))) if u.size else 0.0)
        hs.append(proj.grid.h_min)
    order = fit_order(hs, errors)
    logger.info(f"📐 Mesh self-convergence order ≈ {order:.4f} over h={hs}")
    return OrderFit(order=order, hs=hs, errors=errors)
