#!/usr/bin/env python3
"""
Spectral studies of discrete operators
Eigenvalue bracketing of S x = λ M x, norm convergence along refinement
families, h-stability and dissipativity checks.
"""

import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import scipy.sparse as sp
from scipy import linalg
from scipy.sparse import linalg as spla

from errors import EigensolveFailure, InconsistentFamily, NotSymmetric
from mesh_basis import GramMatrix, extremal_eigenvalues
from operator_factory import DiscreteOperator, symmetry_residual, weighted_matrix

logger = logging.getLogger(__name__)

BRACKET_TOL = 1e-8
SYMMETRY_TOL = 1e-12
MONOTONE_SLACK = 1e-10
STABILITY_THRESHOLD = 1e12
DISSIPATIVE_TOL = 1e-10


@dataclass
class SpectralReport:
    """Extremal generalized eigenvalues of one discrete operator"""
    h: float
    lambda_min: float
    lambda_max: float
    norm_A: float
    norm_Ainv: float
    bracket_lo: Optional[float] = None
    bracket_hi: Optional[float] = None
    bracketing_ok: Optional[bool] = None
    stability_ok: bool = True

    def to_dict(self) -> Dict:
        return asdict(self)


def _form_of(S: DiscreteOperator) -> sp.csr_matrix:
    return sp.csr_matrix(S.matrix if S.is_form else S.form_matrix())


def spectral_bracketing(S: DiscreteOperator, mass: GramMatrix,
                        bracket: Optional[Tuple[float, float]] = None, h: float = math.nan,
                        stability_threshold: float = STABILITY_THRESHOLD) -> SpectralReport:
    """Check m ≤ λ_min(A_h) ≤ λ_max(A_h) ≤ M for the pair (S, mass)"""
    form = _form_of(S)
    residual = symmetry_residual(form)
    if residual > SYMMETRY_TOL:
        raise NotSymmetric(f"{S.label}: symmetry residual {residual:.3e}")

    try:
        lo, hi = extremal_eigenvalues(form, mass.matrix)
    except (linalg.LinAlgError, spla.ArpackNoConvergence, spla.ArpackError) as e:
        raise EigensolveFailure(f"{S.label}: generalized eigensolve failed: {e}") from e

    norm_Ainv = 1.0 / lo if lo > 0 else math.inf
    report = SpectralReport(h=h, lambda_min=lo, lambda_max=hi, norm_A=max(abs(lo), abs(hi)),
                            norm_Ainv=norm_Ainv,
                            stability_ok=bool(lo > 0 and norm_Ainv < stability_threshold))
    if bracket is not None:
        m, M = bracket
        report.bracket_lo, report.bracket_hi = m, M
        report.bracketing_ok = bool(m - BRACKET_TOL <= lo and hi <= M + BRACKET_TOL)
        if not report.bracketing_ok:
            logger.warning(f"⚠️ Bracketing failed at h={h:g}: [{lo:.6g}, {hi:.6g}] vs [{m:.6g}, {M:.6g}]")
    logger.info(f"✅ Spectrum h={h:g}: λ_min={lo:.10g}, λ_max={hi:.6g}")
    return report


@dataclass
class NormStudy:
    rows: List[SpectralReport]
    inverse_monotone: bool
    lambda_min_monotone: bool
    lambda_max_monotone: bool
    extrapolated_lambda_min: float
    extrapolated_norm_Ainv: float
    order: float


def richardson(coarse: float, fine: float, ratio: float, order: float) -> float:
    factor = ratio ** order
    return (factor * fine - coarse) / (factor - 1.0)


def norm_convergence_study(family: Sequence[Tuple[float, DiscreteOperator, GramMatrix]],
                           order: float = 2.0,
                           bracket: Optional[Tuple[float, float]] = None) -> NormStudy:
    """Norms of A_h and A_h⁻¹ along a refinement family, coarse to fine"""
    if len(family) < 2:
        raise InconsistentFamily(f"need at least 2 family members, got {len(family)}")
    hs = [h for h, _, _ in family]
    if len(set(hs)) != len(hs):
        raise InconsistentFamily(f"duplicate spacings in family: {hs}")
    for h, S, mass in family:
        if S.shape[0] != mass.size or h <= 0:
            raise InconsistentFamily(f"member h={h} has operator {S.shape} and Gram {mass.size}")

    ordered = sorted(family, key=lambda item: -item[0])
    rows = [spectral_bracketing(S, mass, bracket=bracket, h=h) for h, S, mass in ordered]

    lam_min = [r.lambda_min for r in rows]
    lam_max = [r.lambda_max for r in rows]
    inverse = [r.norm_Ainv for r in rows]
    lambda_min_monotone = all(b <= a + MONOTONE_SLACK * abs(a) for a, b in zip(lam_min, lam_min[1:]))
    lambda_max_monotone = all(b >= a - MONOTONE_SLACK * abs(a) for a, b in zip(lam_max, lam_max[1:]))
    inverse_monotone = all(b >= a - MONOTONE_SLACK * abs(a) for a, b in zip(inverse, inverse[1:]))

    (h_coarse, _, _), (h_fine, _, _) = ordered[-2], ordered[-1]
    limit = richardson(lam_min[-2], lam_min[-1], h_coarse / h_fine, order)
    study = NormStudy(rows=rows, inverse_monotone=inverse_monotone,
                      lambda_min_monotone=lambda_min_monotone,
                      lambda_max_monotone=lambda_max_monotone,
                      extrapolated_lambda_min=limit,
                      extrapolated_norm_Ainv=1.0 / limit if limit > 0 else math.inf,
                      order=order)
    logger.info(f"✅ Norm study over {len(rows)} spacings: λ_min → {limit:.10g}, "
                f"monotone={inverse_monotone}")
    return study


@dataclass
class StabilityReport:
    stable: bool
    sup_inv_norm: float
    inv_norms: List[Tuple[float, float]] = field(default_factory=list)


def inverse_norm(B: DiscreteOperator) -> float:
    """Weighted ‖B⁻¹‖ = 1/σ_min(m B m⁻¹); ∞ for singular B"""
    C = weighted_matrix(B)
    if C.size == 0:
        return math.inf
    sigma = linalg.svdvals(C)
    smallest, largest = float(sigma[-1]), float(sigma[0])
    if largest == 0.0 or smallest <= np.finfo(float).eps * largest * max(C.shape):
        return math.inf
    return 1.0 / smallest


def h_stability_check(family: Sequence[Tuple[float, DiscreteOperator]],
                      threshold: float = STABILITY_THRESHOLD) -> StabilityReport:
    """h-stable iff every ‖A_h⁻¹‖ is finite and the supremum stays below threshold"""
    norms = []
    for h, B in sorted(family, key=lambda item: -item[0]):
        if not B.is_square:
            raise InconsistentFamily(f"operator at h={h} is not square: {B.shape}")
        norms.append((h, inverse_norm(B)))
    sup = max((n for _, n in norms), default=math.inf)
    stable = bool(math.isfinite(sup) and sup < threshold)
    if stable:
        logger.info(f"✅ h-stable family, sup ‖A_h⁻¹‖ = {sup:.6g}")
    else:
        logger.warning(f"⚠️ Family is not h-stable, sup ‖A_h⁻¹‖ = {sup}")
    return StabilityReport(stable=stable, sup_inv_norm=sup, inv_norms=norms)


@dataclass
class DissipativityReport:
    dissipative: bool
    max_re: float


def dissipativity_check(B: DiscreteOperator, samples: int = 64, seed: int = 0) -> DissipativityReport:
    """max Re⟨Bx, x⟩ over random unit vectors and the extremal eigenvector"""
    C = weighted_matrix(B)
    H = 0.5 * (C + C.conj().T)
    max_re = float(np.linalg.eigvalsh(H)[-1]) if H.size else 0.0
    rng = np.random.default_rng(seed)
    for _ in range(samples):
        y = rng.standard_normal(C.shape[1])
        y /= np.linalg.norm(y)
        max_re = max(max_re, float(np.real(np.vdot(y, C @ y))))
    return DissipativityReport(dissipative=bool(max_re <= DISSIPATIVE_TOL), max_re=max_re)


@dataclass
class PoincareEstimate:
    poincare_constant: float
    coercivity: float


def poincare_estimate(S: DiscreteOperator, mass: GramMatrix) -> PoincareEstimate:
    """c(G) ≈ λ_min^{-1/2} and the H¹ coercivity constant (1 + c(G)²)⁻¹"""
    report = spectral_bracketing(S, mass)
    c = 1.0 / math.sqrt(report.lambda_min)
    return PoincareEstimate(poincare_constant=c, coercivity=1.0 / (1.0 + c * c))


SPECTRAL_CSV_HEADER = ["h", "lambda_min", "lambda_max", "norm_A", "norm_Ainv", "bracketing_ok", "stable"]


def report_row(report: SpectralReport) -> List:
    return [report.h, report.lambda_min, report.lambda_max, report.norm_A, report.norm_Ainv,
            report.bracketing_ok, report.stability_ok]
