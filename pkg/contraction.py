#!/usr/bin/env python3
"""
Strict-contraction fixed-point engine
Iterates x_{k+1} = T(x_k) and keeps the geometric a-priori bookkeeping
‖x* − x_m‖ ≤ K^m (1−K)⁻¹ ‖x₁ − x₀‖ used by the elliptic and evolution solvers.
"""

import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Dict, List, Optional, Tuple

import numpy as np

from errors import DivergenceDetected, InvalidRatio

logger = logging.getLogger(__name__)

DIVERGENCE_RATIO = 1.0 + 1e-6
DIVERGENCE_STREAK = 3
DOMINANCE_SLACK = 1e-12

Norm = Callable[[np.ndarray], float]


def euclidean_norm(x: np.ndarray) -> float:
    return float(np.linalg.norm(np.ravel(x)))


@dataclass
class ContractionReport:
    """Bookkeeping of one fixed-point run.

    K_source is "supplied" when K came from an analytic Lipschitz constant and
    "estimated" when it is the largest observed increment ratio; the a-priori
    guarantee only holds for supplied constants.
    """
    K: float
    K_source: str
    iterations: int
    increment_norms: List[float]
    apriori_bounds: List[float]
    converged: bool
    final_residual: float
    errors_to_final: List[float] = field(default_factory=list)

    @property
    def increment_ratios(self) -> List[float]:
        d = self.increment_norms
        return [b / a for a, b in zip(d, d[1:]) if a > 0]

    @property
    def bounds_dominate(self) -> bool:
        return all(err <= bound + DOMINANCE_SLACK
                   for err, bound in zip(self.errors_to_final, self.apriori_bounds))

    def to_dict(self) -> Dict:
        payload = asdict(self)
        payload["bounds_dominate"] = self.bounds_dominate
        return payload

    def csv_rows(self) -> List[Tuple[int, float, float]]:
        return [(m, inc, bound) for m, (inc, bound)
                in enumerate(zip(self.increment_norms, self.apriori_bounds))]


def contraction_error_bound(K: float, m: int, first_increment: float) -> float:
    """K^m (1−K)⁻¹ ‖x₁ − x₀‖"""
    if not 0.0 <= K < 1.0:
        raise InvalidRatio(f"contraction ratio must satisfy 0 ≤ K < 1, got {K}")
    if m < 0:
        raise ValueError(f"iteration index must be nonnegative, got {m}")
    return K ** m / (1.0 - K) * first_increment


def fixed_point_iterate(T: Callable[[np.ndarray], np.ndarray], x0: np.ndarray,
                        norm: Optional[Norm] = None, K_hint: Optional[float] = None,
                        tol: float = 1e-10, max_iter: int = 500,
                        monitor: Optional[Callable[[int, np.ndarray], None]] = None
                        ) -> Tuple[np.ndarray, ContractionReport]:
    """Picard iteration of a strict contraction with a relative stopping rule.

    monitor(k, x_k) is called on every new iterate and may raise to halt the
    run (the elliptic solver uses it for ball confinement).
    """
    if tol <= 0:
        raise ValueError(f"tolerance must be positive, got {tol}")
    if K_hint is not None and not 0.0 <= K_hint < 1.0:
        raise InvalidRatio(f"K_hint must satisfy 0 ≤ K < 1, got {K_hint}")
    norm = norm or euclidean_norm

    x = np.array(x0, copy=True)
    iterates = [x]
    increments: List[float] = []
    streak = 0
    converged = False

    for k in range(1, max_iter + 1):
        x_next = np.asarray(T(x))
        if monitor is not None:
            monitor(k, x_next)
        d = norm(x_next - x)
        increments.append(d)
        iterates.append(x_next)
        logger.debug(f"🔁 iterate {k}: ‖Δx‖={d:.6e}")

        if len(increments) > 1 and increments[-2] > 0:
            streak = streak + 1 if d / increments[-2] > DIVERGENCE_RATIO else 0
            if streak >= DIVERGENCE_STREAK:
                raise DivergenceDetected(
                    f"increment ratio above 1 for {DIVERGENCE_STREAK} consecutive iterations at k={k}")

        stop = d <= tol * max(1.0, norm(x))
        x = x_next
        if stop:
            converged = True
            break

    ratios = [b / a for a, b in zip(increments, increments[1:]) if a > 0]
    if K_hint is not None:
        K, source = K_hint, "supplied"
    else:
        K, source = (max(ratios) if ratios else 0.0), "estimated"

    first = increments[0] if increments else 0.0
    if K < 1.0:
        bounds = [contraction_error_bound(K, m, first) for m in range(len(iterates))]
    else:
        bounds = [math.inf] * len(iterates)
    errors = [norm(x - xm) for xm in iterates]

    report = ContractionReport(K=K, K_source=source, iterations=len(increments),
                               increment_norms=increments, apriori_bounds=bounds,
                               converged=converged,
                               final_residual=increments[-1] if increments else 0.0,
                               errors_to_final=errors)
    if converged:
        logger.info(f"✅ Fixed point reached in {report.iterations} iterations (K={K:.4g}, {source})")
    else:
        logger.warning(f"⚠️ No convergence after {max_iter} iterations, last increment {report.final_residual:.3e}")
    return x, report
