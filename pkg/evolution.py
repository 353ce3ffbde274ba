#!/usr/bin/env python3
"""
Nonlinear evolution solver
Local solutions of u' = scale·(−M⁻¹S[u]u + f(u)) by Picard successive
approximation with Simpson quadrature, the discrete time-integration
semigroup built from it, the existence interval δ with its Lipschitz
bookkeeping, and a matrix-exponential reference semigroup for checking.

Nodal nonlinearities are coupled through the lumped mass, so for a real
symmetric S and scale = i the semi-discrete system conserves ‖u‖_M.
"""

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy import integrate, linalg

from errors import (
    BallEscape,
    CertificateFailure,
    DegenerateProblem,
    DimensionMismatch,
    IndexOutOfWindow,
    MissingConstants,
    NotContractive,
    SeriesOverflow,
    WindowExceedsDelta,
)
from mesh_basis import GramMatrix, discrete_norm, lumped_mass
from operator_factory import (
    ConstantTensor,
    DiscreteOperator,
    FactoredOperator,
    IdentityTensor,
    StateTensor,
    assemble_operator,
    weighted_matrix,
)

logger = logging.getLogger(__name__)

DEFAULT_SAFETY = 0.9
BALL_RTOL = 1e-12
WINDOW_RTOL = 1e-12
SERIES_NORM_BUDGET = 1e6
DECAY_SLACK = 1e-8
COMPOSITION_TOL = 1e-10
SYMMETRY_TOL = 1e-10
SIMPSON_BUDGET = 1.0

Nonlinearity = Callable[[np.ndarray], np.ndarray]
ConstantModel = Callable[[float], float]


def _zero(r: float) -> float:
    return 0.0


@dataclass
class EvolutionProblem:
    """u' = scale·(A(u) + f(u)) with A(v) = −M⁻¹ a†W D(v) a v.

    fo=None means A = 0; mass=None means coefficient vectors carry the
    Euclidean norm (scalar surrogates).
    """
    fo: Optional[FactoredOperator] = None
    mass: Optional[GramMatrix] = None
    f: Optional[Nonlinearity] = None
    c_f: Optional[ConstantModel] = _zero
    M_f: Optional[ConstantModel] = _zero
    r: float = 1.0
    scale: complex = 1.0
    name: str = "evolution"
    metadata: Dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.r > 0:
            raise DegenerateProblem(f"ball radius must be positive, got {self.r}")
        if self.scale == 0:
            raise DegenerateProblem("scale factor must be nonzero")
        if self.mass is None and self.fo is not None:
            self.mass = self.fo.mass

    @property
    def is_complex(self) -> bool:
        return bool(np.iscomplexobj(np.asarray(self.scale)))

    def norm(self, x: np.ndarray) -> float:
        if self.mass is None:
            return float(np.linalg.norm(np.ravel(x)))
        return discrete_norm(x, self.mass)

    def rhs(self) -> Callable[[np.ndarray], np.ndarray]:
        """g(v) = scale·M⁻¹(−S[v]v + L f(v)) with L the lumped mass"""
        weights = lumped_mass(self.mass) if self.mass is not None else None

        def g(v: np.ndarray) -> np.ndarray:
            v = np.asarray(v)
            total = np.zeros(v.shape, dtype=np.result_type(v, self.scale, float))
            coupled = np.zeros_like(total)
            if self.fo is not None:
                coupled -= self.fo.action(v)
            if self.f is not None:
                fv = np.asarray(self.f(v))
                if weights is None:
                    total += fv
                else:
                    coupled += weights * fv
            if self.mass is not None and (self.fo is not None or self.f is not None):
                total += self.mass.solve(coupled)
            return self.scale * total

        return g


def tensor_constants(p: EvolutionProblem) -> Tuple[float, float, float]:
    """(M_D, c_D, μ(A[I])) of the diffusion part"""
    if p.fo is None:
        return 0.0, 0.0, 0.0
    tensor = p.fo.tensor
    if isinstance(tensor, (IdentityTensor, ConstantTensor)):
        M_D, c_D = tensor.bound(p.r), 0.0
    elif isinstance(tensor, StateTensor):
        if tensor.bound_model is None or tensor.lipschitz_model is None:
            raise MissingConstants(f"{p.name}: state tensor without M_D/c_D models")
        M_D, c_D = tensor.bound(p.r), tensor.lipschitz(p.r)
    else:
        raise MissingConstants(f"{p.name}: unknown tensor model {type(tensor).__name__}")
    for label, value in (("M_D", M_D), ("c_D", c_D)):
        if not (math.isfinite(value) and value >= 0):
            raise MissingConstants(f"{p.name}: {label}={value} must be finite and nonnegative")
    return M_D, c_D, p.fo.mu_AI


def lipschitz_constants(p: EvolutionProblem) -> Dict[str, float]:
    """c_g = (M_D + c_D r)μ(A[I]) + c_f(r) and M_g = r M_D μ(A[I]) + M_f(r), times |scale|"""
    if p.f is not None and (p.c_f is None or p.M_f is None):
        raise MissingConstants(f"{p.name}: nonlinearity without c_f/M_f models")
    c_f = p.c_f(p.r) if p.f is not None else 0.0
    M_f = p.M_f(p.r) if p.f is not None else 0.0
    if not (math.isfinite(c_f) and math.isfinite(M_f)):
        raise MissingConstants(f"{p.name}: non-finite c_f={c_f} or M_f={M_f}")
    M_D, c_D, mu_AI = tensor_constants(p)
    modulus = abs(p.scale)
    return {
        "c_g": modulus * ((M_D + c_D * p.r) * mu_AI + c_f),
        "M_g": modulus * (p.r * M_D * mu_AI + M_f),
        "M_D": M_D,
        "c_D": c_D,
        "mu_AI": mu_AI,
        "c_f": c_f,
        "M_f": M_f,
    }


def delta_existence(p: EvolutionProblem, constants: Optional[Dict[str, float]] = None) -> float:
    """δ = min{r / M_g, 1 / c_g}; ∞ when g ≡ 0"""
    constants = constants or lipschitz_constants(p)
    c_g, M_g = constants["c_g"], constants["M_g"]
    if c_g < 0 or M_g < 0 or math.isnan(c_g) or math.isnan(M_g):
        raise DegenerateProblem(f"{p.name}: invalid constants c_g={c_g}, M_g={M_g}")
    radius_term = p.r / M_g if M_g > 0 else math.inf
    lipschitz_term = 1.0 / c_g if c_g > 0 else math.inf
    return min(radius_term, lipschitz_term)


def integration_window(p: EvolutionProblem, safety: float = DEFAULT_SAFETY) -> float:
    """Safety-scaled window length s·δ used for integration"""
    if not 0.0 < safety <= 1.0:
        raise ValueError(f"safety factor must lie in (0, 1], got {safety}")
    return safety * delta_existence(p)


def picard_error_bound(k: int, c_g: float, M_g: float, delta: float, c_u: float = 0.0,
                       h: Optional[float] = None, nu: float = 2.0) -> float:
    """(c_g δ)^k (1 − c_g δ)⁻¹ M_g δ, plus c_u h^ν when h is given"""
    if k < 0:
        raise ValueError(f"Picard depth must be nonnegative, got {k}")
    q = c_g * delta
    if q >= 1.0:
        raise NotContractive(f"c_g·δ = {q:.6g} ≥ 1")
    bound = q ** k / (1.0 - q) * M_g * delta
    if h is not None:
        bound += c_u * h ** nu
    return bound


@dataclass
class LocalSolution:
    """Depth-k Picard iterate y_k on t_n = t₀ + n·dt"""
    delta: float
    window: Tuple[float, float]
    dt: float
    time_grid: np.ndarray
    trajectory: np.ndarray
    picard_depth: int
    constants: Dict[str, float]
    sup_increment: float
    confined: bool = True
    escape_index: Optional[int] = None
    problem: Optional[EvolutionProblem] = field(default=None, repr=False)
    rhs: Optional[Callable[[np.ndarray], np.ndarray]] = field(default=None, repr=False)

    @property
    def steps(self) -> int:
        return self.time_grid.size - 1

    @property
    def window_length(self) -> float:
        return self.window[1] - self.window[0]

    def bound_at_k(self) -> float:
        return picard_error_bound(self.picard_depth, self.constants["c_g"], self.constants["M_g"],
                                  self.window_length)

    def mass_drift(self) -> float:
        """max_n |‖u(t_n)‖ − ‖u₀‖| / ‖u₀‖ in the problem norm"""
        norm = self.problem.norm if self.problem is not None else np.linalg.norm
        initial = norm(self.trajectory[0])
        if initial == 0:
            return 0.0
        return max(abs(norm(u) - initial) for u in self.trajectory) / initial

    def summary(self) -> Dict:
        return {
            "delta": self.delta,
            "window": list(self.window),
            "dt": self.dt,
            "k": self.picard_depth,
            "steps": self.steps,
            "c_g": self.constants["c_g"],
            "M_g": self.constants["M_g"],
            "bound_at_k": self.bound_at_k(),
            "sup_increment": self.sup_increment,
            "mass_drift": self.mass_drift(),
            "confined": self.confined,
            "escape_index": self.escape_index,
        }


def _cumulative_simpson(values: np.ndarray, dt: float) -> np.ndarray:
    if values.shape[0] == 2:
        # single interval: trapezoid
        out = np.zeros_like(values)
        out[1] = 0.5 * dt * (values[0] + values[1])
        return out
    if np.iscomplexobj(values):
        return (integrate.cumulative_simpson(values.real, dx=dt, axis=0, initial=0)
                + 1j * integrate.cumulative_simpson(values.imag, dx=dt, axis=0, initial=0))
    return integrate.cumulative_simpson(values, dx=dt, axis=0, initial=0)


def _evaluate(g: Callable[[np.ndarray], np.ndarray], states: np.ndarray, workers: int) -> np.ndarray:
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            return np.stack(list(pool.map(g, states)))
    return np.stack([g(state) for state in states])


def _picard_sweeps(g: Callable[[np.ndarray], np.ndarray], x: np.ndarray, steps: int, dt: float, k: int,
                   norm: Callable[[np.ndarray], float], workers: int = 1) -> Tuple[np.ndarray, float]:
    """k Picard sweeps from x on steps panels of width dt; returns the iterate and its last sup increment"""
    current = np.broadcast_to(x, (steps + 1,) + x.shape).copy()
    sup_increment = 0.0
    for j in range(k):
        integrand = _evaluate(g, current, workers)
        following = x + _cumulative_simpson(integrand, dt)
        sup_increment = max(norm(a - b) for a, b in zip(following, current))
        current = following
        logger.debug(f"🔁 Picard sweep {j + 1}/{k}: sup increment {sup_increment:.6e}")
    return current, sup_increment


def picard_solve(p: EvolutionProblem, u0: np.ndarray, k: int, dt: float,
                 window: Optional[Tuple[float, float]] = None, safety: float = DEFAULT_SAFETY,
                 on_escape: str = "raise", workers: int = 1) -> LocalSolution:
    """y_{j+1}(t_n) = u₀ + ∫_{t₀}^{t_n} g(y_j(τ)) dτ for j < k, composite Simpson in time.

    window defaults to (0, safety·δ). on_escape="flag" records the first node
    leaving the ball instead of raising BallEscape.
    """
    if k < 1:
        raise ValueError(f"Picard depth must be at least 1, got {k}")
    if dt <= 0:
        raise ValueError(f"time step must be positive, got {dt}")
    if on_escape not in ("raise", "flag"):
        raise ValueError(f"on_escape must be 'raise' or 'flag', got {on_escape!r}")

    constants = lipschitz_constants(p)
    delta = delta_existence(p, constants)
    allowed = safety * delta
    if window is None:
        if not math.isfinite(allowed):
            raise DegenerateProblem(f"{p.name}: δ is unbounded, pass an explicit window")
        window = (0.0, allowed)
    t0, t1 = float(window[0]), float(window[1])
    if t1 <= t0:
        raise ValueError(f"empty integration window ({t0}, {t1})")
    if t1 - t0 > allowed * (1.0 + WINDOW_RTOL):
        raise WindowExceedsDelta(f"{p.name}: window length {t1 - t0:.6g} exceeds s·δ = {allowed:.6g}")
    if t0 < -allowed * (1.0 + WINDOW_RTOL) or t1 > allowed * (1.0 + WINDOW_RTOL):
        raise WindowExceedsDelta(f"{p.name}: window ({t0:.6g}, {t1:.6g}) is not inside (−s·δ, s·δ) = "
                                 f"(−{allowed:.6g}, {allowed:.6g})")

    steps = int(math.floor((t1 - t0) / dt + 1e-9))
    if steps < 1:
        raise ValueError(f"time step {dt} larger than the window {t1 - t0}")
    time_grid = t0 + dt * np.arange(steps + 1)

    u0 = np.asarray(u0, dtype=np.result_type(u0, p.scale, float))
    if p.mass is not None and u0.shape != (p.mass.size,):
        raise DimensionMismatch(f"initial state of shape {u0.shape} for {p.mass.size} dofs")
    start_peak = float(np.max(np.abs(u0))) if u0.size else 0.0
    if start_peak > p.r * (1.0 + BALL_RTOL):
        raise BallEscape(f"initial state outside the ball: ‖u0‖∞={start_peak:.6g} > r={p.r:g}",
                         index=0, norm=start_peak)

    g = p.rhs()
    current, sup_increment = _picard_sweeps(g, u0, steps, dt, k, p.norm, workers)

    peaks = np.max(np.abs(current.reshape(steps + 1, -1)), axis=1)
    outside = np.nonzero(peaks > p.r * (1.0 + BALL_RTOL))[0]
    confined, escape_index = True, None
    if outside.size:
        escape_index = int(outside[0])
        message = (f"{p.name}: trajectory left the ball at t={time_grid[escape_index]:.6g} "
                   f"(‖u‖∞={peaks[escape_index]:.6g} > r={p.r:g})")
        if on_escape == "raise":
            raise BallEscape(message, index=escape_index, norm=float(peaks[escape_index]))
        logger.warning(f"⚠️ {message}")
        confined = False

    solution = LocalSolution(delta=delta, window=(t0, float(time_grid[-1])), dt=dt, time_grid=time_grid,
                             trajectory=current, picard_depth=k, constants=constants,
                             sup_increment=sup_increment, confined=confined,
                             escape_index=escape_index, problem=p, rhs=g)
    logger.info(f"✅ {p.name}: Picard depth {k} over {steps} steps, δ={delta:.6g}, "
                f"sup increment {sup_increment:.3e}")
    return solution


def semigroup_step(sol: LocalSolution, n: int, x: Optional[np.ndarray] = None) -> np.ndarray:
    """S_n[x] = y_k(t_n) of the depth-k Picard map started at x on the stored time panels.

    From the stored start (x absent or equal to u₀) this is the stored iterate
    itself; S_0 is the identity.
    """
    if n < 0 or n > sol.steps:
        raise IndexOutOfWindow(f"step index {n} outside 0..{sol.steps}")
    start = sol.trajectory[0]
    if x is None or np.array_equal(x, start):
        return np.array(sol.trajectory[n], copy=True)
    x = np.asarray(x, dtype=np.result_type(x, sol.trajectory))
    if n == 0:
        return x.copy()
    g = sol.rhs or sol.problem.rhs()
    norm = sol.problem.norm if sol.problem is not None else np.linalg.norm
    iterate, _ = _picard_sweeps(g, x, n, sol.dt, sol.picard_depth, norm)
    return iterate[-1]


def semigroup_step_compose(sol: LocalSolution, m: int, n: int, x: Optional[np.ndarray] = None) -> np.ndarray:
    """S_m ∘ S_n applied to x (default u₀)"""
    if m < 0 or n < 0 or m + n > sol.steps:
        raise IndexOutOfWindow(f"composition ({m}, {n}) outside 0..{sol.steps}")
    return semigroup_step(sol, m, semigroup_step(sol, n, x))


def linear_generator(p: EvolutionProblem) -> DiscreteOperator:
    """A = −scale·M⁻¹S for a problem with a state-independent tensor"""
    if p.fo is None:
        raise DegenerateProblem(f"{p.name}: no operator part to build a generator from")
    if isinstance(p.fo.tensor, StateTensor):
        raise ValueError(f"{p.name}: generator needs a state-independent tensor")
    form = assemble_operator(p.fo)
    return DiscreteOperator(matrix=-p.scale * form.coefficient_map(), domain_gram=form.domain_gram,
                            codomain_gram=form.codomain_gram, label=f"generator[{p.name}]")


def _propagator(A: DiscreteOperator, t: float) -> np.ndarray:
    C = A.coefficient_map()
    size = float(np.linalg.norm(t * C, 1)) if C.size else 0.0
    if not math.isfinite(size) or size > SERIES_NORM_BUDGET:
        raise SeriesOverflow(f"‖tA‖₁ = {size:.3e} exceeds the series budget, split t")
    E = linalg.expm(t * C)
    if not np.all(np.isfinite(E)):
        raise SeriesOverflow(f"e^(tA) overflowed at t={t:g}, split t")
    return E


def semigroup_reference(A: DiscreteOperator, v0: np.ndarray, t: float,
                        forcing: Optional[Callable[[float], np.ndarray]] = None,
                        panels: int = 64, decay_rate: Optional[float] = None) -> np.ndarray:
    """e^{tA} v₀ + ∫₀ᵗ e^{(t−τ)A} f(τ) dτ.

    The exponential is a scaling-and-squaring Padé evaluation; the Duhamel
    integral uses composite Simpson on `panels` (even) panels. The result is
    checked against ‖e^{tA}v₀‖ ≤ e^{−mt}‖v₀‖ with m = decay_rate, which defaults
    to the dissipation rate when A is symmetric and dissipative.
    """
    if not A.is_square:
        raise DimensionMismatch(f"generator must be square, got {A.shape}")
    v0 = np.asarray(v0)
    if v0.shape != (A.shape[1],):
        raise DimensionMismatch(f"initial state of shape {v0.shape} for generator {A.shape}")
    free = _propagator(A, t) @ v0

    if decay_rate is None:
        decay_rate = _symmetric_decay_rate(A)
    if decay_rate is not None and t >= 0:
        gram = A.domain_gram
        limit = math.exp(-decay_rate * t) * discrete_norm(v0, gram) + DECAY_SLACK
        if discrete_norm(free, gram) > limit:
            raise CertificateFailure(f"decay bound violated at t={t:g}: "
                                     f"{discrete_norm(free, gram):.6e} > {limit:.6e}")

    if forcing is None or t == 0:
        return free
    if panels < 2 or panels % 2:
        raise ValueError(f"Simpson needs an even panel count, got {panels}")
    taus = np.linspace(0.0, t, panels + 1)
    step = _propagator(A, t / panels)
    values = np.empty((panels + 1, v0.size), dtype=np.result_type(free, step))
    carry = np.eye(v0.size)
    for j in range(panels, -1, -1):
        values[j] = carry @ np.asarray(forcing(taus[j]))
        carry = carry @ step
    if np.iscomplexobj(values):
        duhamel = integrate.simpson(values.real, x=taus, axis=0) + 1j * integrate.simpson(values.imag, x=taus, axis=0)
    else:
        duhamel = integrate.simpson(values, x=taus, axis=0)
    return free + duhamel


@dataclass
class SemigroupReport:
    """Contractive semigroup conditions for a generator on one start vector"""
    decay_rate: float
    decay_ok: bool
    composition_error: float
    composition_ok: bool
    continuity_errors: List[float]
    continuity_ok: bool

    @property
    def ok(self) -> bool:
        return self.decay_ok and self.composition_ok and self.continuity_ok


def dissipation_rate(A: DiscreteOperator) -> float:
    """Smallest eigenvalue of the symmetric part of −A in weighted coordinates"""
    C = weighted_matrix(A)
    return float(np.linalg.eigvalsh(-0.5 * (C + C.conj().T))[0])


def _symmetric_decay_rate(A: DiscreteOperator) -> Optional[float]:
    """λ_min of −A for a symmetric dissipative generator, None otherwise"""
    C = weighted_matrix(A)
    scale = np.linalg.norm(C, np.inf)
    if scale and np.linalg.norm(C - C.conj().T, np.inf) > SYMMETRY_TOL * scale:
        return None
    rate = dissipation_rate(A)
    return rate if rate >= -DECAY_SLACK else None


def contractive_semigroup_check(A: DiscreteOperator, v0: np.ndarray,
                                times: Sequence[float] = (0.01, 0.05, 0.1),
                                decay_rate: Optional[float] = None,
                                continuity_steps: Sequence[float] = (1e-4, 1e-6, 1e-8)) -> SemigroupReport:
    """Decay ‖e^{tA}v‖ ≤ e^{−mt}‖v‖, composition e^{(s+t)A} = e^{sA}e^{tA} and strong continuity"""
    gram = A.domain_gram
    rate = dissipation_rate(A) if decay_rate is None else decay_rate
    v_norm = discrete_norm(v0, gram)

    propagators = {t: _propagator(A, t) for t in times}
    decay_ok = all(discrete_norm(E @ v0, gram) <= math.exp(-rate * t) * v_norm + DECAY_SLACK
                   for t, E in propagators.items())

    composition_error = 0.0
    for s in times:
        for t in times:
            joined = _propagator(A, s + t) @ v0
            chained = propagators[s] @ (propagators[t] @ v0)
            composition_error = max(composition_error, discrete_norm(joined - chained, gram) / max(1.0, v_norm))

    Av = A.coefficient_map() @ v0
    Av_norm = discrete_norm(Av, gram)
    continuity = [discrete_norm(_propagator(A, tau) @ v0 - v0, gram) for tau in continuity_steps]
    continuity_ok = all(err <= tau * Av_norm * (1.0 + 1e-6) + 1e-12
                        for tau, err in zip(continuity_steps, continuity))

    report = SemigroupReport(decay_rate=rate, decay_ok=bool(decay_ok), composition_error=composition_error,
                             composition_ok=bool(composition_error <= COMPOSITION_TOL),
                             continuity_errors=continuity, continuity_ok=bool(continuity_ok))
    if report.ok:
        logger.info(f"✅ {A.label}: contractive semigroup conditions hold (rate {rate:.6g})")
    else:
        logger.warning(f"⚠️ {A.label}: semigroup check failed {report}")
    return report


def decay_rate_bracket(A: DiscreteOperator, v0: np.ndarray, t: float,
                       lambda_min: float, lambda_max: float) -> Dict[str, float]:
    """‖e^{tA}v₀‖ against e^{−λ_max t}‖v₀‖ and e^{−λ_min t}‖v₀‖"""
    gram = A.domain_gram
    v_norm = discrete_norm(v0, gram)
    value = discrete_norm(semigroup_reference(A, v0, t), gram)
    lower = math.exp(-lambda_max * t) * v_norm
    upper = math.exp(-lambda_min * t) * v_norm
    return {
        "t": t,
        "norm": value,
        "lower": lower,
        "upper": upper,
        "ok": bool(lower - DECAY_SLACK <= value <= upper + DECAY_SLACK),
    }


def simpson_budget(sol: LocalSolution, constant: float = SIMPSON_BUDGET) -> float:
    """Quadrature error budget C (c_g dt)⁴ M_g T over a window of length T"""
    c_g, M_g = sol.constants["c_g"], sol.constants["M_g"]
    return constant * (c_g * sol.dt) ** 4 * M_g * sol.window_length
