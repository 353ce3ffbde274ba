#!/usr/bin/env python3
"""
Problem presets
Centralized registry of the shipped model problems and their analytic constants
"""

import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Dict, List, Optional, Union

import numpy as np

from elliptic import SemilinearProblem
from errors import UnknownPreset
from evolution import EvolutionProblem
from mesh_basis import Projector, assemble_gram, build_projector, build_tensor_grid
from operator_factory import assemble_operator, build_difference_factor, scalar_tensor
from spectral import spectral_bracketing

logger = logging.getLogger(__name__)

Problem = Union[SemilinearProblem, EvolutionProblem]

UNIT_INTERVAL = ((0.0, 1.0),)
UNIT_SQUARE = ((0.0, 1.0), (0.0, 1.0))

# Semilinear Poisson Δu = 1 + u² on the unit square
POISSON_COERCIVITY = 2.0 * math.pi ** 2
DEFAULT_AMPLITUDE = 0.8
LIPSCHITZ_SAMPLES = 200


@dataclass(frozen=True)
class Preset:
    name: str
    kind: str
    dim: int
    bounds: tuple
    default_h: float
    default_r: float
    equation: str
    constants: Dict[str, str] = field(default_factory=dict)
    notes: str = ""

    def to_dict(self) -> Dict:
        payload = asdict(self)
        payload["bounds"] = [list(b) for b in self.bounds]
        return payload


PRESETS: Dict[str, Preset] = {
    "semilinear_poisson_2d": Preset(
        name="semilinear_poisson_2d", kind="elliptic", dim=2, bounds=UNIT_SQUARE,
        default_h=1.0 / 32, default_r=1.0,
        equation="Δu = 1 + u² in (0,1)², u = 0 on the boundary",
        constants={"m": "2π²", "c_f": "2r", "M_f": "1 + r²", "K": "r/π²"},
        notes="contraction requires r < π²"),
    "nls_1d": Preset(
        name="nls_1d", kind="evolution", dim=1, bounds=UNIT_INTERVAL,
        default_h=1.0 / 16, default_r=1.0,
        equation="u' = i(Δu + |u|²u) in (0,1), u = 0 on the boundary",
        constants={"c_f": "3r²μ(G)", "c_f_nodal": "3r²", "M_f": "r³", "M_D": "1", "c_D": "0",
                   "delta": "min{1/(K_a/h² + 3r²μ(G)), 1/(K_a/h² + r²)}"},
        notes="‖u‖_M is conserved by the semi-discrete system"),
    "nonlinear_diffusion_1d": Preset(
        name="nonlinear_diffusion_1d", kind="evolution", dim=1, bounds=UNIT_INTERVAL,
        default_h=1.0 / 16, default_r=1.0,
        equation="u' = ∇·(u²∇u) in (0,1), u = 0 on the boundary",
        constants={"M_D": "r²", "c_D": "2r", "c_f": "0", "M_f": "0", "delta": "h²/(3r²K_a)"},
        notes="degenerate where u = 0"),
    "heat_1d": Preset(
        name="heat_1d", kind="evolution", dim=1, bounds=UNIT_INTERVAL,
        default_h=1.0 / 16, default_r=1.0,
        equation="u' = Δu in (0,1), u = 0 on the boundary",
        constants={"M_D": "1", "c_D": "0", "c_f": "0", "M_f": "0", "delta": "h²/K_a"},
        notes="dissipative generator, contractive semigroup"),
}


def get_preset(name: str) -> Preset:
    try:
        return PRESETS[name]
    except KeyError:
        raise UnknownPreset(f"unknown preset {name!r}, choose one of {sorted(PRESETS)}") from None


def list_presets() -> List[Dict]:
    return [PRESETS[name].to_dict() for name in sorted(PRESETS)]


def poisson_source(u: np.ndarray) -> np.ndarray:
    # S u = M f solves −Δu = f
    return -(1.0 + u * u)


def cubic(u: np.ndarray) -> np.ndarray:
    return np.abs(u) ** 2 * u


def _projector(preset: Preset, h: float, overrides: Dict) -> Projector:
    bounds = overrides.get("bounds", preset.bounds)
    grid = build_tensor_grid(bounds, h, "dirichlet")
    return build_projector(grid)


def _constant(value) -> Callable[[float], float]:
    if callable(value):
        return value
    return lambda r, value=float(value): value


def _poisson(preset: Preset, h: float, r: float, overrides: Dict) -> SemilinearProblem:
    proj = _projector(preset, h, overrides)
    mass = assemble_gram(proj)
    fo = build_difference_factor(proj, mass)
    m = overrides.get("m", POISSON_COERCIVITY)
    m_source = "analytic"
    if m == "spectral":
        m = spectral_bracketing(assemble_operator(fo), mass, h=h).lambda_min
        m_source = "spectral"
    return SemilinearProblem(fo=fo, mass=mass, f=overrides.get("f", poisson_source),
                             c_f=_constant(overrides.get("c_f", lambda r: 2.0 * r)),
                             M_f=_constant(overrides.get("M_f", lambda r: 1.0 + r * r)),
                             r=r, m=float(m), name=preset.name, m_source=m_source,
                             metadata={"h": h, "K_a": fo.inv_estimate})


def _evolution(preset: Preset, h: float, r: float, overrides: Dict) -> EvolutionProblem:
    proj = _projector(preset, h, overrides)
    mass = assemble_gram(proj)
    fo = build_difference_factor(proj, mass)
    metadata = {"h": h, "K_a": fo.inv_estimate, "mu_G": mass.space_volume}

    if preset.name == "nls_1d":
        mu_G = mass.space_volume
        metadata["c_f_nodal"] = 3.0 * r * r
        return EvolutionProblem(fo=fo, mass=mass, f=overrides.get("f", cubic),
                                c_f=_constant(overrides.get("c_f", lambda r: 3.0 * r * r * mu_G)),
                                M_f=_constant(overrides.get("M_f", lambda r: r ** 3)),
                                r=r, scale=overrides.get("scale", 1j), name=preset.name, metadata=metadata)

    if preset.name == "nonlinear_diffusion_1d":
        tensor = scalar_tensor(lambda s: np.real(s) ** 2, bound=lambda r: r * r,
                               lipschitz=lambda r: 2.0 * r, degenerate_ok=True)
        return EvolutionProblem(fo=fo.with_tensor(tensor), mass=mass, r=r,
                                scale=overrides.get("scale", 1.0), name=preset.name, metadata=metadata)

    return EvolutionProblem(fo=fo, mass=mass, r=r, scale=overrides.get("scale", 1.0),
                            name=preset.name, metadata=metadata)


_BUILDERS = {
    "semilinear_poisson_2d": _poisson,
    "nls_1d": _evolution,
    "nonlinear_diffusion_1d": _evolution,
    "heat_1d": _evolution,
}


def instantiate(name: str, h: Optional[float] = None, r: Optional[float] = None,
                overrides: Optional[Dict] = None) -> Problem:
    """Wire a preset into a problem instance on a grid of spacing h.

    overrides may replace m (a number or "spectral" for λ_min of S against M),
    f, c_f, M_f (numbers or r-models), scale and bounds.
    """
    preset = get_preset(name)
    h = preset.default_h if h is None else float(h)
    r = preset.default_r if r is None else float(r)
    problem = _BUILDERS[name](preset, h, r, dict(overrides or {}))
    logger.info(f"✅ Preset {name} instantiated at h={h:g}, r={r:g}")
    return problem


def initial_state(problem: Problem, amplitude: float = DEFAULT_AMPLITUDE) -> np.ndarray:
    """amplitude·r·∏ sin(π (x_i − a_i)/(b_i − a_i)) at the dof nodes"""
    proj = problem.fo.projector
    bounds = proj.grid.bounds
    nodes = proj.dof_nodes
    values = np.ones(proj.dof_count)
    for axis, (a, b) in enumerate(bounds):
        values *= np.sin(math.pi * (nodes[:, axis] - a) / (b - a))
    state = amplitude * problem.r * values
    if isinstance(problem, EvolutionProblem) and np.iscomplexobj(np.asarray(problem.scale)):
        return state.astype(complex)
    return state


def _ball_samples(rng: np.random.Generator, size: int, r: float, complex_values: bool) -> np.ndarray:
    if complex_values:
        radius = r * np.sqrt(rng.uniform(0.0, 1.0, size))
        return radius * np.exp(1j * rng.uniform(0.0, 2.0 * math.pi, size))
    return rng.uniform(-r, r, size)


def validate_lipschitz(problem: Problem, samples: int = LIPSCHITZ_SAMPLES, seed: int = 0) -> Dict:
    """Empirical per-node Lipschitz ratio of f on the ball against the stored constant"""
    if problem.f is None:
        return {"max_ratio": 0.0, "c_f": 0.0, "samples": 0, "ok": True}
    c_f = problem.metadata.get("c_f_nodal", problem.c_f(problem.r))
    complex_values = isinstance(problem, EvolutionProblem) and np.iscomplexobj(np.asarray(problem.scale))
    rng = np.random.default_rng(seed)
    size = problem.mass.size
    worst = 0.0
    for _ in range(samples):
        u = _ball_samples(rng, size, problem.r, complex_values)
        v = _ball_samples(rng, size, problem.r, complex_values)
        gap = np.abs(u - v)
        ratios = np.abs(problem.f(u) - problem.f(v))[gap > 0] / gap[gap > 0]
        worst = max(worst, float(np.max(ratios, initial=0.0)))
    ok = bool(worst <= c_f * (1.0 + 1e-12))
    if not ok:
        logger.warning(f"⚠️ {problem.name}: observed Lipschitz ratio {worst:.6g} exceeds c_f={c_f:.6g}")
    return {"max_ratio": worst, "c_f": c_f, "samples": samples, "ok": ok}
