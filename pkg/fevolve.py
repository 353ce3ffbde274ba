#!/usr/bin/env python3
"""
fevolve command-line front door
Configures, runs and exports the elliptic, evolution, spectral and convergence
studies. Exit status: 0 when every certificate passes, 2 on a certificate
failure, 1 on errors.
"""

import argparse
import json
import logging
import math
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from fractions import Fraction
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from artifact_store import ArtifactStore, get_artifact_store
from elliptic import (
    SemilinearProblem,
    elliptic_apriori_bound,
    self_convergence_order,
    semilinear_solve,
)
from errors import ConfigParse, FevolveError
from evolution import (
    EvolutionProblem,
    contractive_semigroup_check,
    delta_existence,
    linear_generator,
    picard_solve,
    semigroup_reference,
    simpson_budget,
)
from mesh_basis import grid_document, projection_order_estimate
from operator_factory import (
    IdentityTensor,
    StateTensor,
    approximation_order_estimate,
    as_operator,
    assemble_operator,
    operator_header,
)
from problems import PRESETS, get_preset, initial_state, instantiate, list_presets, validate_lipschitz
from spectral import SPECTRAL_CSV_HEADER, norm_convergence_study, report_row, spectral_bracketing

logger = logging.getLogger(__name__)

COMMANDS = ("solve-elliptic", "solve-evolution", "spectral-study", "convergence-study", "list-presets")
DEFAULT_PRESETS = {
    "solve-elliptic": "semilinear_poisson_2d",
    "solve-evolution": "heat_1d",
    "spectral-study": "heat_1d",
    "convergence-study": "heat_1d",
}
DEFAULT_SWEEP = {
    "spectral-study": [1 / 8, 1 / 16, 1 / 32, 1 / 64],
    "convergence-study": [1 / 8, 1 / 16, 1 / 32],
}
ORDER_TARGET = 2.0
ORDER_TOLERANCE = 0.2
STEPS_PER_WINDOW = 200
MASS_DRIFT_TOL = 1e-6
EXIT_OK, EXIT_ERROR, EXIT_CERTIFICATE = 0, 1, 2


@dataclass
class RunConfig:
    command: str
    preset: Optional[str] = None
    h_list: List[float] = field(default_factory=list)
    r: Optional[float] = None
    k: int = 12
    dt: Optional[float] = None
    tol: float = 1e-11
    out_dir: str = field(default_factory=lambda: os.getenv("FEVOLVE_OUT_DIR", "./fevolve_out"))
    seed: int = 0
    workers: Optional[int] = None
    max_iter: int = 200
    safety: float = 0.9

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True, indent=2)

    @classmethod
    def from_dict(cls, payload: Dict) -> "RunConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(payload) - known)
        if unknown:
            raise ConfigParse(f"unknown configuration keys {unknown}")
        if payload.get("command") not in COMMANDS:
            raise ConfigParse(f"command must be one of {list(COMMANDS)}, got {payload.get('command')!r}")
        payload = dict(payload)
        if "h_list" in payload:
            payload["h_list"] = parse_h_list(payload["h_list"])
        config = cls(**payload)
        config.validate()
        return config

    @classmethod
    def from_json(cls, text: str) -> "RunConfig":
        try:
            payload = json.loads(text)
        except json.JSONDecodeError as e:
            raise ConfigParse(f"invalid JSON configuration: {e}") from e
        if not isinstance(payload, dict):
            raise ConfigParse("configuration must be a JSON object")
        return cls.from_dict(payload)

    def validate(self):
        if self.preset is not None and self.preset not in PRESETS:
            raise ConfigParse(f"unknown preset {self.preset!r}")
        if any(h <= 0 for h in self.h_list):
            raise ConfigParse(f"spacings must be positive, got {self.h_list}")
        if self.r is not None and self.r <= 0:
            raise ConfigParse(f"r must be positive, got {self.r}")
        if self.k < 1 or self.max_iter < 1:
            raise ConfigParse("k and max_iter must be at least 1")
        if self.dt is not None and self.dt <= 0:
            raise ConfigParse(f"dt must be positive, got {self.dt}")
        if self.tol <= 0 or not 0 < self.safety <= 1:
            raise ConfigParse("tol must be positive and safety must lie in (0, 1]")


def parse_h_list(value) -> List[float]:
    """Spacings from '1/8,1/16', a number or a list; fractions are allowed"""
    if isinstance(value, (int, float)):
        items = [value]
    elif isinstance(value, str):
        items = [item for item in value.replace(" ", "").split(",") if item]
    else:
        items = list(value)
    try:
        return [float(Fraction(str(item))) for item in items]
    except (ValueError, ZeroDivisionError) as e:
        raise ConfigParse(f"invalid spacing list {value!r}: {e}") from e


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON configuration file")
    common.add_argument("--out", dest="out_dir", default=argparse.SUPPRESS, help="output directory")
    common.add_argument("--seed", type=int, default=argparse.SUPPRESS)
    common.add_argument("--h", dest="h_list", default=argparse.SUPPRESS, help="spacing or list, e.g. 1/8,1/16")
    common.add_argument("--r", type=float, default=argparse.SUPPRESS, help="ball radius")
    common.add_argument("--k", type=int, default=argparse.SUPPRESS, help="Picard depth")
    common.add_argument("--dt", type=float, default=argparse.SUPPRESS, help="time step")
    common.add_argument("--tol", type=float, default=argparse.SUPPRESS)
    common.add_argument("--preset", default=argparse.SUPPRESS)
    common.add_argument("--workers", type=int, default=argparse.SUPPRESS)
    common.add_argument("--max-iter", dest="max_iter", type=int, default=argparse.SUPPRESS)
    common.add_argument("--safety", type=float, default=argparse.SUPPRESS)

    parser = argparse.ArgumentParser(prog="fevolve", description="Particular-representation Galerkin studies")
    commands = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        commands.add_parser(name, parents=[common])
    return parser


def load_config(argv: Optional[Sequence[str]] = None) -> RunConfig:
    """defaults < JSON file < command-line flags"""
    parser = build_parser()
    try:
        args = vars(parser.parse_args(argv))
    except SystemExit as e:
        raise ConfigParse(f"invalid command line (exit {e.code})") from None

    payload: Dict = {}
    config_path = args.pop("config", None)
    if config_path:
        try:
            with open(config_path, encoding="utf-8") as handle:
                payload = json.loads(handle.read())
        except (OSError, json.JSONDecodeError) as e:
            raise ConfigParse(f"cannot read configuration {config_path}: {e}") from e
        if not isinstance(payload, dict):
            raise ConfigParse("configuration must be a JSON object")
    payload.update(args)
    return RunConfig.from_dict(payload)


def _h_tag(h: float) -> str:
    inverse = 1.0 / h
    if abs(inverse - round(inverse)) < 1e-9:
        return f"1_{int(round(inverse))}"
    return f"{h:g}"


def _workers(config: RunConfig, tasks: int) -> int:
    cap = config.workers or int(os.getenv("FEVOLVE_THREADS", "0")) or os.cpu_count() or 1
    return max(1, min(tasks, cap))


def _sweep(config: RunConfig, task: Callable[[float], Dict], hs: Sequence[float]) -> List[Dict]:
    """Run task per spacing concurrently; results come back coarse to fine"""
    ordered = sorted(hs, reverse=True)
    with ThreadPoolExecutor(max_workers=_workers(config, len(ordered))) as pool:
        return list(pool.map(task, ordered))


def _coordinate_header(dim: int) -> List[str]:
    return ["x", "y", "z"][:dim]


def _spacings(config: RunConfig, preset_name: str) -> List[float]:
    if config.h_list:
        return list(config.h_list)
    return DEFAULT_SWEEP.get(config.command, [get_preset(preset_name).default_h])


def _operator_at(problem, v: Optional[np.ndarray] = None):
    fo = problem.fo
    if isinstance(fo.tensor, StateTensor):
        return assemble_operator(fo, initial_state(problem) if v is None else v)
    return assemble_operator(fo)


def _dirichlet_bracket(problem) -> Optional[Tuple[float, float]]:
    if isinstance(problem.fo.tensor, StateTensor):
        return None
    return problem.fo.dim * math.pi ** 2, math.inf


def _solve_elliptic(config: RunConfig, store: ArtifactStore, preset: str) -> Tuple[Dict, bool]:
    def task(h: float) -> Dict:
        problem = instantiate(preset, h=h, r=config.r)
        if not isinstance(problem, SemilinearProblem):
            raise ConfigParse(f"preset {preset} is not an elliptic problem")
        u, report, certificate = semilinear_solve(problem, tol=config.tol, max_iter=config.max_iter)
        norm_Ah = spectral_bracketing(problem.stiffness, problem.mass, h=h).norm_A
        bound = elliptic_apriori_bound(problem, report.iterations, h, norm_Ah, c_u=0.0)
        proj = problem.fo.projector
        rows = [list(node) + [value] for node, value in zip(proj.dof_nodes, u)]
        store.write_csv(f"{config.command}_{preset}_{_h_tag(h)}.csv",
                        _coordinate_header(proj.grid.dim) + ["u"], rows)
        return {
            "h": h,
            "dofs": proj.dof_count,
            "iterations": report.iterations,
            "K": report.K,
            "residual": certificate["residual"],
            "apriori_bound_at_k": bound,
            "c_u": 0.0,
            "u_norm_inf": float(np.max(np.abs(u))),
            "grid": grid_document(proj),
            "certificate": certificate,
        }

    results = _sweep(config, task, _spacings(config, preset))
    return {"runs": results}, all(item["certificate"]["ok"] for item in results)


def _solve_evolution(config: RunConfig, store: ArtifactStore, preset: str) -> Tuple[Dict, bool]:
    def task(h: float) -> Dict:
        problem = instantiate(preset, h=h, r=config.r)
        if not isinstance(problem, EvolutionProblem):
            raise ConfigParse(f"preset {preset} is not an evolution problem")
        u0 = initial_state(problem)
        window = config.safety * delta_existence(problem)
        dt = config.dt or window / STEPS_PER_WINDOW
        sol = picard_solve(problem, u0, config.k, dt, safety=config.safety, on_escape="flag")
        summary = sol.summary()
        checks = {"confined": sol.confined}

        if preset == "nls_1d":
            checks["mass_conserved"] = bool(summary["mass_drift"] <= MASS_DRIFT_TOL)
        if not isinstance(problem.fo.tensor, StateTensor) and problem.f is None:
            A = linear_generator(problem)
            reference = semigroup_reference(A, u0, sol.window_length)
            error = problem.norm(sol.trajectory[-1] - reference)
            budget = simpson_budget(sol)
            summary.update({"reference_error": error, "quadrature_budget": budget})
            checks["bound_dominates"] = bool(error <= summary["bound_at_k"] + budget)
            semigroup = contractive_semigroup_check(A, u0)
            summary["semigroup"] = asdict(semigroup)
            checks["semigroup"] = semigroup.ok
        summary["lipschitz"] = validate_lipschitz(problem, seed=config.seed)
        checks["lipschitz"] = summary["lipschitz"]["ok"]

        proj = problem.fo.projector
        complex_values = np.iscomplexobj(sol.trajectory)
        if complex_values:
            header = ["t"] + [f"re_{i}" for i in range(proj.dof_count)] + [f"im_{i}" for i in range(proj.dof_count)]
            rows = [[t] + list(u.real) + list(u.imag) for t, u in zip(sol.time_grid, sol.trajectory)]
        else:
            header = ["t"] + [f"u_{i}" for i in range(proj.dof_count)]
            rows = [[t] + list(u) for t, u in zip(sol.time_grid, sol.trajectory)]
        store.write_csv(f"{config.command}_{preset}_{_h_tag(h)}.csv", header, rows)
        summary.update({"h": h, "dofs": proj.dof_count, "checks": checks, "grid": grid_document(proj)})
        return summary

    results = _sweep(config, task, _spacings(config, preset))
    return {"runs": results}, all(all(item["checks"].values()) for item in results)


def _spectral_study(config: RunConfig, store: ArtifactStore, preset: str) -> Tuple[Dict, bool]:
    def task(h: float) -> Dict:
        problem = instantiate(preset, h=h, r=config.r)
        operator = _operator_at(problem)
        prefix = f"{config.command}_{preset}_{_h_tag(h)}"
        store.write_triplets(f"{prefix}_operator.txt", operator.matrix)
        store.write_triplets(f"{prefix}_gram.txt", problem.mass.matrix)
        return {"h": h, "operator": operator, "mass": problem.mass,
                "bracket": _dirichlet_bracket(problem)}

    members = _sweep(config, task, _spacings(config, preset))
    bracket = members[0]["bracket"]
    if len(members) == 1:
        rows = [spectral_bracketing(members[0]["operator"], members[0]["mass"], bracket=bracket, h=members[0]["h"])]
        summary: Dict = {}
        monotone = True
    else:
        study = norm_convergence_study([(m["h"], m["operator"], m["mass"]) for m in members], bracket=bracket)
        rows = study.rows
        monotone = study.lambda_min_monotone and study.inverse_monotone
        summary = {
            "extrapolated_lambda_min": study.extrapolated_lambda_min,
            "extrapolated_norm_Ainv": study.extrapolated_norm_Ainv,
            "lambda_min_monotone": study.lambda_min_monotone,
            "lambda_max_monotone": study.lambda_max_monotone,
            "inverse_monotone": study.inverse_monotone,
        }

    tag = "sweep" if len(rows) > 1 else _h_tag(rows[0].h)
    store.write_csv(f"{config.command}_{preset}_{tag}.csv", SPECTRAL_CSV_HEADER, [report_row(r) for r in rows])
    summary["rows"] = [r.to_dict() for r in rows]
    summary["operators"] = [operator_header(m["operator"]) for m in members]
    ok = monotone and all(r.stability_ok and r.bracketing_ok is not False for r in rows)
    return summary, ok


def _smooth_field(dim: int) -> Tuple[Callable, Callable]:
    def u(*x):
        value = 1.0
        for coordinate in x:
            value = value * np.sin(math.pi * np.asarray(coordinate))
        return value

    def minus_laplacian(field):
        return lambda *x: dim * math.pi ** 2 * field(*x)

    return u, minus_laplacian


def _convergence_study(config: RunConfig, store: ArtifactStore, preset: str) -> Tuple[Dict, bool]:
    hs = sorted(_spacings(config, preset), reverse=True)
    kind = get_preset(preset).kind
    if kind == "elliptic":
        def task(h: float) -> Dict:
            problem = instantiate(preset, h=h, r=config.r)
            u, _, certificate = semilinear_solve(problem, tol=config.tol, max_iter=config.max_iter)
            return {"h": h, "proj": problem.fo.projector, "u": u, "ok": certificate["ok"]}

        results = _sweep(config, task, hs + [min(hs) / 4])
        reference = results[-1]
        fit = self_convergence_order([(item["proj"], item["u"]) for item in results[:-1]],
                                     (reference["proj"], reference["u"]))
        rows = [[h, err] for h, err in zip(fit.hs, fit.errors)]
        store.write_csv(f"{config.command}_{preset}_sweep.csv", ["h", "self_error"], rows)
        summary = {"order": fit.order, "reference_h": reference["h"], "hs": fit.hs, "errors": fit.errors}
        ok = all(item["ok"] for item in results) and abs(fit.order - ORDER_TARGET) <= ORDER_TOLERANCE
        return summary, ok

    dim = get_preset(preset).dim
    u, minus_laplacian = _smooth_field(dim)

    def task(h: float) -> Dict:
        problem = instantiate(preset, h=h, r=config.r)
        laplacian = problem.fo.with_tensor(IdentityTensor())
        return {"proj": problem.fo.projector, "B": as_operator(assemble_operator(laplacian))}

    members = _sweep(config, task, hs)
    projection = projection_order_estimate([m["proj"] for m in members], u)
    representation = approximation_order_estimate([(m["proj"], m["B"]) for m in members], minus_laplacian, u)
    rows = [[h, pe, re] for h, pe, re in zip(projection.hs, projection.errors, representation.errors)]
    store.write_csv(f"{config.command}_{preset}_sweep.csv", ["h", "projection_error", "representation_error"], rows)
    summary = {"projection_order": projection.order, "representation_order": representation.order}
    ok = all(abs(order - ORDER_TARGET) <= ORDER_TOLERANCE for order in summary.values())
    return summary, ok


_HANDLERS = {
    "solve-elliptic": _solve_elliptic,
    "solve-evolution": _solve_evolution,
    "spectral-study": _spectral_study,
    "convergence-study": _convergence_study,
}


def run(config: RunConfig) -> int:
    """Execute one configured study and write its artifacts"""
    store = get_artifact_store(config.out_dir)
    preset = config.preset or DEFAULT_PRESETS.get(config.command)
    run_id = store.start_run(config.command, preset)
    artifacts: List[str] = []
    exit_code = EXIT_ERROR

    try:
        if config.command == "list-presets":
            presets = list_presets()
            artifacts.append(str(store.write_json("list-presets.json", {"success": True, "presets": presets})))
            print(json.dumps(presets, indent=2, ensure_ascii=False))
            exit_code = EXIT_OK
        else:
            summary, ok = _HANDLERS[config.command](config, store, preset)
            exit_code = EXIT_OK if ok else EXIT_CERTIFICATE
            summary.update({"success": True, "certificates_ok": ok, "config": asdict(config)})
            artifacts.append(str(store.write_json(f"{config.command}_{preset}_summary.json", summary)))
            if ok:
                logger.info(f"✅ {config.command} on {preset}: all certificates passed")
            else:
                logger.warning(f"⚠️ {config.command} on {preset}: certificate failure")
    except FevolveError as e:
        logger.error(f"❌ {e.qualified()}")
        artifacts.append(str(store.write_json(f"{config.command}_{preset}_summary.json",
                                              {"success": False, "error": e.qualified()})))
        exit_code = EXIT_ERROR
    except (ValueError, ArithmeticError, np.linalg.LinAlgError) as e:
        message = f"fevolve: {type(e).__name__}: {e}"
        logger.error(f"❌ {message}")
        artifacts.append(str(store.write_json(f"{config.command}_{preset}_summary.json",
                                              {"success": False, "error": message})))
        exit_code = EXIT_ERROR
    finally:
        written = sorted(p.name for p in store.base_dir.glob(f"{config.command}_{preset}_*")
                         if p.suffix in (".csv", ".txt"))
        store.finish_run(run_id, exit_code, [os.path.basename(a) for a in artifacts] + written)
    return exit_code


def main(argv: Optional[Sequence[str]] = None) -> int:
    logging.basicConfig(level=os.getenv("FEVOLVE_LOG_LEVEL", "INFO").upper(),
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    try:
        config = load_config(argv)
    except ConfigParse as e:
        logger.error(f"❌ {e.qualified()}")
        return EXIT_ERROR
    return run(config)


if __name__ == "__main__":
    sys.exit(main())
