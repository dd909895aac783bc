"""Experiment runner: ``kmprox {solve,dro,flow,oracle,gradcheck} --config PATH --out DIR``.

Exit codes: 0 success, 1 gradcheck failure, 2 configuration error, 3 numerical failure.

Randomness: everything derives from the top-level ``seed``.  Solver derivative
calls use the stream ``[seed, k, j]`` (iteration ``k``, ``j = 0`` leader,
``j = 1`` extrapolation); auxiliary draws use ``[seed, AUX, purpose, i]``.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import json
import math
import sys
import warnings
from importlib import resources
from pathlib import Path
from typing import Literal, Optional, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from . import flow as flowmod
from . import oracle as oraclemod
from .dro import (DroProblem, LossSpec, OffGridError, curvature_candidates, dro_risk,
                  kmp_suboptimality_certificate, robustness_report)
from .measure import DiscreteMeasure, kl_divergence
from .rkhs import HilbertBall, Kernel, RkhsFunction
from .saddle import Box, GapSets, MmdMatchingGame, SaddleProblem, SaddleState, random_state
from .solver import (RunRecord, StepSizes, duality_gap, kmp_run, kmp_run_stochastic,
                     step_size_diameter, step_size_theorem, theorem_bound)

AUX = 0xA5A5
GRADCHECK_THRESHOLD = 1e-5


class ConfigError(Exception):
    pass


class NumericalFailure(Exception):
    pass


# --------------------------------------------------------------------------- config


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


class KernelCfg(_Strict):
    kind: Literal["gaussian", "laplacian"] = "gaussian"
    bandwidth: float = Field(1.0, gt=0)


class GridCfg(_Strict):
    low: float
    high: float
    num: int = Field(ge=1)


class BoxCfg(_Strict):
    low: list[float]
    high: list[float]


class LossCfg(_Strict):
    kind: Literal["logistic", "clipped-quadratic", "custom-table"] = "logistic"
    params: dict = Field(default_factory=dict)


class ProblemCfg(_Strict):
    kind: Literal["matching", "linear", "dro"]
    kernel: KernelCfg = Field(default_factory=KernelCfg)
    grid: Optional[GridCfg] = None
    atoms: Optional[list[Union[float, list[float]]]] = None
    nu: Optional[list[float]] = None
    quad: float = Field(1.0, ge=0)
    f_radius: float = Field(10.0, gt=0)
    noise_sigma2: float = Field(0.0, ge=0)
    data: Optional[str] = None
    epsilon: Optional[float] = Field(None, gt=0)
    loss: LossCfg = Field(default_factory=LossCfg)
    theta_box: Optional[BoxCfg] = None
    printed_sign: bool = False

    @model_validator(mode="after")
    def _one_support(self):
        if (self.grid is None) == (self.atoms is None):
            raise ValueError("give exactly one of 'grid' or 'atoms'")
        if self.kind == "dro":
            for name in ("data", "epsilon", "theta_box"):
                if getattr(self, name) is None:
                    raise ValueError(f"dro problems need '{name}'")
        return self


class SolverCfg(_Strict):
    mode: Literal["deterministic", "stochastic"] = "deterministic"
    N: int = Field(ge=1)
    step_rule: Literal["theorem", "fixed", "diameter-printed", "diameter-optimal"] = "theorem"
    eta: Optional[float] = Field(None, gt=0)
    eta_max: float = Field(1.0, gt=0)
    batch: int = Field(1, ge=1)
    compress_tol: float = Field(0.0, ge=0)

    @model_validator(mode="after")
    def _eta_for_fixed(self):
        if self.step_rule == "fixed" and self.eta is None:
            raise ValueError("step_rule 'fixed' needs 'eta'")
        return self


class GapCfg(_Strict):
    cadence: Union[Literal["every", "log", "final"], list[int]] = "final"
    f_radius: Optional[float] = Field(None, gt=0)
    h_radius: Optional[float] = Field(None, gt=0)


class FlowCfg(_Strict):
    kind: Literal["quadratic", "interacting"] = "quadratic"
    dt: float = Field(1e-3, gt=0)
    T: float = Field(1.0, gt=0)
    lam: float = Field(1.0, gt=0)
    target: Optional[list[float]] = None
    f0: Optional[list[float]] = None
    record_every: int = Field(1, ge=1)


class OracleCfg(_Strict):
    simplex_step: float = Field(0.01, gt=0)
    coef_low: float = -1.0
    coef_high: float = 1.0
    coef_step: float = Field(0.01, gt=0)
    refine: int = Field(0, ge=0)
    cap: int = Field(oraclemod.DEFAULT_CAP, ge=1)
    theta: Optional[list[float]] = None


class RobustnessCfg(_Strict):
    delta: float = Field(0.05, gt=0, lt=1)
    mu0: Optional[list[float]] = None


class GradcheckCfg(_Strict):
    problems: list[Literal["matching", "linear", "dro-logistic", "dro-clipped", "dro-table"]] = Field(
        default_factory=lambda: ["matching", "linear", "dro-logistic", "dro-clipped", "dro-table"])
    states: int = Field(50, ge=1)
    step: float = Field(1e-5, gt=0)
    threshold: float = Field(GRADCHECK_THRESHOLD, gt=0)


class ExperimentConfig(_Strict):
    seed: int = Field(0, ge=0)
    problem: Optional[ProblemCfg] = None
    solver: Optional[SolverCfg] = None
    gap: GapCfg = Field(default_factory=GapCfg)
    flow: Optional[FlowCfg] = None
    oracle: Optional[OracleCfg] = None
    robustness: Optional[RobustnessCfg] = None
    gradcheck: Optional[GradcheckCfg] = None


def load_config(path) -> tuple[ExperimentConfig, dict, Path]:
    path = Path(path)
    try:
        raw = json.loads(path.read_text())
    except FileNotFoundError as e:
        raise ConfigError(f"config file not found: {path}") from e
    except json.JSONDecodeError as e:
        raise ConfigError(f"config is not valid JSON: {e}") from e
    try:
        cfg = ExperimentConfig.model_validate(raw)
    except ValidationError as e:
        lines = [f"{'.'.join(str(p) for p in err['loc'])}: {err['msg']}" for err in e.errors()]
        raise ConfigError("invalid config\n  " + "\n  ".join(lines)) from e
    return cfg, raw, path.parent


def config_hash(raw: dict) -> str:
    return hashlib.sha256(json.dumps(raw, sort_keys=True, separators=(",", ":")).encode()).hexdigest()


def _need(section, name: str):
    if section is None:
        raise ConfigError(f"this command needs a '{name}' section")
    return section


# --------------------------------------------------------------------------- builders


def build_atoms(p: ProblemCfg) -> np.ndarray:
    if p.grid is not None:
        if p.grid.high < p.grid.low:
            raise ConfigError("problem.grid: high must be >= low")
        return np.linspace(p.grid.low, p.grid.high, p.grid.num).reshape(-1, 1)
    rows = [a if isinstance(a, list) else [a] for a in p.atoms]
    if len({len(r) for r in rows}) != 1:
        raise ConfigError("problem.atoms: rows have different dimensions")
    return np.asarray(rows, dtype=float)


def read_points_csv(spec: str, base: Path) -> np.ndarray:
    if spec.startswith("builtin:"):
        name = spec.split(":", 1)[1]
        try:
            text = resources.files("kmprox").joinpath("data", f"{name}.csv").read_text()
        except FileNotFoundError as e:
            raise ConfigError(f"no bundled dataset named {name!r}") from e
    else:
        path = Path(spec) if Path(spec).is_absolute() else base / spec
        try:
            text = path.read_text()
        except FileNotFoundError as e:
            raise ConfigError(f"data file not found: {path}") from e
    rows = list(csv.reader(text.splitlines()))
    try:
        float(rows[0][0])
    except (ValueError, IndexError):
        rows = rows[1:]
    try:
        pts = np.array([[float(v) for v in r] for r in rows if r], dtype=float)
    except ValueError as e:
        raise ConfigError(f"data file has a non-numeric entry: {e}") from e
    if pts.size == 0:
        raise ConfigError("data file has no rows")
    return pts


def build_problem(p: ProblemCfg, base: Path) -> SaddleProblem:
    kernel = Kernel(p.kernel.kind, p.kernel.bandwidth)
    atoms = build_atoms(p)
    try:
        if p.kind in ("matching", "linear"):
            nu = (DiscreteMeasure.uniform(atoms) if p.nu is None
                  else DiscreteMeasure.from_weights(atoms, np.asarray(p.nu) / np.sum(p.nu)))
            return MmdMatchingGame(kernel, atoms, nu, quad=0.0 if p.kind == "linear" else p.quad,
                                   f_radius=p.f_radius, noise_sigma2=p.noise_sigma2)
        data = read_points_csv(p.data, base)
        box = Box(p.theta_box.low, p.theta_box.high)
        return DroProblem(LossSpec(p.loss.kind, p.loss.params), data, p.epsilon, kernel, atoms, box,
                          f_radius=p.f_radius, printed_sign=p.printed_sign)
    except OffGridError as e:
        raise ConfigError(f"problem.data: {e}") from e
    except ValueError as e:
        raise ConfigError(f"problem: {e}") from e


def build_gap_sets(problem: SaddleProblem, g: GapCfg) -> GapSets:
    sets = problem.default_gap_sets()
    return GapSets(U_theta=sets.U_theta,
                   U_f=HilbertBall(g.f_radius) if g.f_radius and sets.U_f is not None else sets.U_f,
                   U_h=HilbertBall(g.h_radius) if g.h_radius and sets.U_h is not None else sets.U_h)


def build_steps(problem: SaddleProblem, s: SolverCfg, D2: float) -> StepSizes:
    L = problem.lipschitz().L
    if s.step_rule == "theorem":
        return step_size_theorem(L, s.eta_max)
    if s.step_rule == "fixed":
        return StepSizes.uniform(s.eta)
    sigma2 = sum(problem.noise_variances(s.batch).values()) if s.mode == "stochastic" else 0.0
    rule = s.step_rule.split("-", 1)[1]
    return step_size_diameter(L, sigma2, D2, s.N, rule=rule, eta_max=s.eta_max)


def run_solver(problem: SaddleProblem, cfg: ExperimentConfig, raw: dict) -> tuple[RunRecord, dict]:
    s = cfg.solver
    sets = build_gap_sets(problem, cfg.gap)
    u0 = problem.initial_state()
    D2 = sets.diameter_sq(u0)
    steps = build_steps(problem, s, D2)
    L = problem.lipschitz().L
    sigma2 = 0.0
    if s.mode == "stochastic":
        sigma2 = sum(problem.noise_variances(s.batch).values())
        rec = kmp_run_stochastic(problem, u0, steps, s.N, s.batch, cfg.seed, gap_sets=sets,
                                 cadence=cfg.gap.cadence, compress_tol=s.compress_tol)
    else:
        rec = kmp_run(problem, u0, steps, s.N, gap_sets=sets, cadence=cfg.gap.cadence,
                      compress_tol=s.compress_tol)
    rec.config = raw
    final_gap = rec.gap_trace[-1]["gap"] if rec.gap_trace else duality_gap(problem, rec.average, sets)
    if not math.isfinite(final_gap):
        raise NumericalFailure(f"non-finite duality gap {final_gap}")
    summary = {"L": L, "D2": D2, "sigma2": sigma2, "final_gap": final_gap,
               "theorem_bound": theorem_bound(L, D2, s.N, sigma2) if L > 0 else None,
               "step_bound": steps.bound}
    return rec, summary


# --------------------------------------------------------------------------- output


def _write_json(path: Path, obj: dict):
    path.write_text(json.dumps(obj, sort_keys=True, indent=2, default=_jsonable) + "\n")


def _jsonable(x):
    if isinstance(x, np.ndarray):
        return x.tolist()
    if isinstance(x, (np.floating, np.integer, np.bool_)):
        return x.item()
    raise TypeError(f"not JSON serializable: {type(x).__name__}")


def _envelope(raw: dict, **payload) -> dict:
    return {"config": raw, "config_hash": config_hash(raw), **payload}


# --------------------------------------------------------------------------- commands


def cmd_solve(cfg: ExperimentConfig, raw: dict, base: Path, out: Path) -> int:
    problem = build_problem(_need(cfg.problem, "problem"), base)
    _need(cfg.solver, "solver")
    rec, summary = run_solver(problem, cfg, raw)
    _write_json(out / "run.json", _envelope(raw, record=rec.to_dict(), summary=summary))
    rec.write_gap_csv(out / "gap_trace.csv")
    return 0


def cmd_dro(cfg: ExperimentConfig, raw: dict, base: Path, out: Path) -> int:
    pc = _need(cfg.problem, "problem")
    if pc.kind != "dro":
        raise ConfigError("problem.kind must be 'dro' for the dro command")
    p = build_problem(pc, base)
    _need(cfg.solver, "solver")
    rob = cfg.robustness or RobustnessCfg()
    if rob.mu0 is not None and len(rob.mu0) != p.m:
        raise ConfigError(f"robustness.mu0 needs {p.m} weights")
    rec, summary = run_solver(p, cfg, raw)
    sets = build_gap_sets(p, cfg.gap)
    theta_star = oraclemod.dro_minimizer(p)
    cert = kmp_suboptimality_certificate(p, rec, sets, theta_star=theta_star)
    mu0 = (DiscreteMeasure.uniform(p.atoms) if rob.mu0 is None
           else DiscreteMeasure.from_weights(p.atoms, np.asarray(rob.mu0) / np.sum(rob.mu0)))
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        rep = robustness_report(p, rec.average.theta, mu0, rob.delta, theta_star=theta_star)
    rep.pop("_mu_hat_mmd_check", None)
    report = {
        "risk_kmp": cert["risk_kmp"],
        "risk_oracle": cert["risk_oracle"],
        "risk_difference": cert["risk_difference"],
        "duality_gap": cert["duality_gap"],
        "gap_bound": cert["gap_bound"],
        "difference_le_gap": cert["difference_le_gap"],
        "certified": cert["certified"],
        "theta_kmp": cert["theta_kmp"],
        "theta_oracle": cert["theta_oracle"],
        "epsilon": rep["epsilon"],
        "epsilon_n": rep["epsilon_n"],
        "precondition_met": rep["precondition_met"],
        "clauses": rep["clauses"],
        "warnings": [str(w.message) for w in caught],
        "loss_convex_in_theta": p.loss.convex_in_theta,
        "curvature_candidates": curvature_candidates(p),
    }
    for k in ("risk_kmp", "risk_oracle", "duality_gap"):
        if not math.isfinite(report[k]):
            raise NumericalFailure(f"non-finite {k}")
    _write_json(out / "run.json", _envelope(raw, record=rec.to_dict(), summary=summary))
    rec.write_gap_csv(out / "gap_trace.csv")
    _write_json(out / "dro_report.json", _envelope(raw, report=report))
    return 0


def cmd_flow(cfg: ExperimentConfig, raw: dict, base: Path, out: Path) -> int:
    fc = _need(cfg.flow, "flow")
    pc = _need(cfg.problem, "problem")
    kernel = Kernel(pc.kernel.kind, pc.kernel.bandwidth)
    atoms = build_atoms(pc)
    m = len(atoms)
    K = kernel.gram(atoms)
    for name in ("target", "f0"):
        v = getattr(fc, name)
        if v is not None and len(v) != m:
            raise ConfigError(f"flow.{name} needs {m} coefficients")
    if fc.kind == "quadratic":
        target = RkhsFunction(atoms, fc.target or np.zeros(m), kernel, K)
        f0 = RkhsFunction(atoms, fc.f0 if fc.f0 is not None else np.ones(m), kernel, K)
        V = flowmod.QuadraticEnergy(target, fc.lam)
        traj = flowmod.rkhs_flow(V, f0, fc.dt, fc.T, fc.record_every)
        d0 = (f0 - target).norm()
        if d0 == 0:
            raise ConfigError("flow.f0 equals the minimizer; contraction ratio undefined")
        fT = traj[-1].f
        summary = {
            "terminal_time": traj[-1].t,
            "terminal_ratio": (fT - target).norm() / d0,
            "exact_ratio": math.exp(-fc.lam * traj[-1].t),
            "error_vs_exact": (fT - V.exact(f0, traj[-1].t)).norm(),
            "evi_residual": flowmod.evi_residual(V, traj, target),
        }
        flowmod.write_trajectory_csv(out / "trajectory.csv", traj, lambda s: V(s.f))
    else:
        problem = build_problem(pc, base)
        if not isinstance(problem, MmdMatchingGame):
            raise ConfigError("interacting flow needs a matching or linear problem")
        f0 = RkhsFunction(atoms, fc.f0 if fc.f0 is not None else np.zeros(m), kernel, K)
        try:
            traj = flowmod.interacting_flow(problem, f0, DiscreteMeasure.uniform(atoms), fc.dt, fc.T,
                                            fc.record_every)
        except flowmod.FlowStepError as e:
            raise ConfigError(f"flow.dt: {e}") from e
        lyap = [0.5 * s.f.norm_sq() + kl_divergence(problem.nu, s.mu) for s in traj]
        summary = {
            "terminal_time": traj[-1].t,
            "lyapunov_initial": lyap[0],
            "lyapunov_final": lyap[-1],
            "lyapunov_max_increase": float(max(np.diff(lyap).max(initial=0.0), 0.0)),
        }
        flowmod.write_trajectory_csv(out / "trajectory.csv", traj,
                                     lambda s: problem.value(_fm_state(s)), with_weights=True)
    for k, v in summary.items():
        if isinstance(v, float) and not math.isfinite(v):
            raise NumericalFailure(f"non-finite {k}")
    _write_json(out / "flow.json", _envelope(raw, summary=summary))
    return 0


def _fm_state(s):
    return SaddleState(f=s.f, mu=s.mu)


def cmd_oracle(cfg: ExperimentConfig, raw: dict, base: Path, out: Path) -> int:
    pc = _need(cfg.problem, "problem")
    oc = cfg.oracle or OracleCfg()
    problem = build_problem(pc, base)
    try:
        mesh = oraclemod.MeshSpec(oc.simplex_step, oc.coef_low, oc.coef_high, oc.coef_step,
                                  refine=oc.refine, cap=oc.cap)
        if isinstance(problem, DroProblem):
            theta = np.asarray(oc.theta if oc.theta is not None else problem.theta_box.center, float)
            if not problem.theta_box.contains(theta):
                raise ConfigError("oracle.theta lies outside the theta box")
            result = {"theta": theta.tolist(),
                      "brute_force_risk": oraclemod.brute_force_dro_risk(problem, theta, mesh),
                      "subsolver_risk": dro_risk(problem, theta), "mesh": mesh.to_dict()}
        else:
            result = oraclemod.brute_force_saddle(problem, mesh)
    except oraclemod.MeshTooLargeError as e:
        raise ConfigError(f"oracle: {e}") from e
    except ValueError as e:
        raise ConfigError(f"oracle: {e}") from e
    _write_json(out / "oracle.json", _envelope(raw, result=result))
    return 0


def builtin_problems() -> dict[str, SaddleProblem]:
    """Small instances of every problem family, used by gradcheck and the test-suite."""
    atoms = np.linspace(-1.0, 1.0, 5)
    nu = DiscreteMeasure.from_weights(atoms, [0.1, 0.3, 0.2, 0.25, 0.15])
    kern = Kernel("gaussian", 0.5)
    grid = np.linspace(-2.0, 2.0, 10)
    toy = grid[[2, 3, 3, 5, 7]]
    box = Box([-2.0], [2.0])
    table = LossSpec("custom-table", {"b": np.linspace(0, 1, 10).tolist(),
                                      "g": np.linspace(-1, 1, 10).tolist(),
                                      "c": np.linspace(0.5, 2, 10).tolist()})
    return {
        "matching": MmdMatchingGame(kern, atoms, nu, quad=1.0),
        "linear": MmdMatchingGame(Kernel("laplacian", 1.0), atoms, nu, quad=0.0, f_radius=1.0),
        "dro-logistic": DroProblem(LossSpec("logistic", {"scale": 1.0}), toy, 0.1, kern, grid, box),
        "dro-clipped": DroProblem(LossSpec("clipped-quadratic", {"cap": 1.0}), toy, 0.2, kern, grid, box),
        "dro-table": DroProblem(table, toy, 0.3, Kernel("laplacian", 0.7), grid, box),
    }


def gradcheck_table(names, states: int, step: float, seed: int) -> list[dict]:
    problems = builtin_problems()
    rows = []
    for pi, name in enumerate(names):
        p = problems[name]
        for i in range(states):
            u = random_state(p, np.random.default_rng([seed, AUX, pi, i]))
            for b in p.blocks:
                rows.append({"problem": name, "state": i, "block": b,
                             "error": oraclemod.finite_difference_check(p, u, b, step)})
    return rows


def cmd_gradcheck(cfg: ExperimentConfig, raw: dict, base: Path, out: Path) -> int:
    gc = cfg.gradcheck or GradcheckCfg()
    rows = gradcheck_table(gc.problems, gc.states, gc.step, cfg.seed)
    worst = {}
    for r in rows:
        key = f"{r['problem']}/{r['block']}"
        worst[key] = max(worst.get(key, 0.0), r["error"])
    with open(out / "gradcheck.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["problem", "state", "block", "error"])
        for r in rows:
            w.writerow([r["problem"], r["state"], r["block"], repr(r["error"])])
    ok = all(v <= gc.threshold for v in worst.values())
    _write_json(out / "gradcheck.json", _envelope(raw, max_error=worst, threshold=gc.threshold, passed=ok))
    return 0 if ok else 1


COMMANDS = {"solve": cmd_solve, "dro": cmd_dro, "flow": cmd_flow, "oracle": cmd_oracle,
            "gradcheck": cmd_gradcheck}


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="kmprox", description=__doc__.splitlines()[0])
    parser.add_argument("command", choices=sorted(COMMANDS))
    parser.add_argument("--config", required=True, help="JSON experiment config")
    parser.add_argument("--out", required=True, help="output directory")
    args = parser.parse_args(argv)
    try:
        cfg, raw, base = load_config(args.config)
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        with np.errstate(over="raise", invalid="raise", divide="raise", under="ignore"):
            return COMMANDS[args.command](cfg, raw, base, out)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except (NumericalFailure, FloatingPointError, np.linalg.LinAlgError) as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return 3


def entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entry()
