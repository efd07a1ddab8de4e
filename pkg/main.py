"""
Main orchestration script
Builds instances from YAML run configs, runs solves, sweeps and probes,
writes CSV artifacts and runs the diagnostics battery as an exit-code check.
"""
import argparse
import math
import os
import sqlite3
import sys
from concurrent.futures import ProcessPoolExecutor, as_completed
from typing import Dict, List, Optional, Tuple

import numpy as np
import pandas as pd
from tqdm import tqdm

from config import Config
from orliczflow.convex_ops import Problem, verify_resolvent_identities
from orliczflow.diagnostics import DiagnosticsReport
from orliczflow.flow_solver import (
    YOSIDA_FLOW,
    FlowData,
    FlowStepError,
    Forcing,
    Trajectory,
    continuous_dependence_check,
    energy_refinement_study,
    energy_report,
    lambda_convergence_study,
    scheme_identity_residual,
    solve_implicit_euler,
    solve_yosida_flow,
    stability_report,
    subdiff_residual,
    trajectory_frame,
)
from orliczflow.modular_core import (
    Grid,
    check_dual_sandwich,
    check_holder,
    check_norm_modular_relations,
    conjugate_superlinearity,
    lux_norm_conj,
    luxemburg_norm,
    modular,
    single_node_grid,
    uniform_grid_1d,
    uniform_grid_2d,
)
from orliczflow.mollify_lab import MollifierKernel, chain_rule_check, jensen_check, sub_markov_check
from orliczflow.pde_instances import check_growth_conditions
from orliczflow.phi_library import (
    PhiSpec,
    check_delta2,
    check_nabla2,
    check_phi_battery,
    classify_regime,
    pointwise_prox,
    subdiff,
)
from orliczflow.run_config import ConfigError, RunConfig, load_run_config
from utils.csv_io import read_frame, read_grid_function, states_frame, write_frame, write_report
from utils.run_storage import get_run_storage

EXIT_OK = 0
EXIT_CHECK_FAILED = 1
EXIT_CONFIG_ERROR = 2
EXIT_SOLVER_ERROR = 3


def _say(message: str):
    if Config.VERBOSE:
        print(message)


def _grid_specs(problem: Problem) -> List[Tuple[str, PhiSpec]]:
    """Energy pieces whose coefficient fields live on the grid nodes"""
    specs = []
    for term in problem.nodal_terms:
        if term.nodes.size == problem.size and term.spec.field_size in (None, problem.size):
            specs.append((term.label, term.spec))
    if problem.gradient_spec is not None and problem.gradient_spec.field_size is None:
        specs.append(("grad", problem.gradient_spec))
    return specs


def _all_specs(problem: Problem) -> List[Tuple[str, PhiSpec]]:
    specs = [(term.label, term.spec) for term in problem.nodal_terms]
    if problem.gradient_spec is not None:
        specs.append(("grad", problem.gradient_spec))
    return specs


def _solve(config: RunConfig, problem: Problem, u0: np.ndarray, forcing: Forcing) -> Trajectory:
    solver = config.solver
    if solver.scheme == YOSIDA_FLOW:
        return solve_yosida_flow(problem, u0, forcing, solver.lam, solver.tau, solver.T)
    return solve_implicit_euler(problem, u0, forcing, solver.tau, solver.T)


def _run_sweep_cell(config: RunConfig, lam: float, tau: float, output_dir: str) -> Dict:
    """One (lambda, tau) cell: Yosida flow against implicit Euler at the same tau"""
    problem = config.build_problem()
    u0 = config.initial_state(problem)
    forcing = config.forcing(problem)
    reference = solve_implicit_euler(problem, u0, forcing, tau, config.solver.T)
    traj = solve_yosida_flow(problem, u0, forcing, lam, tau, config.solver.T)
    path = os.path.join(output_dir, f"cell_lambda_{lam:g}_tau_{tau:g}.csv")
    write_frame(trajectory_frame(problem, traj), path)
    energy = energy_report(problem, traj, tol=config.tolerance("energy", 0.1))
    distance = max(problem.norm(a - b) for a, b in zip(traj.states, reference.states))
    return {
        "lambda": lam,
        "tau": tau,
        "distance": distance,
        "max_energy_residual": float(energy.details["max_residual"][0]),
        "passed": energy.passed,
        "file": os.path.basename(path),
    }


class ExperimentRunner:
    """
    Orchestrates one run configuration through the solver, the diagnostics
    and the artifact writers
    """

    def __init__(self, config: RunConfig):
        self.config = config
        self.output_dir = os.path.join(Config.output_root(), config.output.directory)
        Config.create_directories(config.output.directory)
        self.rng = np.random.default_rng(config.seed)

    def _enabled(self, check: str) -> bool:
        return getattr(self.config.checks, check).enabled

    def _path(self, name: str) -> str:
        return os.path.join(self.output_dir, name)

    # --- solve ---------------------------------------------------------------

    def run_solve(self) -> Dict:
        """
        Solve the configured flow and write the trajectory, the diagnostics
        report and the optional refinement / lambda tables and plots.

        Returns:
            Dict with the report, the artifact paths and the pass flag
        """
        config = self.config
        problem = config.build_problem()
        u0 = config.initial_state(problem)
        forcing = config.forcing(problem)
        _say(f"🧮 Solving {problem.name} on {problem.size} nodes ({config.solver.scheme}, tau={config.solver.tau:g})")

        traj = _solve(config, problem, u0, forcing)
        artifacts: Dict[str, str] = {}
        frame = trajectory_frame(problem, traj)
        if config.output.csv:
            artifacts["trajectory"] = write_frame(frame, self._path("trajectory.csv"))
            if config.output.states:
                artifacts["states"] = write_frame(states_frame(traj.times, traj.states), self._path("states.csv"))

        report = DiagnosticsReport(f"solve:{problem.name}")
        if self._enabled("energy"):
            report.merge(energy_report(problem, traj, tol=config.tolerance("energy", 0.1)))
        if self._enabled("young"):
            report.merge(subdiff_residual(problem, traj, tol=config.tolerance("young", self._young_default(problem))))
        report.merge(scheme_identity_residual(traj))
        if self._enabled("stability"):
            report.merge(stability_report(problem, traj, tol=config.tolerance("stability", 1e-10)))

        refinement = None
        if config.solver.refinements >= 2:
            refinement, ref_report = energy_refinement_study(
                problem, u0, forcing, config.solver.tau, config.solver.T, levels=config.solver.refinements,
                scheme=config.solver.scheme, lam=config.solver.lam)
            report.merge(ref_report)
            if config.output.csv:
                artifacts["refinement"] = write_frame(refinement, self._path("refinement.csv"))

        study = None
        if config.solver.scheme == YOSIDA_FLOW:
            study = lambda_convergence_study(problem, u0, forcing, config.solver.lambda_schedule,
                                             config.solver.tau, config.solver.T)
            report.merge(study.report)
            if config.output.csv:
                artifacts["lambda_study"] = write_frame(study.table, self._path("lambda_study.csv"))

        artifacts["report"] = write_report(report, self._path("report.csv"))
        if config.output.plots:
            artifacts.update(self._plots(frame, refinement, study.table if study else None, problem.name))

        _say(report.summary())
        return {"report": report, "artifacts": artifacts, "passed": report.passed, "trajectory": traj}

    def _plots(self, frame: pd.DataFrame, refinement: Optional[pd.DataFrame],
               lambda_table: Optional[pd.DataFrame], title: str) -> Dict[str, str]:
        from utils import plotting

        paths = {}
        for path in plotting.plot_trajectory(frame, self.output_dir, title):
            paths[os.path.splitext(os.path.basename(path))[0]] = path
        if refinement is not None:
            paths["tau_refinement"] = plotting.plot_refinement(refinement, self.output_dir)
        if lambda_table is not None:
            paths["lambda_convergence"] = plotting.plot_lambda_study(lambda_table, self.output_dir)
        return paths

    @staticmethod
    def _young_default(problem: Problem) -> float:
        return 1e-8 if problem.is_separable else 1e-6

    # --- check battery -------------------------------------------------------

    def run_checks(self) -> Tuple[int, DiagnosticsReport]:
        """
        Run every enabled invariant suite at the configured sizes.

        Returns:
            (exit code, merged report); the exit code is 0 iff every residual passes
        """
        config = self.config
        problem = config.build_problem()
        u0 = config.initial_state(problem)
        forcing = config.forcing(problem)
        report = DiagnosticsReport(f"check:{problem.name}")
        _say(f"🔍 Running checks on {problem.name} ({problem.size} nodes)")

        if self._enabled("phi"):
            tol = config.tolerance("phi", 1e-12)
            samples = config.trials("phi", Config.PHI_BATTERY_SAMPLES)
            for label, spec in _all_specs(problem):
                report.merge(check_phi_battery(spec, rng=self.rng, n_samples=samples, tol=tol),
                             prefix=f"phi.{label}")

        if self._enabled("modular"):
            self._modular_checks(problem, report)

        if self._enabled("resolvent"):
            report.merge(verify_resolvent_identities(
                problem, n_trials=config.trials("resolvent", 5), rng=self.rng,
                tol=config.tolerance("resolvent", 1e-8)))

        traj = _solve(config, problem, u0, forcing)
        if self._enabled("energy"):
            report.merge(energy_report(problem, traj, tol=config.tolerance("energy", 0.1)))
        if self._enabled("young"):
            report.merge(subdiff_residual(problem, traj, tol=config.tolerance("young", self._young_default(problem))))
        report.merge(scheme_identity_residual(traj))
        if self._enabled("stability"):
            report.merge(stability_report(problem, traj, tol=config.tolerance("stability", 1e-10)))

        if self._enabled("dependence"):
            tol = config.tolerance("dependence", 1e-8)
            for trial in range(config.trials("dependence", 2)):
                scale = 0.1 * (1.0 + problem.norm(u0))
                data2 = FlowData(u0 + problem.random_state(self.rng, scale), forcing)
                report.merge(continuous_dependence_check(problem, FlowData(u0, forcing), data2,
                                                         config.solver.tau, config.solver.T, tol=tol),
                             prefix=f"dependence.{trial}")

        if self._enabled("mollifier"):
            self._mollifier_checks(problem, traj, report)

        if self._enabled("coercivity"):
            tol = config.tolerance("coercivity", 1e-10)
            report.merge(problem.check_coercivity(self.rng, tol=tol))
            report.merge(check_growth_conditions(problem))

        write_report(report, self._path("check_report.csv"))
        failure = report.first_failure()
        if failure is None:
            _say(f"✅ All {len(report.residuals)} checks passed")
            return EXIT_OK, report
        print(f"❌ First failure: {failure.name} = {failure.value:.6e} (tolerance {failure.tolerance:.6e})")
        return EXIT_CHECK_FAILED, report

    def _modular_checks(self, problem: Problem, report: DiagnosticsReport):
        config = self.config
        grid = problem.grid
        tol = config.tolerance("modular", 1e-8)
        trials = config.trials("modular", 20)
        for label, spec in _grid_specs(problem):
            v = problem.random_state(self.rng, 2.0)
            report.merge(check_norm_modular_relations(grid, spec, v, tol=min(tol, 1e-10)),
                         prefix=f"modular.{label}.norm")
            pairs = [(problem.random_state(self.rng, float(self.rng.uniform(0.1, 3.0))),
                      problem.random_state(self.rng, float(self.rng.uniform(0.1, 3.0)))) for _ in range(trials)]
            report.merge(check_holder(grid, spec, pairs, slack=config.tolerance("modular", 1e-9)),
                         prefix=f"modular.{label}.holder")
            report.merge(check_dual_sandwich(grid, spec, problem.random_state(self.rng, 1.0),
                                             n_trials=trials, rng=self.rng, tol=tol),
                         prefix=f"modular.{label}.dual")
            report.merge(conjugate_superlinearity(grid, spec, problem.random_state(self.rng, 1.0)),
                         prefix=f"modular.{label}.superlinear")

    def _mollifier_checks(self, problem: Problem, traj: Trajectory, report: DiagnosticsReport):
        config = self.config
        tol = config.tolerance("mollifier", 1e-9)
        n = 1.0 / (8.0 * traj.tau)
        report.merge(MollifierKernel(n).check_properties(tol=min(tol, 1e-10)))
        indicator = (np.arange(len(traj.times)) % 3 == 0).astype(float)
        report.merge(sub_markov_check(indicator, traj.times, n))
        report.merge(jensen_check(problem, traj.states, traj.times, n, tol=tol))
        report.merge(chain_rule_check(problem, traj))

    # --- sweep ---------------------------------------------------------------

    def run_sweep(self) -> Dict:
        """Yosida flows on the (lambda, tau) grid, one CSV per cell plus summary.csv"""
        config = self.config
        sweep = config.sweep
        if sweep is None:
            raise ConfigError("section is required for the sweep command", "sweep")
        cells = [(lam, tau) for lam in sweep.lambdas for tau in sweep.taus]
        rows: List[Dict] = []
        workers = max(1, Config.WORKERS)
        _say(f"🚀 Sweeping {len(cells)} cells on {workers} worker(s)")
        if workers == 1:
            for lam, tau in tqdm(cells, desc="sweep", disable=not Config.VERBOSE):
                rows.append(_run_sweep_cell(config, lam, tau, self.output_dir))
        else:
            with ProcessPoolExecutor(max_workers=workers) as pool:
                futures = [pool.submit(_run_sweep_cell, config, lam, tau, self.output_dir) for lam, tau in cells]
                for future in tqdm(as_completed(futures), total=len(futures), desc="sweep",
                                   disable=not Config.VERBOSE):
                    rows.append(future.result())
        summary = pd.DataFrame(rows, columns=["lambda", "tau", "distance", "max_energy_residual", "passed", "file"])
        summary = summary.sort_values(["lambda", "tau"], ascending=False).reset_index(drop=True)
        path = write_frame(summary, self._path("summary.csv"))
        passed = bool(summary["passed"].all())
        _say(("✅" if passed else "❌") + f" Sweep summary written to {path}")
        return {"summary": summary, "artifacts": {"summary": path}, "passed": passed}

    # --- probes ----------------------------------------------------------------

    def _points(self) -> np.ndarray:
        if self.config.instance is not None:
            return self.config.instance_config().make_grid().nodes
        return uniform_grid_1d(65).nodes

    def _spec_from(self, desc: Optional[Dict], section: str, points: np.ndarray) -> PhiSpec:
        if desc is None:
            if self.config.instance is None or self.config.instance.M is None:
                raise ConfigError("needs a spec or an instance with M", f"{section}.spec")
            desc = self.config.instance_config().M
        return PhiSpec.from_description(desc, points)

    def run_probe(self) -> Dict:
        """Delta_2 / nabla_2 probes with witnesses and the regime classification"""
        config = self.config
        probe = config.probe
        if probe is None:
            raise ConfigError("section is required for the probe-delta2 command", "probe")
        spec = self._spec_from(probe.spec, "probe", self._points())
        lo, hi = probe.z_range
        z = np.logspace(math.log10(lo), math.log10(hi), probe.samples)
        results = [check_delta2(spec, z_samples=z)]
        if probe.nabla2:
            results.append(check_nabla2(spec, z_samples=z))
        rows = []
        for result in results:
            print(("✅ " if result.holds else "⚠️  ") + result.summary())
            x, wz = result.witness if result.witness else (None, float("nan"))
            rows.append({"condition": result.condition, "holds": result.holds, "best_k": result.best_k,
                         "witness_x": -1 if x is None else x, "witness_z": wz, "skipped": result.skipped})
        regime = classify_regime(spec) if probe.nabla2 else ""
        if regime:
            _say(f"📊 Regime: {regime}")
        path = write_frame(pd.DataFrame(rows), self._path("probe.csv"))
        return {"results": results, "regime": regime, "artifacts": {"probe": path}, "passed": True}

    @staticmethod
    def _norm_grid(frame: pd.DataFrame) -> Grid:
        """Uniform grid matching the coordinate columns of a field file"""
        n = len(frame)
        if "y" in frame.columns:
            xs, ys = np.unique(frame["x"]), np.unique(frame["y"])
            return uniform_grid_2d(xs.size, ys.size, (xs[0], xs[-1]), (ys[0], ys[-1]))
        if n == 1:
            return single_node_grid()
        if "x" in frame.columns:
            return uniform_grid_1d(n, float(frame["x"].min()), float(frame["x"].max()))
        return uniform_grid_1d(n)

    def run_norm(self) -> Dict:
        """Luxemburg norm (or conjugate norm) of a CSV grid function"""
        config = self.config
        section = config.norm
        if section is None:
            raise ConfigError("section is required for the norm command", "norm")
        path = config.resolve(section.field)
        grid = self._norm_grid(read_frame(path))
        gf = read_grid_function(path, grid)
        spec = self._spec_from(section.spec, "norm", grid.nodes)
        if section.conjugate:
            value = lux_norm_conj(grid, spec, gf, tol=section.tol)
            quantity = "luxemburg_norm_conjugate"
        else:
            value = luxemburg_norm(grid, spec, gf, tol=section.tol)
            quantity = "luxemburg_norm"
        frame = pd.DataFrame([{"quantity": quantity, "value": value},
                              {"quantity": "modular", "value": modular(grid, spec, gf)}])
        out = write_frame(frame, self._path("norm.csv"))
        print(f"📏 {quantity} = {value:.12e}")
        return {"value": value, "artifacts": {"norm": out}, "passed": True}

    def run_prox(self) -> Dict:
        """Pointwise prox of the configured spec with its stationarity residual"""
        section = self.config.prox
        if section is None:
            raise ConfigError("section is required for the prox command", "prox")
        spec = self._spec_from(section.spec, "prox", self._points())
        v = np.asarray(section.v, dtype=float)
        z = np.asarray(pointwise_prox(spec, section.node, v, section.lam), dtype=float)
        interval = subdiff(spec, section.node, z)
        residual = section.lam * np.asarray(interval.distance((v - z) / section.lam), dtype=float)
        frame = pd.DataFrame({"v": v, "prox": z, "stationarity": residual})
        out = write_frame(frame, self._path("prox.csv"))
        for vi, zi in zip(v, z):
            print(f"🎯 prox({vi:g}) = {zi:.12e}")
        return {"prox": z, "artifacts": {"prox": out}, "passed": bool(np.all(residual <= 1e-8))}


COMMANDS = ("solve", "check", "sweep", "probe-delta2", "norm", "prox")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="orliczflow", description="Gradient flows on Musielak-Orlicz spaces")
    sub = parser.add_subparsers(dest="command", required=True)
    helps = {
        "solve": "solve the configured flow and write trajectory CSV, report and plots",
        "check": "run the diagnostics battery; exit code 0 iff every check passes",
        "sweep": "Yosida flows over a (lambda, tau) grid",
        "probe-delta2": "Delta_2 / nabla_2 probes with witnesses",
        "norm": "Luxemburg norm of a CSV grid function",
        "prox": "pointwise proximal map of a Phi-function",
    }
    for name in COMMANDS:
        cmd = sub.add_parser(name, help=helps[name])
        cmd.add_argument("config", help="path to a YAML run configuration")
    runs = sub.add_parser("runs", help="list recorded runs from the run registry")
    runs.add_argument("--command", dest="filter", choices=COMMANDS, help="only runs of this command")
    runs.add_argument("--delete", metavar="RUN_ID", help="remove one run record")
    return parser


def list_runs(command: Optional[str] = None, delete: Optional[str] = None) -> int:
    """Print the registry, newest first; with `delete`, drop that record instead"""
    storage = get_run_storage()
    if delete is not None:
        if storage.delete_run(delete):
            print(f"🗑️  Deleted run {delete}")
            return EXIT_OK
        print(f"❌ No run with id {delete}")
        return EXIT_CONFIG_ERROR
    records = storage.get_all_runs(command)
    if not records:
        print("📭 No runs recorded")
        return EXIT_OK
    print(f"📊 {len(records)} run(s)")
    for run in records:
        mark = {1: "✅", 0: "❌"}.get(run["passed"], "⏳")
        line = f"{mark} {run['id']}  {run['command']:<12} {run['status']:<9} {run['output_dir']}"
        if run["summary"]:
            line += f"  (first failure: {run['summary']})"
        print(line)
    return EXIT_OK


def _register(command: str, config_path: str, output_dir: str) -> Optional[str]:
    try:
        return get_run_storage().start_run(command, config_path, output_dir)["id"]
    except sqlite3.Error as e:
        print(f"⚠️  Run registry unavailable: {e}")
        return None


def _finish(run_id: Optional[str], passed: Optional[bool], status: str, summary: str = ""):
    if run_id is None:
        return
    try:
        get_run_storage().finish_run(run_id, passed, status, summary)
    except sqlite3.Error as e:
        print(f"⚠️  Run registry update failed: {e}")


def run_command(command: str, config_path: str) -> int:
    config = load_run_config(config_path)
    runner = ExperimentRunner(config)
    run_id = _register(command, config_path, runner.output_dir)
    try:
        if command == "check":
            code, report = runner.run_checks()
            failure = report.first_failure()
            _finish(run_id, code == EXIT_OK, "completed", failure.name if failure else "")
            return code
        if command == "solve":
            result = runner.run_solve()
        elif command == "sweep":
            result = runner.run_sweep()
        elif command == "probe-delta2":
            result = runner.run_probe()
        elif command == "norm":
            result = runner.run_norm()
        else:
            result = runner.run_prox()
    except BaseException:
        _finish(run_id, False, "failed")
        raise
    _finish(run_id, result["passed"], "completed")
    return EXIT_OK if result["passed"] else EXIT_CHECK_FAILED


def main(argv: Optional[List[str]] = None) -> int:
    """Main entry point"""
    args = build_parser().parse_args(argv)
    try:
        Config.validate()
        if args.command == "runs":
            return list_runs(args.filter, args.delete)
        return run_command(args.command, args.config)
    except ConfigError as e:
        print(f"❌ Error: {e}")
        return EXIT_CONFIG_ERROR
    except FlowStepError as e:
        print(f"❌ Error: {e}")
        return EXIT_SOLVER_ERROR
    except Exception as e:
        print(f"❌ Error: {str(e)}")
        if Config.VERBOSE:
            import traceback
            traceback.print_exc()
        return EXIT_CHECK_FAILED


if __name__ == "__main__":
    sys.exit(main())
