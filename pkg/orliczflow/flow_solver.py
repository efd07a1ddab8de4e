"""
Flow Solver
Time discretisation of du/dt + subdiff(phi)(u) ∋ f, u(0) = u0: implicit Euler
and Yosida-regularised flows, subgradient recovery from the step relation, and
the evolution diagnostics (energy equality, Young equality, stability,
continuous dependence, lambda -> 0 studies).
"""
import math
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd

from orliczflow.convex_ops import Problem, ResolventConvergenceError, resolvent
from orliczflow.diagnostics import DiagnosticsReport
from orliczflow.modular_core import Grid, GridFunction
from orliczflow.phi_library import ProxConvergenceError

IMPLICIT_EULER = "implicit_euler"
YOSIDA_FLOW = "yosida_flow"


class FlowStepError(RuntimeError):
    """A resolvent solve failed inside a time step"""

    def __init__(self, step: int, cause: Exception):
        super().__init__(f"time step {step} failed: {cause}")
        self.step = step
        self.cause = cause


def mode_shape(grid: Grid, mode: int) -> np.ndarray:
    """Product of sin(mode pi s) over the coordinates; exactly zero on the boundary"""
    shape = np.ones(grid.size)
    for d in range(grid.dim):
        a, b = grid.extents[d]
        if b > a:
            s = (grid.nodes[:, d] - a) / (b - a)
            shape = shape * np.where((s <= 0.0) | (s >= 1.0), 0.0, np.sin(mode * np.pi * s))
    return shape


@dataclass(frozen=True)
class Forcing:
    """
    Forcing sampler f(t) on a grid.

    kinds: "zero"; "constant" (scalar or nodal field); "mode"
    (amplitude * cos(frequency * t) * sine mode); "slices" (CSV time slices,
    linear interpolation in time, clamped at the ends); "callable"
    (fn(t, nodes) -> values; module-level functions stay picklable).
    """

    kind: str = "zero"
    value: float = 0.0
    field_values: Optional[Tuple[float, ...]] = None
    mode: int = 1
    frequency: float = 0.0
    times: Optional[Tuple[float, ...]] = None
    slices: Optional[Tuple[Tuple[float, ...], ...]] = None
    fn: Optional[Callable[[float, np.ndarray], np.ndarray]] = None

    @classmethod
    def zero(cls) -> "Forcing":
        return cls("zero")

    @classmethod
    def constant(cls, value: Union[float, Sequence[float]]) -> "Forcing":
        if np.ndim(value) == 0:
            return cls("constant", value=float(value))
        return cls("constant", field_values=tuple(float(v) for v in value))

    @classmethod
    def sine_mode(cls, amplitude: float, mode: int = 1, frequency: float = 0.0) -> "Forcing":
        return cls("mode", value=float(amplitude), mode=int(mode), frequency=float(frequency))

    @classmethod
    def from_slices(cls, times: Sequence[float], slices: np.ndarray) -> "Forcing":
        times = np.asarray(times, dtype=float)
        if times.ndim != 1 or np.any(np.diff(times) <= 0):
            raise ValueError("forcing slice times must be strictly increasing")
        return cls("slices", times=tuple(times), slices=tuple(tuple(row) for row in np.asarray(slices, dtype=float)))

    @classmethod
    def from_callable(cls, fn: Callable[[float, np.ndarray], np.ndarray]) -> "Forcing":
        return cls("callable", fn=fn)

    @property
    def is_zero(self) -> bool:
        if self.kind == "zero":
            return True
        if self.kind in ("constant", "mode") and self.field_values is None:
            return self.value == 0.0
        if self.kind == "constant":
            return not any(self.field_values)
        return False

    def sample(self, t: float, grid: Grid) -> np.ndarray:
        if self.kind == "zero":
            return np.zeros(grid.size)
        if self.kind == "constant":
            if self.field_values is not None:
                return np.asarray(self.field_values, dtype=float).copy()
            return np.full(grid.size, self.value)
        if self.kind == "mode":
            return self.value * math.cos(self.frequency * t) * mode_shape(grid, self.mode)
        if self.kind == "slices":
            times = np.asarray(self.times)
            data = np.asarray(self.slices)
            if t <= times[0]:
                return data[0].copy()
            if t >= times[-1]:
                return data[-1].copy()
            j = int(np.searchsorted(times, t, side="right") - 1)
            theta = (t - times[j]) / (times[j + 1] - times[j])
            return (1.0 - theta) * data[j] + theta * data[j + 1]
        if self.kind == "callable":
            return np.broadcast_to(np.asarray(self.fn(t, grid.nodes), dtype=float), (grid.size,)).copy()
        raise ValueError(f"Unknown forcing kind {self.kind!r}")


@dataclass
class Trajectory:
    """
    States u^0..u^K at times t_k = k tau, subgradients xi^1..xi^K and the
    forcing samples f^0..f^{K-1}, with (u^k - u^{k-1})/tau + xi^k = f^{k-1}.
    Yosida flows also keep J_lambda(u^k) in `resolvents`.
    """

    times: np.ndarray
    states: np.ndarray
    subgradients: np.ndarray
    forcing: np.ndarray
    tau: float
    scheme: str = IMPLICIT_EULER
    lam: Optional[float] = None
    resolvents: Optional[np.ndarray] = None
    cache: Dict[str, np.ndarray] = field(default_factory=dict, repr=False)

    @property
    def steps(self) -> int:
        return int(self.subgradients.shape[0])

    def subgradient_points(self) -> np.ndarray:
        """Points where xi^k is a subgradient: u^k, or J_lambda(u^k) for Yosida flows"""
        if self.scheme == YOSIDA_FLOW:
            return self.resolvents
        return self.states[1:]


def _step_count(tau: float, T_final: float) -> int:
    if not tau > 0:
        raise ValueError(f"tau must be > 0, got {tau}")
    if not T_final > 0:
        raise ValueError(f"T_final must be > 0, got {T_final}")
    K = int(round(T_final / tau))
    if K < 1 or abs(K * tau - T_final) > 1e-9 * T_final:
        raise ValueError(f"T_final={T_final} is not a multiple of tau={tau}")
    return K


def _as_forcing(f: Optional[Forcing]) -> Forcing:
    return Forcing.zero() if f is None else f


def solve_implicit_euler(problem: Problem, u0: Union[GridFunction, np.ndarray], f: Optional[Forcing],
                         tau: float, T_final: float, tol: Optional[float] = None) -> Trajectory:
    """
    u^k = J_tau(u^{k-1} + tau f^{k-1}),  xi^k = (u^{k-1} + tau f^{k-1} - u^k) / tau.

    Raises:
        ValueError: tau or T_final not positive, or T_final not a multiple of tau
        FlowStepError: a resolvent solve failed (carries the step index)
    """
    K = _step_count(tau, T_final)
    f = _as_forcing(f)
    u = problem.vector(u0).astype(float).copy()
    states = np.empty((K + 1, problem.size))
    xis = np.empty((K, problem.size))
    forcing = np.empty((K, problem.size))
    states[0] = u
    times = tau * np.arange(K + 1)
    for k in range(1, K + 1):
        fk = f.sample(times[k - 1], problem.grid)
        w = u + tau * fk
        try:
            result = resolvent(problem, w, tau, tol, initial=u)
        except (ResolventConvergenceError, ProxConvergenceError) as exc:
            raise FlowStepError(k, exc) from exc
        u = result.J_lambda_u.values
        states[k] = u
        xis[k - 1] = (w - u) / tau
        forcing[k - 1] = fk
    return Trajectory(times, states, xis, forcing, tau, IMPLICIT_EULER)


def solve_yosida_flow(problem: Problem, u0: Union[GridFunction, np.ndarray], f: Optional[Forcing],
                      lam: float, tau: float, T_final: float, tol: Optional[float] = None) -> Trajectory:
    """
    Implicit step u^k + tau A_lambda(u^k) = u^{k-1} + tau f^{k-1} of the regularised flow.

    With w the right-hand side and y = J_{lambda+tau}(w):
        u^k = (lambda w + tau y) / (lambda + tau),  J_lambda(u^k) = y,
        xi^k = A_lambda(u^k) = (w - y) / (lambda + tau),
    so each step costs one resolvent solve.
    """
    if not lam > 0:
        raise ValueError(f"lambda must be > 0, got {lam}")
    K = _step_count(tau, T_final)
    f = _as_forcing(f)
    u = problem.vector(u0).astype(float).copy()
    states = np.empty((K + 1, problem.size))
    xis = np.empty((K, problem.size))
    forcing = np.empty((K, problem.size))
    resolvents = np.empty((K, problem.size))
    states[0] = u
    times = tau * np.arange(K + 1)
    for k in range(1, K + 1):
        fk = f.sample(times[k - 1], problem.grid)
        w = u + tau * fk
        try:
            y = resolvent(problem, w, lam + tau, tol).J_lambda_u.values
        except (ResolventConvergenceError, ProxConvergenceError) as exc:
            raise FlowStepError(k, exc) from exc
        u = (lam * w + tau * y) / (lam + tau)
        states[k] = u
        xis[k - 1] = (w - y) / (lam + tau)
        forcing[k - 1] = fk
        resolvents[k - 1] = y
    return Trajectory(times, states, xis, forcing, tau, YOSIDA_FLOW, lam=lam, resolvents=resolvents)


def _norms(problem: Problem, rows: np.ndarray) -> np.ndarray:
    return np.sqrt(np.maximum(rows * rows @ problem.mass, 0.0))


def _pairings(problem: Problem, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return (a * b) @ problem.mass


def conjugate_series(problem: Problem, traj: Trajectory) -> np.ndarray:
    """phi*(xi^k) for k = 1..K, warm-started at the subgradient points (cached on the trajectory)"""
    if "phi_star_xi" not in traj.cache:
        points = traj.subgradient_points()
        traj.cache["phi_star_xi"] = np.array(
            [problem.conjugate(traj.subgradients[k], hint=points[k]) for k in range(traj.steps)])
    return traj.cache["phi_star_xi"]


def young_residual(problem: Problem, xi: np.ndarray, u: np.ndarray, hint: Optional[np.ndarray] = None) -> float:
    """|(xi, u)_H - phi(u) - phi*(xi)|; zero iff xi is a subgradient of phi at u"""
    xi, u = problem.vector(xi), problem.vector(u)
    return abs(problem.inner(xi, u) - problem.evaluate(u) - problem.conjugate(xi, hint=u if hint is None else hint))


def energy_report(problem: Problem, traj: Trajectory, tol: float = 0.1,
                  identity_tol: float = 1e-9) -> DiagnosticsReport:
    """
    Discrete energy equality.

    energy_residual: R_k = |1/2|u^k|^2 + sum tau (xi^j, u^j) - 1/2|u0|^2 - sum tau (f^{j-1}, u^j)|
    with left-endpoint sums; the scheme makes R_k equal to the numerical
    dissipation sum 1/2 |u^j - u^{j-1}|^2, first order in tau. Measured
    relative to the energy scale of the run.
    trapezoid_residual: the same balance with (u^j + u^{j-1})/2 in the
    pairings, exact up to roundoff for this scheme.
    """
    tau = traj.tau
    U = traj.states
    half_sq = 0.5 * _norms(problem, U) ** 2
    dissip_pair = tau * _pairings(problem, traj.subgradients, U[1:])
    force_pair = tau * _pairings(problem, traj.forcing, U[1:])
    mid = 0.5 * (U[1:] + U[:-1])
    dissip_mid = tau * _pairings(problem, traj.subgradients, mid)
    force_mid = tau * _pairings(problem, traj.forcing, mid)

    left = np.concatenate([[0.0], half_sq[1:] + np.cumsum(dissip_pair) - half_sq[0] - np.cumsum(force_pair)])
    trap = np.concatenate([[0.0], half_sq[1:] + np.cumsum(dissip_mid) - half_sq[0] - np.cumsum(force_mid)])
    jumps = 0.5 * _norms(problem, U[1:] - U[:-1]) ** 2
    numerical_dissipation = np.concatenate([[0.0], np.cumsum(jumps)])

    scale = 1.0 + half_sq[0] + float(np.sum(np.abs(dissip_pair))) + float(np.sum(np.abs(force_pair)))
    R = np.abs(left)
    report = DiagnosticsReport("energy")
    report.add("energy_residual", float(np.max(R)) / scale, tol)
    report.add("discrete_identity", float(np.max(np.abs(R - numerical_dissipation))) / scale, identity_tol)
    report.add("trapezoid_residual", float(np.max(np.abs(trap))) / scale, identity_tol)
    report.details["energy_residual"] = R
    report.details["trapezoid_residual"] = np.abs(trap)
    report.details["max_residual"] = np.array([float(np.max(R))])
    return report


def subdiff_residual(problem: Problem, traj: Trajectory, tol: float = 1e-8) -> DiagnosticsReport:
    """Per step |(xi^k, u^k) - phi(u^k) - phi*(xi^k)| / (1 + |(xi^k, u^k)|)"""
    points = traj.subgradient_points()
    conj = conjugate_series(problem, traj)
    residuals = np.empty(traj.steps)
    for k in range(traj.steps):
        pair = problem.inner(traj.subgradients[k], points[k])
        residuals[k] = abs(pair - problem.evaluate(points[k]) - conj[k]) / (1.0 + abs(pair))
    report = DiagnosticsReport("young_equality")
    report.add("young_residual", float(np.max(residuals)) if residuals.size else 0.0, tol)
    report.details["young_residual"] = residuals
    return report


def scheme_identity_residual(traj: Trajectory, tol: float = 1e-12) -> DiagnosticsReport:
    """max_k |u^k - u^{k-1} + tau xi^k - tau f^{k-1}|_inf, in units of the state size"""
    defect = traj.states[1:] - traj.states[:-1] + traj.tau * (traj.subgradients - traj.forcing)
    scale = 1.0 + float(np.max(np.abs(traj.states)))
    per_step = np.max(np.abs(defect), axis=1) / scale if traj.steps else np.zeros(0)
    report = DiagnosticsReport("scheme_identity")
    report.add("scheme_identity", float(np.max(per_step)) if per_step.size else 0.0, tol)
    report.details["scheme_identity"] = per_step
    return report


def stability_report(problem: Problem, traj: Trajectory, tol: float = 1e-10) -> DiagnosticsReport:
    """
    For f = 0: |u^k| non-increasing and the (regularised) energy non-increasing.
    Always: 1/2|u^k|^2 - 1/2|u^{k-1}|^2 <= tau (f^{k-1} - xi^k, u^k).
    """
    report = DiagnosticsReport("stability")
    U = traj.states
    norms = _norms(problem, U)
    if not np.any(traj.forcing):
        growth = (norms[1:] - norms[:-1]) / (1.0 + norms[:-1])
        report.add("nonexpansive_decay", max(float(np.max(growth)), 0.0) if growth.size else 0.0, tol)
        if traj.scheme == YOSIDA_FLOW:
            energies = np.array([problem.evaluate(y) for y in traj.resolvents])
            energies = energies + 0.5 * traj.lam * _norms(problem, traj.subgradients) ** 2
            energies = np.concatenate([[np.nan], energies])
        else:
            energies = np.array([problem.evaluate(u) for u in U])
        finite = energies[~np.isnan(energies)]
        if finite.size >= 2:
            rise = (finite[1:] - finite[:-1]) / (1.0 + np.abs(finite[:-1]))
            report.add("energy_dissipation", max(float(np.max(rise)), 0.0), tol)
        report.details["energy"] = energies
    lhs = 0.5 * norms[1:] ** 2 - 0.5 * norms[:-1] ** 2
    rhs = traj.tau * _pairings(problem, traj.forcing - traj.subgradients, U[1:])
    excess = (lhs - rhs) / (1.0 + 0.5 * norms[:-1] ** 2)
    report.add("chain_rule_inequality", max(float(np.max(excess)), 0.0) if excess.size else 0.0, tol)
    return report


@dataclass
class FlowData:
    """Initial state and forcing of one run"""

    u0: np.ndarray
    forcing: Forcing = field(default_factory=Forcing.zero)


def continuous_dependence_check(problem: Problem, data1: FlowData, data2: FlowData, tau: float, T: float,
                                tol: float = 1e-8) -> DiagnosticsReport:
    """
    max_k |e^k|^2 + sum tau (xi1 - xi2, e^k) <= 2 (|e^0|^2 + (sum tau |f1 - f2|)^2)
    with e = u1 - u2, plus per-step monotonicity (xi1 - xi2, e^k) >= 0.
    """
    t1 = solve_implicit_euler(problem, data1.u0, data1.forcing, tau, T)
    t2 = solve_implicit_euler(problem, data2.u0, data2.forcing, tau, T)
    e = t1.states - t2.states
    dxi = t1.subgradients - t2.subgradients
    monotone = _pairings(problem, dxi, e[1:])
    lhs = float(np.max(_norms(problem, e) ** 2)) + tau * float(np.sum(monotone))
    F = tau * float(np.sum(_norms(problem, t1.forcing - t2.forcing)))
    rhs = 2.0 * (float(_norms(problem, e[:1])[0]) ** 2 + F * F)
    scale = _norms(problem, dxi) * _norms(problem, e[1:])
    report = DiagnosticsReport("continuous_dependence")
    report.add("dependence_bound", max(lhs - rhs, 0.0) / (1.0 + rhs), tol)
    worst = float(np.max(-monotone / (1.0 + scale))) if monotone.size else 0.0
    report.add("monotonicity", max(worst, 0.0), tol)
    report.details["dependence"] = np.array([lhs, rhs])
    report.details["monotonicity"] = monotone
    return report


@dataclass
class LambdaStudy:
    table: pd.DataFrame
    report: DiagnosticsReport


def lambda_convergence_study(problem: Problem, u0: Union[GridFunction, np.ndarray], f: Optional[Forcing],
                             lambda_schedule: Sequence[float], tau: float, T: float,
                             tol: float = 1e-8, growth_factor: float = 1.1,
                             growth_slack: float = 0.01) -> LambdaStudy:
    """
    Yosida flows along a lambda schedule against the implicit-Euler reference.

    Columns: lambda, distance (sup_k |u_lambda^k - u^k|_H), sup_norm
    (sup_k |u_lambda^k|_H), phi_J (sum tau phi(J u)), phi_star_A (sum tau
    phi*(A u)), lambda_A2 (lambda sum tau |A u|^2) and ratio_to_first (largest
    of the three over the same figure at the largest lambda).

    Checks:
        estimate_bound: the three a-priori quantities stay below the data bound
            1/2|u0|^2 + F (|u0| + F), F = sum tau |f^k|, which does not depend on lambda
        estimate_growth: the largest of the three never exceeds growth_factor
            times its value at the largest lambda, up to growth_slack (1 + bound)
        sup_norm_growth: the same rule for sup_k |u_lambda^k|_H
        distance_monotone: the distance to the reference shrinks with lambda
    """
    if not lambda_schedule:
        raise ValueError("lambda schedule must be nonempty")
    u0v = problem.vector(u0)
    reference = solve_implicit_euler(problem, u0v, f, tau, T)
    rows = []
    for lam in lambda_schedule:
        traj = solve_yosida_flow(problem, u0v, f, lam, tau, T)
        distance = float(np.max(_norms(problem, traj.states - reference.states)))
        sup_norm = float(np.max(_norms(problem, traj.states)))
        phi_J = tau * sum(problem.evaluate(y) for y in traj.resolvents)
        phi_star = tau * float(np.sum(conjugate_series(problem, traj)))
        lam_A2 = lam * tau * float(np.sum(_norms(problem, traj.subgradients) ** 2))
        rows.append({"lambda": float(lam), "distance": distance, "sup_norm": sup_norm, "phi_J": phi_J,
                     "phi_star_A": phi_star, "lambda_A2": lam_A2})
    table = pd.DataFrame(rows, columns=["lambda", "distance", "sup_norm", "phi_J", "phi_star_A", "lambda_A2"])
    largest = table[["phi_J", "phi_star_A", "lambda_A2"]].to_numpy(dtype=float).max(axis=1)
    ref = int(np.argmax(table["lambda"].to_numpy()))
    table["ratio_to_first"] = largest / largest[ref] if largest[ref] > 0 else np.zeros_like(largest)

    norm0 = problem.norm(u0v)
    F = tau * float(np.sum(_norms(problem, reference.forcing)))
    bound = 0.5 * norm0 ** 2 + F * (norm0 + F)
    report = DiagnosticsReport("lambda_study")
    report.add("estimate_bound", max(float(np.max(largest)) - bound, 0.0) / (1.0 + bound), tol)
    excess = float(np.max(largest - growth_factor * largest[ref]))
    report.add("estimate_growth", max(excess, 0.0) / (1.0 + bound), growth_slack)
    sup_norms = table["sup_norm"].to_numpy()
    excess = float(np.max(sup_norms - growth_factor * sup_norms[ref]))
    report.add("sup_norm_growth", max(excess, 0.0) / (1.0 + norm0), growth_slack)
    order = np.argsort(-table["lambda"].to_numpy())
    dist = table["distance"].to_numpy()[order]
    increases = int(np.sum(np.diff(dist) > tol * (1.0 + dist[:-1]))) if dist.size > 1 else 0
    report.add("distance_monotone", increases, 0)
    report.details["estimate_bound"] = np.array([bound])
    return LambdaStudy(table, report)


def energy_refinement_study(problem: Problem, u0: Union[GridFunction, np.ndarray], f: Optional[Forcing],
                            tau: float, T: float, levels: int = 3, scheme: str = IMPLICIT_EULER,
                            lam: Optional[float] = None,
                            ratio_range: Tuple[float, float] = (1.5, 2.5)) -> Tuple[pd.DataFrame, DiagnosticsReport]:
    """
    Max energy residual for tau, tau/2, ... and the successive ratios, which a
    first-order scheme keeps near 2.
    """
    if levels < 2:
        raise ValueError("a refinement study needs at least 2 levels")
    rows = []
    for level in range(levels):
        t = tau / 2 ** level
        if scheme == YOSIDA_FLOW:
            traj = solve_yosida_flow(problem, u0, f, lam, t, T)
        else:
            traj = solve_implicit_euler(problem, u0, f, t, T)
        energy = energy_report(problem, traj)
        rows.append({"tau": t, "max_residual": float(energy.details["max_residual"][0])})
    table = pd.DataFrame(rows, columns=["tau", "max_residual"])
    residuals = table["max_residual"].to_numpy()
    with np.errstate(divide="ignore", invalid="ignore"):
        ratios = residuals[:-1] / residuals[1:]
    table["ratio"] = np.concatenate([[np.nan], ratios])
    report = DiagnosticsReport("energy_refinement")
    lo, hi = ratio_range
    if np.all(residuals == 0.0):
        report.add("first_order_ratio", 0.0, 0.0, passed=True, detail="zero residual at every level")
    else:
        worst = float(np.max(np.abs(ratios - 2.0))) if np.all(np.isfinite(ratios)) else math.inf
        inside = bool(np.all(np.isfinite(ratios)) and np.all((ratios >= lo) & (ratios <= hi)))
        report.add("first_order_ratio", worst, max(2.0 - lo, hi - 2.0), passed=inside)
    report.details["ratios"] = ratios
    return table, report


def trajectory_frame(problem: Problem, traj: Trajectory) -> pd.DataFrame:
    """Export table k,t,norm_u,phi_u,phi_star_xi,pairing_xi_u,energy_residual (xi^0 := 0)"""
    energy = energy_report(problem, traj).details["energy_residual"]
    points = traj.subgradient_points()
    conj = conjugate_series(problem, traj)
    phi_star = np.concatenate([[0.0], conj])
    pair = np.concatenate([[0.0], _pairings(problem, traj.subgradients, points)])
    return pd.DataFrame({
        "k": np.arange(traj.steps + 1),
        "t": traj.times,
        "norm_u": _norms(problem, traj.states),
        "phi_u": [problem.evaluate(u) for u in traj.states],
        "phi_star_xi": phi_star,
        "pairing_xi_u": pair,
        "energy_residual": energy,
    })
