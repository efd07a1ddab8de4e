"""
Mollify Lab
Time mollifier T_n, the Jensen inequality for sub-Markovian averaging and the
chain rule 1/2|u(t)|^2 - 1/2|u(s)|^2 = int_s^t (du/dt, u) checked on
trajectories and manufactured paths.
"""
import math
from dataclasses import dataclass
from typing import Callable, Optional, Sequence, Union

import numpy as np
from scipy import integrate, ndimage

from orliczflow.convex_ops import Problem
from orliczflow.diagnostics import DiagnosticsReport
from orliczflow.flow_solver import Trajectory


class MollifierResolutionError(ValueError):
    """The time grid is too coarse for the requested mollifier scale"""


def _bump(t: np.ndarray) -> np.ndarray:
    t = np.asarray(t, dtype=float)
    inside = np.abs(t) < 1.0
    out = np.zeros_like(t)
    out[inside] = np.exp(-1.0 / (1.0 - t[inside] ** 2))
    return out


_BUMP_MASS, _ = integrate.quad(lambda s: math.exp(-1.0 / (1.0 - s * s)), -1.0, 1.0, epsabs=1e-14, epsrel=1e-13)


@dataclass(frozen=True)
class MollifierKernel:
    """n * rho(n t) with rho the normalised bump exp(-1/(1-t^2)) on (-1, 1)"""

    n: float

    def __post_init__(self):
        if not self.n > 0:
            raise ValueError(f"mollifier scale n must be > 0, got {self.n}")

    @staticmethod
    def profile(t: Union[float, np.ndarray]) -> np.ndarray:
        return _bump(t) / _BUMP_MASS

    def scaled(self, t: Union[float, np.ndarray]) -> np.ndarray:
        return self.n * self.profile(self.n * np.asarray(t, dtype=float))

    @property
    def radius(self) -> float:
        return 1.0 / self.n

    def weights(self, dt: float) -> np.ndarray:
        """Discrete convolution weights on a grid of step dt, normalised to sum 1"""
        if dt > 1.0 / (4.0 * self.n):
            raise MollifierResolutionError(f"time step {dt} is coarser than 1/(4n) = {1.0 / (4.0 * self.n)}")
        m = int(math.floor(self.radius / dt))
        w = self.scaled(dt * np.arange(-m, m + 1)) * dt
        return w / w.sum()

    def check_properties(self, tol: float = 1e-10) -> DiagnosticsReport:
        report = DiagnosticsReport("mollifier_kernel")
        mass, _ = integrate.quad(lambda s: float(self.scaled(s)), -self.radius, self.radius,
                                 epsabs=1e-14, epsrel=1e-13)
        report.add("normalization", abs(mass - 1.0), tol)
        t = np.linspace(-1.5 * self.radius, 1.5 * self.radius, 1001)
        values = self.scaled(t)
        report.add("nonnegative", max(0.0, -float(np.min(values))), 0.0)
        report.add("even", float(np.max(np.abs(values - self.scaled(-t)))), tol)
        outside = np.abs(t) >= self.radius
        report.add("support", float(np.max(np.abs(values[outside]))), 0.0)
        return report


def _uniform_step(times: np.ndarray) -> float:
    times = np.asarray(times, dtype=float)
    steps = np.diff(times)
    if steps.size == 0 or np.any(np.abs(steps - steps[0]) > 1e-9 * max(1.0, abs(steps[0]))):
        raise ValueError("mollification needs a uniform time grid")
    return float(steps[0])


def mollify(path: np.ndarray, times: Sequence[float], n: float) -> np.ndarray:
    """
    (T_n v)(t) = n int_0^T v(s) rho((t - s) n) ds on the sample times, with
    v extended by zero outside [0, T]. `path` has time along axis 0.

    Raises:
        MollifierResolutionError: dt > 1/(4n)
    """
    weights = MollifierKernel(n).weights(_uniform_step(np.asarray(times)))
    return ndimage.convolve1d(np.asarray(path, dtype=float), weights, axis=0, mode="constant", cval=0.0)


def interior_mask(times: Sequence[float], n: float) -> np.ndarray:
    """Sample times in [1/n, T - 1/n], where the kernel support stays inside [0, T]"""
    rel = np.asarray(times, dtype=float) - float(times[0])
    eps = 1e-12 * max(1.0, float(rel[-1]))
    return (rel >= 1.0 / n - eps) & (rel <= rel[-1] - 1.0 / n + eps)


def sub_markov_check(signal: np.ndarray, times: Sequence[float], n: float, tol: float = 1e-12) -> DiagnosticsReport:
    """0 <= v <= 1 => 0 <= T_n v <= 1, and |T_n v|_L1 <= |v|_L1"""
    signal = np.asarray(signal, dtype=float)
    smoothed = mollify(signal, times, n)
    dt = _uniform_step(np.asarray(times))
    report = DiagnosticsReport("sub_markov")
    if np.all((signal >= 0.0) & (signal <= 1.0)):
        report.add("order_interval", max(0.0, -float(np.min(smoothed)), float(np.max(smoothed)) - 1.0), tol)
    l1 = dt * float(np.sum(np.abs(signal)))
    report.add("l1_contraction", max(0.0, dt * float(np.sum(np.abs(smoothed))) - l1), tol * (1.0 + l1))
    return report


def jensen_check(problem: Problem, path: np.ndarray, times: Sequence[float], n: float,
                 alphas: Sequence[float] = (0.25, 0.5, 1.0), tol: float = 1e-9) -> DiagnosticsReport:
    """phi(alpha (T_n u)(t)) <= T_n[phi(alpha u)](t) at interior times, for each alpha"""
    path = np.asarray(path, dtype=float)
    mask = interior_mask(times, n)
    smoothed = mollify(path, times, n)
    report = DiagnosticsReport("jensen")
    for alpha in alphas:
        energies = np.array([problem.evaluate(alpha * u) for u in path])
        finite = np.isfinite(energies)
        averaged = mollify(np.where(finite, energies, 0.0), times, n)
        # right-hand side is +inf wherever the stencil touches a saturated state
        unbounded = mollify((~finite).astype(float), times, n) > 0
        residuals = np.zeros(len(path))
        for i in np.flatnonzero(mask & ~unbounded):
            lhs = problem.evaluate(alpha * smoothed[i])
            residuals[i] = (lhs - averaged[i]) / (1.0 + abs(averaged[i]))
        name = f"jensen_alpha_{alpha:g}"
        report.add(name, max(0.0, float(np.max(residuals[mask]))) if np.any(mask) else 0.0, tol)
        report.details[name] = residuals
    return report


@dataclass
class ManufacturedPath:
    """A prescribed path u(t) on sample times, optionally with its exact time derivative"""

    times: np.ndarray
    states: np.ndarray
    derivatives: Optional[np.ndarray] = None


def manufactured_path(times: Sequence[float], g: Callable[[np.ndarray], np.ndarray],
                      dg: Callable[[np.ndarray], np.ndarray], w: np.ndarray) -> ManufacturedPath:
    """u(t) = g(t) w with exact derivative g'(t) w"""
    times = np.asarray(times, dtype=float)
    w = np.asarray(w, dtype=float)
    return ManufacturedPath(times, np.outer(g(times), w), np.outer(dg(times), w))


def chain_rule_check(problem: Problem, source: Union[Trajectory, ManufacturedPath],
                     tol: float = 0.1) -> DiagnosticsReport:
    """
    sup_t |1/2|u(t)|^2 - 1/2|u(0)|^2 - int_0^t (du/dt, u)| relative to the energy scale.

    Trajectories use du/dt = f - xi from the step relation, paired with u^k
    on each step; manufactured paths integrate the exact derivative by the
    trapezoid rule, or use backward differences when no derivative is given.
    """
    if isinstance(source, Trajectory):
        U = source.states
        rates = source.forcing - source.subgradients
        increments = source.tau * (rates * U[1:]) @ problem.mass
    else:
        U = source.states
        dt = np.diff(source.times)
        if source.derivatives is not None:
            P = (source.derivatives * U) @ problem.mass
            increments = 0.5 * dt * (P[1:] + P[:-1])
        else:
            increments = ((U[1:] - U[:-1]) * U[1:]) @ problem.mass
    half_sq = 0.5 * (U * U) @ problem.mass
    integral = np.concatenate([[0.0], np.cumsum(increments)])
    residuals = np.abs(half_sq - half_sq[0] - integral)
    scale = 1.0 + half_sq[0] + float(np.sum(np.abs(increments)))
    report = DiagnosticsReport("chain_rule")
    report.add("chain_rule_residual", float(np.max(residuals)) / scale, tol)
    report.details["chain_rule_residual"] = residuals
    report.details["max_residual"] = np.array([float(np.max(residuals))])
    return report
