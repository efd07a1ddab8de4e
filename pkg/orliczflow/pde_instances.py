"""
PDE Instances
Constructors assembling Problem records for the application families:
reaction-diffusion, zero-order Musielak-Orlicz, Musielak-Orlicz-Sobolev,
dynamic boundary conditions and the classical p-growth baseline.
"""
import math
from dataclasses import dataclass
from typing import Any, Dict, List, Optional, Tuple

import numpy as np
from scipy import linalg

from orliczflow.convex_ops import GradientOperator, NodalTerm, Problem
from orliczflow.diagnostics import DiagnosticsReport
from orliczflow.modular_core import Grid, uniform_grid_1d, uniform_grid_2d, single_node_grid
from orliczflow.phi_library import Family, PhiSpec, subdiff

FAMILIES = ("reaction_diffusion", "zero_order", "musielak_sobolev", "dynamic_boundary", "classical_variational")


@dataclass
class InstanceConfig:
    """
    Geometry, energy pieces and boundary treatment of one application instance.

    `M`, `N` and `M_boundary` are PhiSpec descriptions (see
    PhiSpec.from_description). M acts on the gradient magnitude for the
    gradient families and on u itself for zero_order and dynamic_boundary.
    `resolution == (1,)` builds the single-node grid.
    """

    family: str
    resolution: Tuple[int, ...] = (65,)
    extents: Tuple[Tuple[float, float], ...] = ((0.0, 1.0),)
    M: Optional[Dict[str, Any]] = None
    N: Optional[Dict[str, Any]] = None
    M_boundary: Optional[Dict[str, Any]] = None
    coercivity: Optional[Tuple[float, float]] = None

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(f"Unknown instance family {self.family!r}; expected one of {FAMILIES}")
        self.resolution = tuple(int(n) for n in self.resolution)
        self.extents = tuple((float(a), float(b)) for a, b in self.extents)
        if self.resolution != (1,):
            if len(self.resolution) not in (1, 2) or len(self.extents) != len(self.resolution):
                raise ValueError("resolution and extents must both describe a 1-D or 2-D box")
            if min(self.resolution) < 3:
                raise ValueError("need at least 3 nodes per dimension")

    @property
    def boundary(self) -> str:
        if self.family == "dynamic_boundary":
            return "dynamic"
        if self.family == "zero_order":
            return "none"
        return "dirichlet"

    def make_grid(self) -> Grid:
        if self.resolution == (1,):
            return single_node_grid()
        if len(self.resolution) == 1:
            (a, b), = self.extents
            return uniform_grid_1d(self.resolution[0], a, b)
        return uniform_grid_2d(self.resolution[0], self.resolution[1], self.extents[0], self.extents[1])


def _require(desc: Optional[Dict[str, Any]], name: str, family: str) -> Dict[str, Any]:
    if desc is None:
        raise ValueError(f"{family}: energy piece {name} is required")
    return desc


def _sample_spec(problem_grid: Grid, desc: Dict[str, Any]) -> PhiSpec:
    return PhiSpec.from_description(desc, problem_grid.nodes)


def _exponent_range(spec: PhiSpec) -> Optional[Tuple[float, float]]:
    if spec.family is Family.QUADRATIC:
        return 2.0, 2.0
    if spec.family in (Family.POWER, Family.WEIGHTED):
        return spec.p, spec.p
    if spec.family is Family.VARIABLE_EXPONENT:
        return float(np.min(spec.p_field)), float(np.max(spec.p_field))
    if spec.family is Family.DOUBLE_PHASE:
        return spec.p, spec.q
    return None


def _is_quadratic(spec: PhiSpec) -> bool:
    rng = _exponent_range(spec)
    return spec.family is not Family.DOUBLE_PHASE and rng == (2.0, 2.0)


def _power_lower_constant(spec: PhiSpec) -> Optional[Tuple[float, float]]:
    """(c, s) with M(x, z) >= c |z|^s for all z, when such a bound is read off the family"""
    if spec.family is Family.QUADRATIC:
        return 0.5, 2.0
    if spec.family is Family.POWER:
        return (1.0 / spec.p if spec.normalized else 1.0), spec.p
    if spec.family is Family.WEIGHTED:
        return float(np.min(spec.w_field)), spec.p
    if spec.family in (Family.DOUBLE_PHASE, Family.ORLICZ_EXP):
        return 1.0, spec.p
    return None


def quadratic_eigenpairs(problem: Problem) -> Tuple[np.ndarray, np.ndarray]:
    """
    Generalized eigenpairs K v = mu M v of a quadratic energy on the free nodes.

    Returns:
        (mu ascending, vectors of shape (N, k)) with H-normalized columns and
        zeros on pinned nodes
    """
    free = problem.free
    K = problem.hessian(np.zeros(problem.size)).toarray()[np.ix_(free, free)]
    mu, vecs = linalg.eigh(K, np.diag(problem.mass[free]))
    full = np.zeros((problem.size, len(free)))
    full[free] = vecs
    return mu, full


def _default_coercivity(problem: Problem) -> Optional[Tuple[float, float]]:
    specs = [t.spec for t in problem.nodal_terms]
    if problem.gradient_spec is not None:
        specs.append(problem.gradient_spec)
    if specs and all(_is_quadratic(s) for s in specs) and problem.size <= 600:
        mu, _ = quadratic_eigenpairs(problem)
        if mu.size and mu[0] > 0:
            # phi(u) = u^T K u / 2 >= mu_min ||u||_H^2 / 2
            return 0.5 * float(mu[0]) * (1.0 - 1e-10), 2.0
    bounds = [_power_lower_constant(t.spec) for t in problem.nodal_terms]
    if not bounds or any(b is None for b in bounds):
        return None
    exponents = {b[1] for b in bounds}
    if len(exponents) != 1:
        return None
    s = exponents.pop()
    if s < 2.0:
        return None
    covered = np.zeros(problem.size, dtype=bool)
    for term in problem.nodal_terms:
        covered[term.nodes] = True
    if not np.all(covered[problem.free]):
        return None
    # Holder on each term, then the power-mean inequality across terms
    total_mass = float(np.sum(problem.mass))
    k = len(bounds)
    ratios = [float(np.min(t.weights / problem.mass[t.nodes])) for t in problem.nodal_terms]
    c = min(b[0] * r for b, r in zip(bounds, ratios))
    return c * (total_mass * k) ** (1.0 - s / 2.0), s


def _finish(problem: Problem, cfg: InstanceConfig) -> Problem:
    problem.coercivity = tuple(cfg.coercivity) if cfg.coercivity is not None else _default_coercivity(problem)
    return problem


def _gradient_problem(cfg: InstanceConfig, M_desc: Dict[str, Any], N_desc: Optional[Dict[str, Any]],
                      name: str) -> Problem:
    grid = cfg.make_grid()
    if grid.size == 1:
        raise ValueError(f"{cfg.family}: gradient energies need a 1-D or 2-D grid")
    gradient = GradientOperator(grid)
    M = _sample_spec(grid, M_desc).map_fields(lambda f: gradient.to_samples @ f)
    if M.has_kink:
        raise ValueError(f"{cfg.family}: the gradient energy M must be differentiable; kinked terms belong in N")
    terms = []
    if N_desc is not None:
        terms.append(NodalTerm(_sample_spec(grid, N_desc), np.arange(grid.size), grid.weights.copy(), "N"))
    return Problem(
        grid=grid,
        mass=grid.weights.copy(),
        pinned=grid.boundary_mask.copy(),
        nodal_terms=tuple(terms),
        gradient_spec=M,
        gradient=gradient,
        name=name,
    )


def _check_exponents_at_least_two(spec: PhiSpec, label: str):
    rng = _exponent_range(spec)
    if rng is not None and rng[0] < 2.0:
        raise ValueError(f"reaction_diffusion: {label} needs exponent >= 2, got {rng[0]}")


def make_reaction_diffusion(cfg: InstanceConfig) -> Problem:
    """phi(u) = sum_s w M(|grad u|) + sum_i w N(u), homogeneous Dirichlet, p, q >= 2"""
    M_desc = _require(cfg.M, "M", cfg.family)
    N_desc = _require(cfg.N, "N", cfg.family)
    problem = _gradient_problem(cfg, M_desc, N_desc, "reaction_diffusion")
    _check_exponents_at_least_two(problem.gradient_spec, "M")
    _check_exponents_at_least_two(problem.nodal_terms[0].spec, "N")
    return _finish(problem, cfg)


def make_zero_order(cfg: InstanceConfig) -> Problem:
    """Nodewise-decoupled phi(u) = sum_i w_i M(x_i, u_i); the resolvent is the pointwise prox"""
    grid = cfg.make_grid()
    M = _sample_spec(grid, _require(cfg.M, "M", cfg.family))
    problem = Problem(
        grid=grid,
        mass=grid.weights.copy(),
        pinned=np.zeros(grid.size, dtype=bool),
        nodal_terms=(NodalTerm(M, np.arange(grid.size), grid.weights.copy(), "M"),),
        name="zero_order",
    )
    return _finish(problem, cfg)


def make_musielak_sobolev(cfg: InstanceConfig) -> Problem:
    """phi(u) = sum N(x, u) + sum M(x, |grad u|) with the split xi = xi1 - div xi2"""
    problem = _gradient_problem(cfg, _require(cfg.M, "M", cfg.family), cfg.N, "musielak_sobolev")
    return _finish(problem, cfg)


def make_dynamic_boundary(cfg: InstanceConfig) -> Problem:
    """
    Bulk + boundary energy 1/2 sum |grad u|^2 + sum M(x, u) + sum_Gamma M_Gamma(y, u).

    The boundary unknowns are the boundary nodes of the bulk grid; H carries
    the product weights (bulk trapezoid + boundary quadrature on trace nodes).
    """
    grid = cfg.make_grid()
    if not grid.has_trace:
        raise ValueError("dynamic_boundary: geometry has no boundary trace map")
    M = _sample_spec(grid, _require(cfg.M, "M", cfg.family))
    trace = grid.boundary_trace
    M_gamma = PhiSpec.from_description(_require(cfg.M_boundary, "M_boundary", cfg.family), grid.nodes[trace])
    mass = grid.weights.copy()
    mass[trace] += grid.boundary_weights
    problem = Problem(
        grid=grid,
        mass=mass,
        pinned=np.zeros(grid.size, dtype=bool),
        nodal_terms=(
            NodalTerm(M, np.arange(grid.size), grid.weights.copy(), "M"),
            NodalTerm(M_gamma, trace.copy(), grid.boundary_weights.copy(), "M_boundary"),
        ),
        gradient_spec=PhiSpec(Family.QUADRATIC),
        quadratic_gradient=True,
        name="dynamic_boundary",
    )
    return _finish(problem, cfg)


def make_classical_variational(cfg: InstanceConfig) -> Problem:
    """p-growth baseline: sum w |grad u|^p / p under homogeneous Dirichlet (p = 2 is the heat equation)"""
    M_desc = dict(cfg.M) if cfg.M is not None else {"family": "power", "p": 2.0}
    if M_desc.get("family") == "power":
        M_desc.setdefault("normalized", True)
    problem = _gradient_problem(cfg, M_desc, cfg.N, "classical_variational")
    return _finish(problem, cfg)


_BUILDERS = {
    "reaction_diffusion": make_reaction_diffusion,
    "zero_order": make_zero_order,
    "musielak_sobolev": make_musielak_sobolev,
    "dynamic_boundary": make_dynamic_boundary,
    "classical_variational": make_classical_variational,
}


def build_problem(cfg: InstanceConfig) -> Problem:
    return _BUILDERS[cfg.family](cfg)


def check_growth_conditions(problem: Problem, r_samples: Optional[np.ndarray] = None) -> DiagnosticsReport:
    """
    Sampled polynomial bounds y r >= c1 min(r^p-, r^p+) and |y| <= c2 (1 + r^(p+ - 1))
    for y in the subdifferential of each power-type piece.
    """
    r = np.logspace(-2, 2, 81) if r_samples is None else np.asarray(r_samples, dtype=float)
    report = DiagnosticsReport("growth")
    pieces: List[Tuple[str, PhiSpec, int]] = [(t.label, t.spec, t.spec.field_size or 1) for t in problem.nodal_terms]
    if problem.gradient_spec is not None:
        spec = problem.gradient_spec
        pieces.append(("grad", spec, spec.field_size or 1))
    for label, spec, count in pieces:
        bounds = _exponent_range(spec)
        if bounds is None:
            continue
        lo, hi = bounds
        xs = range(count) if spec.field_size is not None else [None]
        c1, c2 = math.inf, 0.0
        for xi in xs:
            y = np.asarray(subdiff(spec, xi, r).upper)
            c1 = min(c1, float(np.min(y * r / np.minimum(r ** lo, r ** hi))))
            c2 = max(c2, float(np.max(np.abs(y) / (1.0 + r ** (hi - 1.0)))))
        report.add(f"{label}_lower", 0.0 if c1 > 0 else 1.0, 0.0)
        report.add(f"{label}_upper", 0.0 if math.isfinite(c2) else 1.0, 0.0)
        report.details[f"{label}_constants"] = np.array([c1, c2])
    return report
