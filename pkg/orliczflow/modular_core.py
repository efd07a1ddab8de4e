"""
Modular Core
Discrete modular spaces over quadrature grids: modular functionals, Luxemburg
norms, conjugate modulars, the weighted pairing and inequality checkers.
"""
import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy import optimize

from config import Config
from orliczflow.diagnostics import DiagnosticsReport
from orliczflow.phi_library import (
    ConjugateUnboundedError,
    PhiSpec,
    conjugate_argmax,
    conjugate_eval,
    eval_phi,
    is_capped,
)

ModularValue = float


class GridMismatchError(ValueError):
    """Two grid functions (or a function and a grid) do not live on the same grid"""


@dataclass(eq=False)
class Grid:
    """
    Uniform tensor grid on an interval or rectangle with trapezoid weights.

    Nodes are ordered row-major (first coordinate slowest). `boundary_trace`
    lists the bulk indices of the boundary nodes; `boundary_weights` is the
    quadrature of the boundary measure on those nodes (counting measure in 1-D,
    arc length in 2-D).
    """

    dim: int
    shape: Tuple[int, ...]
    extents: Tuple[Tuple[float, float], ...]
    spacing: Tuple[float, ...]
    nodes: np.ndarray
    weights: np.ndarray
    boundary_mask: np.ndarray
    boundary_trace: Optional[np.ndarray] = None
    boundary_weights: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.dim not in (1, 2):
            raise ValueError(f"dim must be 1 or 2, got {self.dim}")
        if not np.all(self.weights > 0):
            raise ValueError("quadrature weights must be positive")
        if self.boundary_trace is not None:
            if len(np.unique(self.boundary_trace)) != len(self.boundary_trace):
                raise ValueError("boundary trace map must be injective")

    @property
    def size(self) -> int:
        return int(self.weights.shape[0])

    @property
    def measure(self) -> float:
        return float(np.prod([b - a for a, b in self.extents]))

    @property
    def has_trace(self) -> bool:
        return self.boundary_trace is not None and len(self.boundary_trace) > 0

    def same_as(self, other: "Grid") -> bool:
        return self is other or (self.shape == other.shape and self.extents == other.extents)

    def zeros(self) -> "GridFunction":
        return GridFunction(self, np.zeros(self.size))

    def sample(self, fn: Callable[..., np.ndarray]) -> "GridFunction":
        """Evaluate fn(x) (1-D) or fn(x, y) (2-D) at the nodes"""
        coords = [self.nodes[:, d] for d in range(self.dim)]
        return GridFunction(self, np.broadcast_to(np.asarray(fn(*coords), dtype=float), (self.size,)).copy())


def _trapezoid(n: int, h: float) -> np.ndarray:
    w = np.full(n, h)
    w[0] = w[-1] = h / 2.0
    return w


def uniform_grid_1d(n: int, a: float = 0.0, b: float = 1.0) -> Grid:
    if n < 3:
        raise ValueError(f"need at least 3 nodes, got {n}")
    if not b > a:
        raise ValueError("empty interval")
    x = np.linspace(a, b, n)
    h = (b - a) / (n - 1)
    mask = np.zeros(n, dtype=bool)
    mask[[0, -1]] = True
    return Grid(
        dim=1, shape=(n,), extents=((float(a), float(b)),), spacing=(h,),
        nodes=x[:, None], weights=_trapezoid(n, h), boundary_mask=mask,
        boundary_trace=np.array([0, n - 1]), boundary_weights=np.ones(2),
    )


def uniform_grid_2d(nx: int, ny: int, x_range: Tuple[float, float] = (0.0, 1.0),
                    y_range: Tuple[float, float] = (0.0, 1.0)) -> Grid:
    if nx < 3 or ny < 3:
        raise ValueError(f"need at least 3 nodes per dimension, got {nx}x{ny}")
    (ax, bx), (ay, by) = x_range, y_range
    hx, hy = (bx - ax) / (nx - 1), (by - ay) / (ny - 1)
    X, Y = np.meshgrid(np.linspace(ax, bx, nx), np.linspace(ay, by, ny), indexing="ij")
    weights = np.outer(_trapezoid(nx, hx), _trapezoid(ny, hy)).ravel()
    edge_x = np.zeros((nx, ny), dtype=bool)
    edge_x[[0, -1], :] = True
    edge_y = np.zeros((nx, ny), dtype=bool)
    edge_y[:, [0, -1]] = True
    mask = (edge_x | edge_y).ravel()
    # half of each adjacent perimeter segment
    bw = np.zeros((nx, ny))
    bw[[0, -1], :] += _trapezoid(ny, hy)
    bw[:, [0, -1]] += _trapezoid(nx, hx)[:, None]
    trace = np.flatnonzero(mask)
    return Grid(
        dim=2, shape=(nx, ny), extents=((float(ax), float(bx)), (float(ay), float(by))),
        spacing=(hx, hy), nodes=np.column_stack([X.ravel(), Y.ravel()]), weights=weights,
        boundary_mask=mask, boundary_trace=trace, boundary_weights=bw.ravel()[trace],
    )


def single_node_grid(weight: float = 1.0) -> Grid:
    """One-node grid: the scalar problem embedded as a grid function"""
    return Grid(
        dim=1, shape=(1,), extents=((0.0, float(weight)),), spacing=(float(weight),),
        nodes=np.zeros((1, 1)), weights=np.array([float(weight)]),
        boundary_mask=np.zeros(1, dtype=bool),
    )


@dataclass(eq=False)
class GridFunction:
    grid: Grid
    values: np.ndarray = field(repr=False)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.values.shape != (self.grid.size,):
            raise GridMismatchError(f"values have shape {self.values.shape}, grid has {self.grid.size} nodes")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("grid function values must be finite")

    def with_values(self, values: np.ndarray) -> "GridFunction":
        return GridFunction(self.grid, values)

    def __add__(self, other: "GridFunction") -> "GridFunction":
        return self.with_values(self.values + _values_on(self.grid, other))

    def __sub__(self, other: "GridFunction") -> "GridFunction":
        return self.with_values(self.values - _values_on(self.grid, other))

    def __mul__(self, c: float) -> "GridFunction":
        return self.with_values(float(c) * self.values)

    __rmul__ = __mul__


FieldLike = Union[GridFunction, np.ndarray, Sequence[float]]


def _values_on(grid: Grid, v: FieldLike) -> np.ndarray:
    if isinstance(v, GridFunction):
        if not v.grid.same_as(grid):
            raise GridMismatchError("grid function lives on a different grid")
        return v.values
    arr = np.asarray(v, dtype=float)
    if arr.shape != (grid.size,):
        raise GridMismatchError(f"array of shape {arr.shape} does not match grid of {grid.size} nodes")
    return arr


def _check_spec(grid: Grid, spec: PhiSpec):
    size = spec.field_size
    if size is not None and size != grid.size:
        raise GridMismatchError(f"coefficient fields have {size} entries, grid has {grid.size} nodes")


def modular(grid: Grid, spec: PhiSpec, v: FieldLike) -> ModularValue:
    """Quadrature sum of M(x_i, v_i); +inf if any term saturates"""
    _check_spec(grid, spec)
    values = np.asarray(eval_phi(spec, None, _values_on(grid, v)))
    if np.any(is_capped(values)):
        return math.inf
    return float(np.dot(grid.weights, values))


def conjugate_modular(grid: Grid, spec: PhiSpec, y: FieldLike) -> ModularValue:
    """
    Pointwise-conjugate quadrature sum of M*(x_i, y_i).

    Raises:
        ConjugateUnboundedError: a nodal conjugate could not be bounded
    """
    _check_spec(grid, spec)
    values = np.asarray(conjugate_eval(spec, None, _values_on(grid, y)))
    if np.any(is_capped(values)):
        return math.inf
    return float(np.dot(grid.weights, values))


def pairing(y: GridFunction, v: GridFunction) -> float:
    """Weighted L2 pairing sum w_i y_i v_i (the extended duality in finite dimensions)"""
    if not y.grid.same_as(v.grid):
        raise GridMismatchError("pairing of functions on different grids")
    return float(np.dot(y.grid.weights, y.values * v.values))


def luxemburg_gauge(fn: Callable[[float], float], tol: Optional[float] = None,
                    max_iter: Optional[int] = None) -> float:
    """
    inf{lam > 0 : fn(lam) <= 1} for a non-increasing modular-of-scaled-argument map.

    Brackets by doubling/halving from lam = 1, then bisects to relative tol and
    returns the upper end, so that fn(result) <= 1 always.
    """
    tol = Config.LUXEMBURG_RTOL if tol is None else tol
    max_iter = Config.LUXEMBURG_MAX_ITER if max_iter is None else max_iter
    if not tol > 0:
        raise ValueError("tol must be > 0")

    def g(lam: float) -> float:
        try:
            return fn(lam)
        except ConjugateUnboundedError:
            return math.inf

    lo = hi = 1.0
    if g(1.0) > 1.0:
        for _ in range(2100):
            hi *= 2.0
            if g(hi) <= 1.0:
                break
            lo = hi
    else:
        for _ in range(2100):
            lo /= 2.0
            if lo == 0.0:
                return 0.0
            if g(lo) > 1.0:
                break
            hi = lo
    for _ in range(max_iter):
        if hi - lo <= tol * hi:
            break
        mid = 0.5 * (lo + hi)
        if g(mid) <= 1.0:
            hi = mid
        else:
            lo = mid
    return hi


def luxemburg_norm(grid: Grid, spec: PhiSpec, v: FieldLike, tol: Optional[float] = None) -> float:
    values = _values_on(grid, v)
    if not np.any(values):
        return 0.0
    return luxemburg_gauge(lambda lam: modular(grid, spec, values / lam), tol)


def lux_norm_conj(grid: Grid, spec: PhiSpec, y: FieldLike, tol: Optional[float] = None) -> float:
    values = _values_on(grid, y)
    if not np.any(values):
        return 0.0
    return luxemburg_gauge(lambda lam: conjugate_modular(grid, spec, values / lam), tol)


def fenchel_young_gap(grid: Grid, spec: PhiSpec, y: FieldLike, v: FieldLike) -> float:
    """modular(v) + conjugate_modular(y) - pairing(y, v); zero iff y_i is a subgradient at v_i"""
    yv, vv = _values_on(grid, y), _values_on(grid, v)
    total = modular(grid, spec, vv) + conjugate_modular(grid, spec, yv)
    if math.isinf(total):
        return math.inf
    return total - float(np.dot(grid.weights, yv * vv))


def check_holder(grid: Grid, spec: PhiSpec, pairs: Iterable[Tuple[FieldLike, FieldLike]],
                 slack: float = 1e-9) -> DiagnosticsReport:
    """|pairing(y, v)| <= 2 ||y||_conj ||v|| on every pair"""
    report = DiagnosticsReport("holder")
    worst, violations, count = 0.0, 0, 0
    ratios: List[float] = []
    for y, v in pairs:
        yv, vv = _values_on(grid, y), _values_on(grid, v)
        lhs = abs(float(np.dot(grid.weights, yv * vv)))
        rhs = 2.0 * lux_norm_conj(grid, spec, yv) * luxemburg_norm(grid, spec, vv)
        excess = (lhs - rhs) / max(1.0, rhs)
        worst = max(worst, excess)
        violations += int(excess > slack)
        ratios.append(lhs / rhs if rhs > 0 else 0.0)
        count += 1
    report.add("holder_max_excess", max(worst, 0.0), slack)
    report.add("holder_violations", violations, 0)
    report.details["holder_ratio"] = np.asarray(ratios)
    report.details["pairs"] = np.array([count])
    return report


def _amemiya_bound(grid: Grid, spec: PhiSpec, yv: np.ndarray, k0: float) -> Tuple[float, float]:
    """min_k (1 + conj_modular(k y)) / k, searched in log k around k0; returns (bound, k)"""
    def objective(logk: float) -> float:
        k = math.exp(logk)
        try:
            return (1.0 + conjugate_modular(grid, spec, k * yv)) / k
        except ConjugateUnboundedError:
            return math.inf

    centre = math.log(k0)
    ks = centre + np.linspace(-3.0, 3.0, 25)
    vals = np.array([objective(lk) for lk in ks])
    j = int(np.argmin(vals))
    lo, hi = ks[max(j - 1, 0)], ks[min(j + 1, len(ks) - 1)]
    if hi > lo:
        res = optimize.minimize_scalar(objective, bounds=(lo, hi), method="bounded", options={"xatol": 1e-10})
        if res.fun < vals[j]:
            return float(res.fun), math.exp(float(res.x))
    return float(vals[j]), math.exp(float(ks[j]))


def check_dual_sandwich(grid: Grid, spec: PhiSpec, y: FieldLike, n_trials: int = 100,
                        rng: Optional[np.random.Generator] = None, tol: float = 1e-8) -> DiagnosticsReport:
    """
    ||y||_conj <= sup{pairing(y, x) : ||x|| <= 1} <= 2 ||y||_conj.

    The sup is estimated from below over sign patterns, coordinate vectors,
    random draws and the Young-equality witnesses x = argmax(k y) along a
    search in k. The report also carries the Amemiya-type upper bound
    min_k (1 + conj_modular(k y)) / k of the same dual norm.
    """
    rng = np.random.default_rng(Config.DEFAULT_SEED) if rng is None else rng
    yv = _values_on(grid, y)
    report = DiagnosticsReport("dual_sandwich")
    nstar = lux_norm_conj(grid, spec, yv)
    if nstar == 0.0:
        report.add("lower", 0.0, tol)
        report.add("upper", 0.0, tol)
        report.details["norms"] = np.zeros(3)
        return report

    best = 0.0

    def consider(x: np.ndarray):
        nonlocal best
        if not np.any(x):
            return
        nx = luxemburg_norm(grid, spec, x)
        if nx > 0:
            best = max(best, abs(float(np.dot(grid.weights, yv * x))) / nx)

    consider(np.sign(yv))
    order = np.argsort(-np.abs(yv))[: min(grid.size, 64)]
    for i in order:
        e = np.zeros(grid.size)
        e[i] = 1.0
        consider(e)
    for _ in range(n_trials):
        consider(rng.standard_normal(grid.size))
    for scale in np.exp(np.linspace(-1.0, 1.0, 9)):
        consider(np.asarray(conjugate_argmax(spec, None, scale * yv / nstar)))
    upper_bound, k_best = _amemiya_bound(grid, spec, yv, 1.0 / nstar)
    consider(np.asarray(conjugate_argmax(spec, None, k_best * yv)))

    report.add("lower", max(0.0, nstar - best) / nstar, tol)
    report.add("upper", max(0.0, best - 2.0 * nstar) / nstar, tol)
    report.add("amemiya_upper", max(0.0, upper_bound - 2.0 * nstar) / nstar, tol)
    report.add("sup_below_amemiya", max(0.0, best - upper_bound) / nstar, tol)
    report.details["norms"] = np.array([nstar, best, upper_bound])
    return report


def check_norm_modular_relations(grid: Grid, spec: PhiSpec, v: FieldLike, tol: float = 1e-10) -> DiagnosticsReport:
    """||v|| < 1 => phi(v) <= ||v||;  ||v|| > 1 => phi(v) >= ||v||;  phi(v/||v||) <= 1"""
    vv = _values_on(grid, v)
    report = DiagnosticsReport("norm_modular")
    norm = luxemburg_norm(grid, spec, vv)
    value = modular(grid, spec, vv)
    if norm < 1.0:
        report.add("below_one", max(0.0, value - norm), tol)
    elif norm > 1.0:
        report.add("above_one", max(0.0, norm - value), tol)
    else:
        report.add("at_one", 0.0, tol)
    unit = modular(grid, spec, vv / norm) if norm > 0 else 0.0
    report.add("unit_ball", max(0.0, unit - 1.0), tol)
    report.details["norm_modular"] = np.array([norm, value])
    return report


def conjugate_superlinearity(grid: Grid, spec: PhiSpec, y: FieldLike,
                             ts: Sequence[float] = (1.0, 10.0, 100.0, 1000.0)) -> DiagnosticsReport:
    """conj_modular(t y) / t is non-decreasing in t and strictly grows over the sweep"""
    yv = _values_on(grid, y)
    ratios = []
    for t in ts:
        try:
            ratios.append(conjugate_modular(grid, spec, t * yv) / t)
        except ConjugateUnboundedError:
            ratios.append(math.inf)
    ratios = np.asarray(ratios)
    report = DiagnosticsReport("conjugate_superlinearity")
    with np.errstate(invalid="ignore"):
        drops = int(np.sum(np.diff(ratios) < -1e-12 * np.maximum(1.0, np.abs(ratios[:-1]))))
    report.add("non_decreasing", drops, 0)
    grew = not np.any(yv) or ratios[-1] > ratios[0]
    report.add("grows", 0.0 if grew else 1.0, 0.0)
    report.details["ratios"] = ratios
    return report
