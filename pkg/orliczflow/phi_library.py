"""
Phi Library
Catalog of generalized strong Phi-functions M(x, z): evaluation, subdifferentials,
convex conjugates, pointwise proximal maps and empirical doubling-condition probes.

Every family is convex, even and continuous in z with M(x, 0) = 0 and superlinear
growth. Coefficient fields (p(x), a(x), w(x)) are arrays aligned with the nodes of
the grid the spec was sampled on; `x` arguments index into them, `x=None` means
"the whole field, aligned with z".
"""
import math
from dataclasses import dataclass, replace
from enum import Enum
from typing import Any, Callable, Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
from scipy import optimize

from config import Config
from orliczflow.diagnostics import DiagnosticsReport

ArrayLike = Union[float, np.ndarray]
PointIndex = Optional[Union[int, np.ndarray]]

_EXP_LIMIT = math.log(Config.SATURATION_CAP)


class Family(str, Enum):
    QUADRATIC = "quadratic"
    POWER = "power"
    VARIABLE_EXPONENT = "variable_exponent"
    DOUBLE_PHASE = "double_phase"
    ORLICZ_EXP = "orlicz_exp"
    LLOGL = "llogl"
    WEIGHTED = "weighted"


class ProxConvergenceError(RuntimeError):
    """Raised when the scalar prox equation does not converge; carries the last bracket"""

    def __init__(self, message: str, bracket: Tuple[np.ndarray, np.ndarray]):
        super().__init__(message)
        self.bracket = bracket


class ConjugateUnboundedError(ArithmeticError):
    """The numerical sup of yz - M(x, z) ran past the saturation cap"""


@dataclass(frozen=True, eq=False)
class PhiSpec:
    """
    Declarative description of a generalized strong Phi-function.

    Families and their parameters:
        quadratic          z^2 / 2
        power              |z|^p           (|z|^p / p when normalized)
        variable_exponent  |z|^p(x)        p_field
        double_phase       |z|^p + a(x)|z|^q
        orlicz_exp         exp(|z|^p) - 1  (p >= 1, kink at 0 when p == 1)
        llogl              (|z|+1) ln(|z|+1) - |z|
        weighted           w(x) |z|^p
    """

    family: Family
    p: Optional[float] = None
    q: Optional[float] = None
    normalized: bool = False
    p_field: Optional[np.ndarray] = None
    a_field: Optional[np.ndarray] = None
    w_field: Optional[np.ndarray] = None

    def __post_init__(self):
        object.__setattr__(self, "family", Family(self.family))
        for name in ("p_field", "a_field", "w_field"):
            value = getattr(self, name)
            if value is not None:
                object.__setattr__(self, name, np.asarray(value, dtype=float))
        self._validate()

    def _validate(self):
        fam = self.family
        if fam in (Family.POWER, Family.WEIGHTED):
            if self.p is None or not self.p > 1:
                raise ValueError(f"{fam.value}: exponent must satisfy p > 1, got {self.p}")
        if fam is Family.WEIGHTED:
            if self.w_field is None or not np.all(self.w_field > 0):
                raise ValueError("weighted: w(x) must be given and strictly positive")
        if fam is Family.VARIABLE_EXPONENT:
            if self.p_field is None:
                raise ValueError("variable_exponent: p_field is required")
            if not np.all(np.isfinite(self.p_field)) or not np.min(self.p_field) > 1:
                raise ValueError("variable_exponent: need 1 < p- <= p+ < inf")
        if fam is Family.DOUBLE_PHASE:
            if self.p is None or self.q is None or not (1 < self.p < self.q):
                raise ValueError(f"double_phase: need 1 < p < q, got p={self.p}, q={self.q}")
            if self.a_field is None or not np.all(self.a_field >= 0):
                raise ValueError("double_phase: a(x) must be given and non-negative")
        if fam is Family.ORLICZ_EXP:
            if self.p is None or not self.p >= 1:
                raise ValueError(f"orlicz_exp: exponent must satisfy p >= 1, got {self.p}")

    def coefficient(self, name: str, x: PointIndex) -> Optional[ArrayLike]:
        field = getattr(self, name)
        if field is None:
            return None
        if field.ndim == 0 or x is None:
            return field
        return field[x]

    @property
    def has_kink(self) -> bool:
        """True when M(x, .) is not differentiable at 0"""
        return self.family is Family.ORLICZ_EXP and self.p == 1

    @property
    def field_size(self) -> Optional[int]:
        for name in ("p_field", "a_field", "w_field"):
            field = getattr(self, name)
            if field is not None and field.ndim == 1:
                return int(field.shape[0])
        return None

    def map_fields(self, fn: Callable[[np.ndarray], np.ndarray]) -> "PhiSpec":
        """Return a copy whose coefficient fields are transformed by fn (e.g. node -> cell averaging)"""
        updates = {}
        for name in ("p_field", "a_field", "w_field"):
            field = getattr(self, name)
            if field is not None and field.ndim == 1:
                updates[name] = np.asarray(fn(field), dtype=float)
        return replace(self, **updates)

    def upper_exponent(self) -> Optional[float]:
        """p+ for power-type families (used by the doubling constant 2^{p+})"""
        if self.family is Family.VARIABLE_EXPONENT:
            return float(np.max(self.p_field))
        if self.family is Family.DOUBLE_PHASE:
            return float(self.q)
        if self.family in (Family.POWER, Family.WEIGHTED):
            return float(self.p)
        if self.family is Family.QUADRATIC:
            return 2.0
        return None

    def to_dict(self) -> Dict[str, Any]:
        out: Dict[str, Any] = {"family": self.family.value}
        for name in ("p", "q"):
            if getattr(self, name) is not None:
                out[name] = getattr(self, name)
        if self.normalized:
            out["normalized"] = True
        for name in ("p_field", "a_field", "w_field"):
            field = getattr(self, name)
            if field is not None:
                out[name] = field.tolist()
        return out

    @classmethod
    def from_description(cls, desc: Mapping[str, Any], points: np.ndarray) -> "PhiSpec":
        """
        Build a spec from a declarative description.

        Args:
            desc: {"family": ..., "p": ..., "q": ..., "normalized": ..., and field
                  sources "p_field" / "a" / "w"}; a field source is a number,
                  {"linear": [lo, hi]} (linear in the first coordinate),
                  {"csv": path} (one value per node, row-major) or a list
            points: node coordinates, shape (N, dim)
        """
        points = np.asarray(points, dtype=float)
        if points.ndim == 1:
            points = points[:, None]
        kwargs: Dict[str, Any] = {"family": Family(desc["family"])}
        for name in ("p", "q"):
            if desc.get(name) is not None:
                kwargs[name] = float(desc[name])
        kwargs["normalized"] = bool(desc.get("normalized", False))
        aliases = {"p_field": ("p_field",), "a_field": ("a_field", "a"), "w_field": ("w_field", "w")}
        for name, keys in aliases.items():
            for key in keys:
                if desc.get(key) is not None:
                    kwargs[name] = resolve_field(desc[key], points)
                    break
        return cls(**kwargs)


def resolve_field(source: Any, points: np.ndarray) -> np.ndarray:
    """Sample a coefficient field source on the given node coordinates"""
    n = points.shape[0]
    if isinstance(source, (int, float)):
        return np.full(n, float(source))
    if isinstance(source, Mapping):
        if "linear" in source:
            lo, hi = (float(v) for v in source["linear"])
            x = points[:, 0]
            span = float(x.max() - x.min())
            if span == 0.0:
                return np.full(n, lo)
            return lo + (hi - lo) * (x - x.min()) / span
        if "csv" in source:
            from utils.csv_io import read_field

            return read_field(source["csv"], n)
        raise ValueError(f"Unknown field source keys: {sorted(source)}")
    values = np.asarray(source, dtype=float)
    if values.shape != (n,):
        raise ValueError(f"Field has shape {values.shape}, expected ({n},)")
    return values


@dataclass
class SubdiffInterval:
    """Convex subdifferential of z -> M(x, z): the closed interval [lower, upper]"""

    lower: ArrayLike
    upper: ArrayLike

    def contains(self, y: ArrayLike, tol: float = 0.0) -> ArrayLike:
        return (np.asarray(y) >= np.asarray(self.lower) - tol) & (np.asarray(y) <= np.asarray(self.upper) + tol)

    def distance(self, y: ArrayLike) -> ArrayLike:
        y = np.asarray(y, dtype=float)
        return np.maximum(np.maximum(np.asarray(self.lower) - y, y - np.asarray(self.upper)), 0.0)


def _saturate(values: np.ndarray) -> np.ndarray:
    cap = Config.SATURATION_CAP
    return np.where(np.isfinite(values) & (values < cap), values, cap)


def _out(values: np.ndarray, *inputs: Any) -> ArrayLike:
    if all(np.ndim(v) == 0 for v in inputs) and np.ndim(values) == 0:
        return float(values)
    return values


def _power_scale(spec: PhiSpec, x: PointIndex) -> ArrayLike:
    """Coefficient c in c |z|^p for the pure power-type families"""
    if spec.family is Family.WEIGHTED:
        return spec.coefficient("w_field", x)
    if spec.family is Family.POWER and spec.normalized:
        return 1.0 / spec.p
    return 1.0


def _exponent(spec: PhiSpec, x: PointIndex) -> ArrayLike:
    if spec.family is Family.VARIABLE_EXPONENT:
        return spec.coefficient("p_field", x)
    return spec.p


def _values_abs(spec: PhiSpec, x: PointIndex, r: np.ndarray) -> np.ndarray:
    fam = spec.family
    with np.errstate(over="ignore", invalid="ignore"):
        if fam is Family.QUADRATIC:
            values = 0.5 * r ** 2
        elif fam in (Family.POWER, Family.VARIABLE_EXPONENT, Family.WEIGHTED):
            values = _power_scale(spec, x) * r ** _exponent(spec, x)
        elif fam is Family.DOUBLE_PHASE:
            values = r ** spec.p + spec.coefficient("a_field", x) * r ** spec.q
        elif fam is Family.ORLICZ_EXP:
            t = r ** spec.p
            values = np.where(t > _EXP_LIMIT, np.inf, np.expm1(np.minimum(t, _EXP_LIMIT)))
        elif fam is Family.LLOGL:
            values = (r + 1.0) * np.log1p(r) - r
        else:
            raise ValueError(f"Unknown family {fam}")
    return _saturate(np.asarray(values, dtype=float))


def _deriv_abs(spec: PhiSpec, x: PointIndex, r: np.ndarray) -> np.ndarray:
    """Right derivative of M(x, .) at r >= 0 (the upper end of the subdifferential)"""
    fam = spec.family
    r = np.asarray(r, dtype=float)
    with np.errstate(over="ignore", invalid="ignore"):
        if fam is Family.QUADRATIC:
            values = r.copy()
        elif fam in (Family.POWER, Family.VARIABLE_EXPONENT, Family.WEIGHTED):
            p = _exponent(spec, x)
            values = _power_scale(spec, x) * p * r ** (p - 1.0)
        elif fam is Family.DOUBLE_PHASE:
            a = spec.coefficient("a_field", x)
            values = spec.p * r ** (spec.p - 1.0) + a * spec.q * r ** (spec.q - 1.0)
        elif fam is Family.ORLICZ_EXP:
            t = r ** spec.p
            growth = np.where(t > _EXP_LIMIT, np.inf, np.exp(np.minimum(t, _EXP_LIMIT)))
            values = spec.p * r ** (spec.p - 1.0) * growth
        elif fam is Family.LLOGL:
            values = np.log1p(r)
        else:
            raise ValueError(f"Unknown family {fam}")
    return _saturate(np.asarray(values, dtype=float))


def _curvature_abs(spec: PhiSpec, x: PointIndex, r: np.ndarray) -> np.ndarray:
    """Second derivative of M(x, .) at r >= 0; +inf where it blows up (p < 2 at 0)"""
    fam = spec.family
    r = np.asarray(r, dtype=float)
    with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
        if fam is Family.QUADRATIC:
            values = np.ones_like(r)
        elif fam in (Family.POWER, Family.VARIABLE_EXPONENT, Family.WEIGHTED):
            p = _exponent(spec, x)
            values = _power_scale(spec, x) * p * (p - 1.0) * r ** (p - 2.0)
        elif fam is Family.DOUBLE_PHASE:
            a = spec.coefficient("a_field", x)
            values = (spec.p * (spec.p - 1.0) * r ** (spec.p - 2.0)
                      + a * spec.q * (spec.q - 1.0) * r ** (spec.q - 2.0))
        elif fam is Family.ORLICZ_EXP:
            p = spec.p
            t = r ** p
            growth = np.where(t > _EXP_LIMIT, np.inf, np.exp(np.minimum(t, _EXP_LIMIT)))
            if p == 1:
                values = growth
            else:
                values = growth * (p * (p - 1.0) * r ** (p - 2.0) + p * p * r ** (2.0 * p - 2.0))
        elif fam is Family.LLOGL:
            values = 1.0 / (1.0 + r)
        else:
            raise ValueError(f"Unknown family {fam}")
    values = np.asarray(values, dtype=float)
    return np.where(np.isnan(values), np.inf, values)


def eval_phi(spec: PhiSpec, x: PointIndex, z: ArrayLike) -> ArrayLike:
    """
    Evaluate M(x, z).

    Values beyond the saturation cap are returned as Config.SATURATION_CAP
    ("capped"); see is_capped.
    """
    values = _values_abs(spec, x, np.abs(np.asarray(z, dtype=float)))
    return _out(values, z)


def is_capped(value: ArrayLike) -> ArrayLike:
    """True where a value sits at the saturation sentinel"""
    return np.asarray(value) >= Config.SATURATION_CAP


def subdiff(spec: PhiSpec, x: PointIndex, z: ArrayLike) -> SubdiffInterval:
    """Convex subdifferential of z -> M(x, z) as an interval (degenerate at smooth points)"""
    z = np.asarray(z, dtype=float)
    slope = np.sign(z) * _deriv_abs(spec, x, np.abs(z))
    kink = _deriv_abs(spec, x, np.zeros_like(z))
    lower = np.where(z == 0, -kink, slope)
    upper = np.where(z == 0, kink, slope)
    return SubdiffInterval(lower=_out(lower, z), upper=_out(upper, z))


def second_derivative(spec: PhiSpec, x: PointIndex, z: ArrayLike) -> ArrayLike:
    """Curvature of M(x, .) at z"""
    values = _curvature_abs(spec, x, np.abs(np.asarray(z, dtype=float)))
    return _out(values, z)


def _element_index(x: PointIndex, i: int, spec: PhiSpec) -> PointIndex:
    if x is None:
        return i if spec.field_size is not None else None
    if np.ndim(x) == 0:
        return int(x)
    return int(np.asarray(x).ravel()[i])


def _closed_form_conjugate(spec: PhiSpec, x: PointIndex, s: np.ndarray) -> Optional[np.ndarray]:
    fam = spec.family
    with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
        if fam is Family.QUADRATIC:
            return 0.5 * s ** 2
        if fam in (Family.POWER, Family.VARIABLE_EXPONENT, Family.WEIGHTED):
            p = _exponent(spec, x)
            c = _power_scale(spec, x)
            # sup_r {s r - c r^p} = (1 - 1/p) s^{p'} (c p)^{-1/(p-1)}
            return (1.0 - 1.0 / p) * s ** (p / (p - 1.0)) * (c * p) ** (-1.0 / (p - 1.0))
        if fam is Family.LLOGL:
            return np.where(s > _EXP_LIMIT, np.inf, np.expm1(np.minimum(s, _EXP_LIMIT)) - s)
        if fam is Family.ORLICZ_EXP and spec.p == 1:
            safe = np.maximum(s, 1.0)
            return np.where(s <= 1.0, 0.0, safe * np.log(safe) - safe + 1.0)
    return None


def _closed_form_argmax(spec: PhiSpec, x: PointIndex, s: np.ndarray) -> Optional[np.ndarray]:
    fam = spec.family
    with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
        if fam is Family.QUADRATIC:
            return s.copy()
        if fam in (Family.POWER, Family.VARIABLE_EXPONENT, Family.WEIGHTED):
            p = _exponent(spec, x)
            return (s / (_power_scale(spec, x) * p)) ** (1.0 / (p - 1.0))
        if fam is Family.LLOGL:
            return np.expm1(np.minimum(s, _EXP_LIMIT))
        if fam is Family.ORLICZ_EXP and spec.p == 1:
            return np.where(s <= 1.0, 0.0, np.log(np.maximum(s, 1.0)))
    return None


def _bracket_maximiser(spec: PhiSpec, xi: PointIndex, s: float) -> float:
    """Smallest doubling Z with M'(x, Z) >= s, so the maximiser of s z - M lies in [0, Z]"""
    hi = 1.0
    while float(_deriv_abs(spec, xi, np.asarray(hi))) < s:
        hi *= 2.0
        if hi > 1e150 or (is_capped(_values_abs(spec, xi, np.asarray(hi))) and float(_deriv_abs(spec, xi, np.asarray(hi))) < s):
            raise ConjugateUnboundedError(f"sup of y z - M(x, z) for y={s} exceeds the saturation cap")
    return hi


def _numeric_argmax_scalar(spec: PhiSpec, xi: PointIndex, s: float) -> float:
    if s <= float(_deriv_abs(spec, xi, np.asarray(0.0))):
        return 0.0
    hi = _bracket_maximiser(spec, xi, s)
    return float(optimize.brentq(lambda z: float(_deriv_abs(spec, xi, np.asarray(z))) - s, 0.0, hi,
                                 xtol=1e-14, rtol=4 * np.finfo(float).eps, maxiter=500))


def _numeric_conjugate_scalar(spec: PhiSpec, xi: PointIndex, s: float, rtol: float) -> float:
    if s <= float(_deriv_abs(spec, xi, np.asarray(0.0))):
        return 0.0
    hi = _bracket_maximiser(spec, xi, s)

    def gain(z: float) -> float:
        return s * z - float(_values_abs(spec, xi, np.asarray(z)))

    golden = optimize.minimize_scalar(lambda z: -gain(z), bounds=(0.0, hi), method="bounded",
                                      options={"xatol": rtol * hi})
    root = _numeric_argmax_scalar(spec, xi, s)
    best = max(gain(float(golden.x)), gain(root), 0.0)
    if best >= Config.SATURATION_CAP:
        raise ConjugateUnboundedError(f"conjugate at y={s} exceeds the saturation cap")
    return best


def conjugate_eval(spec: PhiSpec, x: PointIndex, y: ArrayLike, method: str = "auto",
                   rtol: Optional[float] = None) -> ArrayLike:
    """
    Convex conjugate M*(x, y) = sup_z {y z - M(x, z)}.

    Args:
        method: "auto" (registered closed form when available), or "numeric"
                (bounded golden-section maximisation on a doubling bracket)

    Raises:
        ConjugateUnboundedError: the numerical sup ran past the saturation cap
    """
    rtol = Config.CONJUGATE_RTOL if rtol is None else rtol
    y_arr = np.asarray(y, dtype=float)
    s = np.abs(y_arr)
    if method == "auto":
        closed = _closed_form_conjugate(spec, x, s)
        if closed is not None:
            return _out(_saturate(np.asarray(closed, dtype=float)), y)
    elif method != "numeric":
        raise ValueError(f"Unknown conjugate method {method!r}")

    flat = s.ravel()
    values = np.empty_like(flat)
    for i, si in enumerate(flat):
        values[i] = _numeric_conjugate_scalar(spec, _element_index(x, i, spec), float(si), rtol)
    return _out(values.reshape(s.shape), y)


def conjugate_argmax(spec: PhiSpec, x: PointIndex, y: ArrayLike) -> ArrayLike:
    """Maximiser z of y z - M(x, z); equivalently a point with y in subdiff(spec, x, z)"""
    y_arr = np.asarray(y, dtype=float)
    s = np.abs(y_arr)
    closed = _closed_form_argmax(spec, x, s)
    if closed is None:
        flat = s.ravel()
        values = np.empty_like(flat)
        for i, si in enumerate(flat):
            values[i] = _numeric_argmax_scalar(spec, _element_index(x, i, spec), float(si))
        closed = values.reshape(s.shape)
    return _out(np.sign(y_arr) * closed, y)


def solve_prox_equation(deriv: Callable[[np.ndarray], np.ndarray],
                        curvature: Callable[[np.ndarray], np.ndarray],
                        v: ArrayLike,
                        lam: ArrayLike,
                        kink: ArrayLike = 0.0,
                        atol: Optional[float] = None,
                        max_iter: Optional[int] = None) -> np.ndarray:
    """
    Solve z + lam * D(z) = |v| on [0, |v|] elementwise and return sign(v) * z.

    D is the right derivative of an even convex nodal energy, evaluated on
    arrays aligned with v. An element is stuck at 0 when |v| <= lam * kink,
    i.e. when 0 lies in the subdifferential interval of the prox objective.
    Safeguarded Newton with bisection fallback on the bracket.

    Raises:
        ProxConvergenceError: not converged after max_iter iterations
    """
    atol = Config.PROX_ATOL if atol is None else atol
    max_iter = Config.PROX_MAX_ITER if max_iter is None else max_iter
    v = np.asarray(v, dtype=float)
    target = np.abs(v)
    lam = np.broadcast_to(np.asarray(lam, dtype=float), target.shape)
    kink = np.broadcast_to(np.asarray(kink, dtype=float), target.shape)
    if np.any(lam <= 0):
        raise ValueError("prox parameter lambda must be > 0")

    active = target > lam * kink
    lo = np.zeros_like(target)
    hi = target.copy()
    z = np.where(active, hi, 0.0)
    scale = np.maximum(1.0, target)
    eps = np.finfo(float).eps
    done = ~active
    for _ in range(max_iter + 1):
        with np.errstate(over="ignore", invalid="ignore"):
            h = z + lam * deriv(z) - target
        converged = np.abs(h) <= atol * scale
        done = done | ~active | converged
        if np.all(done):
            return np.sign(v) * z
        positive = h > 0
        hi = np.where(active & ~done & positive, z, hi)
        lo = np.where(active & ~done & ~positive, z, lo)
        with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
            slope = 1.0 + lam * curvature(z)
            newton = z - h / slope
        ok = np.isfinite(newton) & (newton > lo) & (newton < hi)
        z_new = np.where(ok, newton, 0.5 * (lo + hi))
        stalled = np.abs(z_new - z) <= 4 * eps * np.maximum(1.0, z)
        stalled = stalled | (hi - lo <= 4 * eps * scale)
        z = np.where(active & ~done, z_new, z)
        done = done | (active & stalled)
    bad = ~done
    raise ProxConvergenceError(
        f"prox equation did not converge at {int(bad.sum())} point(s) after {max_iter} iterations",
        (lo[bad], hi[bad]),
    )


def pointwise_prox(spec: PhiSpec, x: PointIndex, v: ArrayLike, lam: float,
                   atol: Optional[float] = None, max_iter: Optional[int] = None) -> ArrayLike:
    """
    argmin_z { M(x, z) + (z - v)^2 / (2 lam) }.

    Raises:
        ValueError: lam <= 0
        ProxConvergenceError: solver exhausted max_iter (carries the last bracket)
    """
    if not lam > 0:
        raise ValueError(f"lambda must be > 0, got {lam}")
    v_arr = np.asarray(v, dtype=float)
    kink = _deriv_abs(spec, x, np.zeros_like(v_arr))
    z = solve_prox_equation(lambda r: _deriv_abs(spec, x, r),
                            lambda r: _curvature_abs(spec, x, r),
                            v_arr, lam, kink=kink, atol=atol, max_iter=max_iter)
    return _out(z, v)


@dataclass
class DoublingReport:
    """Outcome of an empirical Delta_2 (or nabla_2, on the conjugate) probe"""

    condition: str
    holds: bool
    best_k: float
    witness: Optional[Tuple[Optional[int], float]]
    skipped: int = 0

    def summary(self) -> str:
        label = "Δ₂" if self.condition == "delta2" else "∇₂"
        if self.holds:
            return f"holds {label}, k = {self.best_k:.6g}"
        x, z = self.witness if self.witness else (None, float("nan"))
        return f"fails {label}, witness x={x}, z={z:.6g}"


def _default_samples(spec: PhiSpec, z_samples: Optional[Sequence[float]],
                     x_samples: Optional[Sequence[int]]) -> Tuple[np.ndarray, List[Optional[int]]]:
    if z_samples is None:
        lo, hi = Config.DELTA2_Z_RANGE
        z = np.logspace(math.log10(lo), math.log10(hi), Config.DELTA2_SAMPLES)
    else:
        z = np.asarray(z_samples, dtype=float)
    if x_samples is not None:
        xs: List[Optional[int]] = [int(i) for i in x_samples]
    elif spec.field_size is not None:
        xs = sorted(set(np.linspace(0, spec.field_size - 1, min(spec.field_size, 25)).astype(int).tolist()))
    else:
        xs = [None]
    return z, xs


def _doubling_probe(fn: Callable[[Optional[int], np.ndarray], np.ndarray], condition: str,
                    z: np.ndarray, xs: List[Optional[int]], ratio_limit: float) -> DoublingReport:
    best_k = 0.0
    skipped = 0
    for xi in xs:
        m1 = np.asarray(fn(xi, z), dtype=float)
        m2 = np.asarray(fn(xi, 2.0 * z), dtype=float)
        valid = (m1 > 0) & ~is_capped(m1)
        skipped += int(np.sum(~valid))
        with np.errstate(divide="ignore", invalid="ignore"):
            ratio = np.where(valid, m2 / np.where(valid, m1, 1.0), np.nan)
        ratio = np.where(valid & is_capped(m2), np.inf, ratio)
        bad = valid & ~(ratio <= ratio_limit)
        if np.any(bad):
            j = int(np.argmax(bad))
            return DoublingReport(condition, False, math.inf, (xi, float(z[j])), skipped)
        idx = np.flatnonzero(valid)
        if idx.size >= 2:
            end = idx[-1]
            earlier = idx[np.searchsorted(z[idx], z[end] / 10.0)]
            if earlier != end and ratio[end] > 1.1 * ratio[earlier]:
                return DoublingReport(condition, False, math.inf, (xi, float(z[end])), skipped)
        if idx.size:
            best_k = max(best_k, float(np.max(ratio[idx])))
    return DoublingReport(condition, True, best_k, None, skipped)


def check_delta2(spec: PhiSpec, z_samples: Optional[Sequence[float]] = None,
                 x_samples: Optional[Sequence[int]] = None,
                 ratio_limit: Optional[float] = None) -> DoublingReport:
    """
    Falsification probe for the strong doubling condition M(x, 2z) <= k M(x, z).

    Fails when the ratio exceeds ratio_limit, saturates, or keeps growing over
    the last sampled decade. Samples with M(x, z) = 0 are skipped.
    """
    z, xs = _default_samples(spec, z_samples, x_samples)
    limit = Config.DELTA2_RATIO_LIMIT if ratio_limit is None else ratio_limit
    return _doubling_probe(lambda xi, zz: _values_abs(spec, xi, zz), "delta2", z, xs, limit)


def check_nabla2(spec: PhiSpec, z_samples: Optional[Sequence[float]] = None,
                 x_samples: Optional[Sequence[int]] = None,
                 ratio_limit: Optional[float] = None) -> DoublingReport:
    """The Delta_2 probe applied to the conjugate M*"""
    z, xs = _default_samples(spec, z_samples, x_samples)
    limit = Config.DELTA2_RATIO_LIMIT if ratio_limit is None else ratio_limit

    def conj(xi: Optional[int], zz: np.ndarray) -> np.ndarray:
        try:
            return np.asarray(conjugate_eval(spec, xi, zz), dtype=float)
        except ConjugateUnboundedError:
            out = np.empty_like(zz)
            for i, zi in enumerate(zz):
                try:
                    out[i] = conjugate_eval(spec, xi, float(zi))
                except ConjugateUnboundedError:
                    out[i] = Config.SATURATION_CAP
            return out

    return _doubling_probe(conj, "nabla2", z, xs, limit)


def classify_regime(spec: PhiSpec) -> str:
    """'reflexive' (Delta_2 and nabla_2), 'delta2', 'nabla2' or 'neither'"""
    return _regime_label(check_delta2(spec).holds, check_nabla2(spec).holds)


def _regime_label(d2: bool, n2: bool) -> str:
    if d2 and n2:
        return "reflexive"
    if d2:
        return "delta2"
    if n2:
        return "nabla2"
    return "neither"


def check_phi_conditions(spec: PhiSpec, x_samples: Optional[Sequence[int]] = None,
                         tol: float = 1e-12) -> DiagnosticsReport:
    """
    Sampled verification of the strong Phi-function conditions:
    M(x,0)=0, evenness, growth, the epsilon bracket M(eps) <= 1 <= M(1/eps) and positivity off 0.
    """
    _, xs = _default_samples(spec, None, x_samples)
    z = np.linspace(-50.0, 50.0, 201)
    report = DiagnosticsReport("phi_conditions")
    zero = max(abs(float(eval_phi(spec, xi, 0.0))) for xi in xs)
    report.add("zero_at_origin", zero, tol)
    even = max(float(np.max(np.abs(np.asarray(eval_phi(spec, xi, z)) - np.asarray(eval_phi(spec, xi, -z)))))
               for xi in xs)
    report.add("evenness", even, tol)
    growth_ok = all(float(eval_phi(spec, xi, 1e6)) > 1e6 for xi in xs)
    report.add("superlinear_growth", 0.0 if growth_ok else 1.0, 0.0)
    eps_found = None
    for k in range(0, 61):
        eps = 2.0 ** (-k)
        if all(float(eval_phi(spec, xi, eps)) <= 1.0 and float(eval_phi(spec, xi, 1.0 / eps)) >= 1.0 for xi in xs):
            eps_found = eps
            break
    report.add("epsilon_condition", 0.0 if eps_found is not None else 1.0, 0.0)
    report.details["epsilon"] = np.array([eps_found if eps_found is not None else np.nan])
    positive = all(float(eval_phi(spec, xi, zz)) > 0 for xi in xs for zz in (1e-3, 1.0, 1e3))
    report.add("vanishes_only_at_zero", 0.0 if positive else 1.0, 0.0)
    return report


def check_phi_battery(spec: PhiSpec, rng: Optional[np.random.Generator] = None,
                      n_samples: Optional[int] = None, x_samples: Optional[Sequence[int]] = None,
                      tol: float = 1e-12) -> DiagnosticsReport:
    """
    Full sampled battery for one Phi-function.

    On top of check_phi_conditions: chord convexity, Fenchel-Young equality on
    subgradients and the inequality off them, stationarity of the pointwise
    prox, and the doubling conditions. Delta_2 / nabla_2 only fail the battery for
    power-type families, where both must hold with the Delta_2 constant at
    most 2^{p+}; otherwise they are recorded with the regime in the detail.
    """
    rng = np.random.default_rng(Config.DEFAULT_SEED) if rng is None else rng
    n = Config.PHI_BATTERY_SAMPLES if n_samples is None else n_samples
    _, xs = _default_samples(spec, None, x_samples)
    report = DiagnosticsReport("phi_battery")
    report.merge(check_phi_conditions(spec, x_samples, tol), prefix="")

    convexity = young_eq = young_ineq = stationarity = 0.0
    lam = 0.5
    for xi in xs:
        z1, z2 = rng.uniform(-2.0, 2.0, (2, n))
        t = rng.uniform(0.0, 1.0, n)
        chord = t * _values_abs(spec, xi, np.abs(z1)) + (1.0 - t) * _values_abs(spec, xi, np.abs(z2))
        mid = _values_abs(spec, xi, np.abs(t * z1 + (1.0 - t) * z2))
        convexity = max(convexity, float(np.max(np.maximum(mid - chord, 0.0) / (1.0 + chord))))

        m1 = _values_abs(spec, xi, np.abs(z1))
        y = np.asarray(subdiff(spec, xi, z1).upper)
        gap = m1 + np.asarray(conjugate_eval(spec, xi, y)) - y * z1
        young_eq = max(young_eq, float(np.max(np.abs(gap) / (1.0 + np.abs(y * z1)))))
        y_off = y + rng.uniform(-1.0, 1.0, n)
        gap_off = m1 + np.asarray(conjugate_eval(spec, xi, y_off)) - y_off * z1
        young_ineq = max(young_ineq, float(np.max(np.maximum(-gap_off, 0.0) / (1.0 + np.abs(y_off * z1)))))

        v = 2.0 * z2
        zp = np.asarray(pointwise_prox(spec, xi, v, lam))
        miss = lam * np.asarray(subdiff(spec, xi, zp).distance((v - zp) / lam))
        stationarity = max(stationarity, float(np.max(miss / np.maximum(1.0, np.abs(v)))))

    report.add("chord_convexity", convexity, tol)
    report.add("young_equality", young_eq, 1e-8)
    report.add("young_inequality", young_ineq, 1e-8)
    report.add("prox_stationarity", stationarity, 1e-10)

    d2 = check_delta2(spec, x_samples=x_samples)
    n2 = check_nabla2(spec, x_samples=x_samples)
    regime = _regime_label(d2.holds, n2.holds)
    upper = spec.upper_exponent()
    power_type = upper is not None
    report.add("delta2", 0.0 if d2.holds else 1.0, 0.0, passed=None if power_type else True,
               detail=f"{d2.summary()}; regime {regime}")
    report.add("nabla2", 0.0 if n2.holds else 1.0, 0.0, passed=None if power_type else True,
               detail=n2.summary())
    if power_type:
        report.add("delta2_constant", d2.best_k if d2.holds else math.inf, 2.0 ** upper * (1.0 + 1e-9))
    return report


def compare_phi(spec_a: PhiSpec, spec_b: PhiSpec, c2: float = 1.0,
                z_samples: Optional[Sequence[float]] = None,
                x_samples: Optional[Sequence[int]] = None) -> Dict[str, Any]:
    """
    Sampled test of M_a <= c1 M_b(x, c2 z) (the ordering M_a ⪯ M_b with h = 0).

    Returns:
        {"holds": bool, "c1": smallest admissible constant, "witness": (x, z) or None}
    """
    z, xs = _default_samples(spec_a, z_samples, x_samples)
    c1 = 0.0
    for xi in xs:
        ma = _values_abs(spec_a, xi, z)
        mb = _values_abs(spec_b, xi, c2 * z)
        if np.any((ma > 0) & (mb <= 0)) or np.any(is_capped(ma) & ~is_capped(mb)):
            j = int(np.argmax(((ma > 0) & (mb <= 0)) | (is_capped(ma) & ~is_capped(mb))))
            return {"holds": False, "c1": math.inf, "witness": (xi, float(z[j]))}
        ok = (mb > 0) & ~is_capped(mb)
        if np.any(ok):
            ratios = ma[ok] / mb[ok]
            if np.max(ratios) > Config.DELTA2_RATIO_LIMIT:
                j = int(np.flatnonzero(ok)[np.argmax(ratios)])
                return {"holds": False, "c1": math.inf, "witness": (xi, float(z[j]))}
            c1 = max(c1, float(np.max(ratios)))
    return {"holds": True, "c1": c1, "witness": None}
