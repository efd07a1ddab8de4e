"""
Diagnostics
Named residuals with tolerances and pass/fail verdicts, shared by every checker.
"""
import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional

import numpy as np


@dataclass
class Residual:
    name: str
    value: float
    tolerance: float
    passed: bool
    detail: str = ""

    def to_line(self) -> str:
        return f"{self.name},{_fmt(self.value)},{_fmt(self.tolerance)},{'pass' if self.passed else 'FAIL'}"


def _fmt(value: float) -> str:
    if value is None or (isinstance(value, float) and math.isnan(value)):
        return "nan"
    if math.isinf(value):
        return "inf" if value > 0 else "-inf"
    return f"{value:.6e}"


@dataclass
class DiagnosticsReport:
    """
    Collection of named residuals.

    A residual passes when value <= tolerance unless the caller decides the
    verdict explicitly (e.g. for ratio or range checks). `details` holds
    per-time-step or per-sample arrays for export.
    """

    title: str = "diagnostics"
    residuals: List[Residual] = field(default_factory=list)
    details: Dict[str, np.ndarray] = field(default_factory=dict)

    def add(self, name: str, value: float, tolerance: float, passed: Optional[bool] = None,
            detail: str = "") -> Residual:
        value = float(value)
        tolerance = float(tolerance)
        if passed is None:
            passed = (not math.isnan(value)) and value <= tolerance
        residual = Residual(name, value, tolerance, bool(passed), detail)
        self.residuals.append(residual)
        return residual

    def merge(self, other: "DiagnosticsReport", prefix: Optional[str] = None) -> "DiagnosticsReport":
        prefix = other.title if prefix is None else prefix
        for r in other.residuals:
            name = f"{prefix}.{r.name}" if prefix else r.name
            self.residuals.append(Residual(name, r.value, r.tolerance, r.passed, r.detail))
        for key, arr in other.details.items():
            self.details[f"{prefix}.{key}" if prefix else key] = arr
        return self

    @property
    def passed(self) -> bool:
        return all(r.passed for r in self.residuals)

    def first_failure(self) -> Optional[Residual]:
        for r in self.residuals:
            if not r.passed:
                return r
        return None

    def get(self, name: str) -> Residual:
        for r in self.residuals:
            if r.name == name:
                return r
        raise KeyError(name)

    def to_lines(self) -> List[str]:
        return ["name,value,tolerance,pass"] + [r.to_line() for r in self.residuals]

    def to_text(self) -> str:
        return "\n".join(self.to_lines()) + "\n"

    def summary(self) -> str:
        failed = [r for r in self.residuals if not r.passed]
        if not failed:
            return f"✅ {self.title}: {len(self.residuals)} checks passed"
        return f"❌ {self.title}: {len(failed)}/{len(self.residuals)} checks failed (first: {failed[0].name})"
