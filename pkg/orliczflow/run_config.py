"""
Run Config
YAML run configurations validated with pydantic. Errors name the field path
and the YAML line they come from.
"""
import os
from typing import Any, Dict, List, Literal, Optional, Tuple

import numpy as np
import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from config import Config
from orliczflow.convex_ops import Problem
from orliczflow.flow_solver import Forcing, mode_shape
from orliczflow.pde_instances import FAMILIES, InstanceConfig, build_problem

SCHEMA_VERSION = 1


class ConfigError(ValueError):
    """Invalid run configuration; carries the field path and YAML line when known"""

    def __init__(self, message: str, path: str = "", line: Optional[int] = None):
        where = path or "<root>"
        if line is not None:
            where += f" (line {line})"
        super().__init__(f"{where}: {message}")
        self.path = path
        self.line = line


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid")


class InstanceSection(_Section):
    family: str
    resolution: List[int] = Field(default_factory=lambda: [65])
    extents: List[Tuple[float, float]] = Field(default_factory=lambda: [(0.0, 1.0)])
    M: Optional[Dict[str, Any]] = None
    N: Optional[Dict[str, Any]] = None
    M_boundary: Optional[Dict[str, Any]] = None
    coercivity: Optional[Tuple[float, float]] = None

    @field_validator("family")
    @classmethod
    def _known_family(cls, value: str) -> str:
        if value not in FAMILIES:
            raise ValueError(f"unknown family {value!r}; expected one of {', '.join(FAMILIES)}")
        return value

    @field_validator("resolution")
    @classmethod
    def _resolution(cls, value: List[int]) -> List[int]:
        if value != [1] and (not 1 <= len(value) <= 2 or min(value) < 3):
            raise ValueError("resolution must be [1] or 1-2 entries of at least 3 nodes")
        return value


class SolverSection(_Section):
    scheme: Literal["implicit_euler", "yosida_flow"] = "implicit_euler"
    tau: float = 0.01
    T: float = 0.2
    lam: Optional[float] = Field(default=None, alias="lambda")
    lambda_schedule: List[float] = Field(default_factory=lambda: [0.1, 0.01, 0.001])
    refinements: int = 1

    model_config = ConfigDict(extra="forbid", populate_by_name=True)

    @field_validator("tau", "T")
    @classmethod
    def _positive(cls, value: float) -> float:
        if not value > 0:
            raise ValueError("must be > 0")
        return value

    @field_validator("lambda_schedule")
    @classmethod
    def _schedule(cls, value: List[float]) -> List[float]:
        if not value:
            raise ValueError("schedule must be nonempty")
        if any(not v > 0 for v in value):
            raise ValueError("every lambda must be > 0")
        return value

    @model_validator(mode="after")
    def _lambda_for_yosida(self) -> "SolverSection":
        if self.scheme == "yosida_flow" and (self.lam is None or not self.lam > 0):
            raise ValueError("yosida_flow needs lambda > 0")
        return self


class DataSource(_Section):
    """preset: zero | constant | mode | random | bump, or csv: path"""

    preset: Optional[Literal["zero", "constant", "mode", "random", "bump"]] = None
    csv: Optional[str] = None
    value: float = 0.0
    amplitude: float = 1.0
    mode: int = 1
    frequency: float = 0.0

    @model_validator(mode="after")
    def _one_source(self) -> "DataSource":
        if (self.preset is None) == (self.csv is None):
            raise ValueError("give exactly one of preset or csv")
        return self


class DataSection(_Section):
    u0: DataSource = Field(default_factory=lambda: DataSource(preset="mode"))
    f: DataSource = Field(default_factory=lambda: DataSource(preset="zero"))


class CheckToggle(_Section):
    enabled: bool = True
    tol: Optional[float] = None
    trials: Optional[int] = None

    @field_validator("tol")
    @classmethod
    def _non_negative(cls, value: Optional[float]) -> Optional[float]:
        if value is not None and value < 0:
            raise ValueError("tolerance must be >= 0")
        return value


class ChecksSection(_Section):
    phi: CheckToggle = Field(default_factory=CheckToggle)
    modular: CheckToggle = Field(default_factory=CheckToggle)
    resolvent: CheckToggle = Field(default_factory=CheckToggle)
    energy: CheckToggle = Field(default_factory=CheckToggle)
    young: CheckToggle = Field(default_factory=CheckToggle)
    stability: CheckToggle = Field(default_factory=CheckToggle)
    dependence: CheckToggle = Field(default_factory=CheckToggle)
    mollifier: CheckToggle = Field(default_factory=CheckToggle)
    coercivity: CheckToggle = Field(default_factory=CheckToggle)


class OutputSection(_Section):
    directory: str = "run"
    plots: bool = True
    csv: bool = True
    states: bool = False


class NormSection(_Section):
    field: str
    spec: Optional[Dict[str, Any]] = None
    tol: float = 1e-10
    conjugate: bool = False


class ProxSection(_Section):
    spec: Dict[str, Any]
    v: List[float]
    lam: float = Field(alias="lambda")
    node: Optional[int] = None

    model_config = ConfigDict(extra="forbid", populate_by_name=True)


class ProbeSection(_Section):
    spec: Optional[Dict[str, Any]] = None
    z_range: Tuple[float, float] = Config.DELTA2_Z_RANGE
    samples: int = Config.DELTA2_SAMPLES
    nabla2: bool = True


class SweepSection(_Section):
    lambdas: List[float] = Field(default_factory=lambda: [0.1, 0.01])
    taus: List[float] = Field(default_factory=lambda: [0.02, 0.01])


class RunConfig(_Section):
    """One experiment: instance, solver, data, checks and output, plus per-command sections"""

    schema_version: int
    seed: int = Config.DEFAULT_SEED
    instance: Optional[InstanceSection] = None
    solver: SolverSection = Field(default_factory=SolverSection)
    data: DataSection = Field(default_factory=DataSection)
    checks: ChecksSection = Field(default_factory=ChecksSection)
    output: OutputSection = Field(default_factory=OutputSection)
    norm: Optional[NormSection] = None
    prox: Optional[ProxSection] = None
    probe: Optional[ProbeSection] = None
    sweep: Optional[SweepSection] = None
    source_path: Optional[str] = Field(default=None, exclude=True)

    @field_validator("schema_version")
    @classmethod
    def _version(cls, value: int) -> int:
        if value != SCHEMA_VERSION:
            raise ValueError(f"unsupported schema_version {value}, expected {SCHEMA_VERSION}")
        return value

    @property
    def base_dir(self) -> str:
        return os.path.dirname(os.path.abspath(self.source_path)) if self.source_path else os.getcwd()

    def resolve(self, path: str) -> str:
        return path if os.path.isabs(path) else os.path.join(self.base_dir, path)

    def instance_config(self) -> InstanceConfig:
        if self.instance is None:
            raise ConfigError("section is required for this command", "instance")
        section = self.instance
        return InstanceConfig(
            family=section.family,
            resolution=tuple(section.resolution),
            extents=tuple(section.extents),
            M=self._resolve_fields(section.M),
            N=self._resolve_fields(section.N),
            M_boundary=self._resolve_fields(section.M_boundary),
            coercivity=section.coercivity,
        )

    def _resolve_fields(self, desc: Optional[Dict[str, Any]]) -> Optional[Dict[str, Any]]:
        if desc is None:
            return None
        out = dict(desc)
        for key, value in desc.items():
            if isinstance(value, dict) and "csv" in value:
                out[key] = {"csv": self.resolve(value["csv"])}
        return out

    def build_problem(self) -> Problem:
        return build_problem(self.instance_config())

    def initial_state(self, problem: Problem) -> np.ndarray:
        src = self.data.u0
        grid = problem.grid
        if src.csv is not None:
            from utils.csv_io import read_grid_function

            u = read_grid_function(self.resolve(src.csv), grid).values.copy()
        elif src.preset == "zero":
            u = np.zeros(grid.size)
        elif src.preset == "constant":
            u = np.full(grid.size, src.value)
        elif src.preset == "mode":
            u = src.amplitude * mode_shape(grid, src.mode)
        elif src.preset == "random":
            u = problem.random_state(np.random.default_rng(self.seed), src.amplitude)
        else:
            u = src.amplitude * _bump_shape(grid)
        u[problem.pinned] = 0.0
        return u

    def forcing(self, problem: Problem) -> Forcing:
        src = self.data.f
        if src.csv is not None:
            from utils.csv_io import read_forcing_slices

            times, slices = read_forcing_slices(self.resolve(src.csv), problem.size)
            return Forcing.from_slices(times, slices)
        if src.preset == "zero":
            return Forcing.zero()
        if src.preset == "constant":
            return Forcing.constant(src.value)
        if src.preset == "mode":
            return Forcing.sine_mode(src.amplitude, src.mode, src.frequency)
        raise ConfigError(f"preset {src.preset!r} is not available for forcing", "data.f.preset")

    def tolerance(self, check: str, default: float) -> float:
        toggle: CheckToggle = getattr(self.checks, check)
        return default if toggle.tol is None else toggle.tol

    def trials(self, check: str, default: int) -> int:
        toggle: CheckToggle = getattr(self.checks, check)
        return default if toggle.trials is None else toggle.trials


def _bump_shape(grid) -> np.ndarray:
    shape = np.ones(grid.size)
    for d in range(grid.dim):
        a, b = grid.extents[d]
        if b > a:
            s = 2.0 * (grid.nodes[:, d] - a) / (b - a) - 1.0
            inside = np.abs(s) < 1.0
            part = np.zeros(grid.size)
            part[inside] = np.exp(1.0 - 1.0 / (1.0 - s[inside] ** 2))
            shape = shape * part
    return shape


def _line_index(node: yaml.Node, path: Tuple[Any, ...] = (), out: Optional[Dict[Tuple[Any, ...], int]] = None):
    """Map every key path of a composed YAML document to its 1-based line"""
    out = {} if out is None else out
    out[path] = node.start_mark.line + 1
    if isinstance(node, yaml.MappingNode):
        for key_node, value_node in node.value:
            key = key_node.value
            out[path + (key,)] = key_node.start_mark.line + 1
            _line_index(value_node, path + (key,), out)
    elif isinstance(node, yaml.SequenceNode):
        for i, item in enumerate(node.value):
            _line_index(item, path + (i,), out)
    return out


def _line_for(lines: Dict[Tuple[Any, ...], int], loc: Tuple[Any, ...]) -> Optional[int]:
    for cut in range(len(loc), -1, -1):
        key = tuple(str(p) if not isinstance(p, int) else p for p in loc[:cut])
        if key in lines:
            return lines[key]
    return None


def parse_run_config(text: str, source_path: Optional[str] = None) -> RunConfig:
    try:
        raw = yaml.safe_load(text)
        node = yaml.compose(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        raise ConfigError(f"YAML parse error: {getattr(exc, 'problem', exc)}", "",
                          mark.line + 1 if mark is not None else None) from exc
    if not isinstance(raw, dict):
        raise ConfigError("top level must be a mapping", "", 1)
    lines = _line_index(node) if node is not None else {}
    try:
        config = RunConfig.model_validate(raw)
    except ValidationError as exc:
        first = exc.errors()[0]
        loc = tuple(first["loc"])
        path = ".".join(str(p) for p in loc)
        raise ConfigError(first["msg"], path, _line_for(lines, loc)) from exc
    config.source_path = source_path
    _check_files(config, lines)
    return config


def _check_files(config: RunConfig, lines: Dict[Tuple[Any, ...], int]):
    refs: List[Tuple[Tuple[str, ...], str]] = []
    for name in ("u0", "f"):
        src = getattr(config.data, name)
        if src.csv is not None:
            refs.append((("data", name, "csv"), src.csv))
    if config.instance is not None:
        for piece in ("M", "N", "M_boundary"):
            desc = getattr(config.instance, piece) or {}
            for key, value in desc.items():
                if isinstance(value, dict) and "csv" in value:
                    refs.append((("instance", piece, key, "csv"), value["csv"]))
    if config.norm is not None:
        refs.append((("norm", "field"), config.norm.field))
    for loc, path in refs:
        if not os.path.exists(config.resolve(path)):
            raise ConfigError(f"referenced file {path!r} does not exist", ".".join(loc), _line_for(lines, loc))


def load_run_config(path: str) -> RunConfig:
    """
    Read and validate a YAML run configuration.

    Raises:
        ConfigError: unreadable file, YAML syntax, schema violations or missing referenced files
    """
    try:
        with open(path, "r", encoding="utf-8") as handle:
            text = handle.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc}", "") from exc
    return parse_run_config(text, source_path=path)
