"""
CSV input/output for grid functions, coefficient fields, forcing slices,
trajectories and diagnostics reports.

All files use ',' separators, '.' decimals, a header row and a fixed float
format, and are written atomically (temp file in the target directory, then
os.replace).
"""
import os
import tempfile
from typing import Callable, TextIO, Tuple

import numpy as np
import pandas as pd

from orliczflow.diagnostics import DiagnosticsReport
from orliczflow.modular_core import Grid, GridFunction, GridMismatchError

FLOAT_FORMAT = "%.12e"
COORD_NAMES = ("x", "y")


def atomic_write(path: str, write: Callable[[TextIO], None]):
    """Write through `write(handle)` into a temp file, then move it over `path`"""
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp_path = tempfile.mkstemp(dir=directory, prefix=".tmp_", suffix=".csv")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as handle:
            write(handle)
        os.replace(tmp_path, path)
    except BaseException:
        if os.path.exists(tmp_path):
            os.remove(tmp_path)
        raise


def write_frame(frame: pd.DataFrame, path: str) -> str:
    atomic_write(path, lambda h: frame.to_csv(h, index=False, float_format=FLOAT_FORMAT, lineterminator="\n"))
    return path


def read_frame(path: str) -> pd.DataFrame:
    return pd.read_csv(path, sep=",", decimal=".")


def read_field(path: str, n: int) -> np.ndarray:
    """
    One value per node, row-major. Takes the `value` column when present,
    otherwise the last column.

    Raises:
        GridMismatchError: the file does not hold exactly n rows
    """
    frame = read_frame(path)
    column = frame["value"] if "value" in frame.columns else frame.iloc[:, -1]
    values = column.to_numpy(dtype=float)
    if values.shape != (n,):
        raise GridMismatchError(f"{path}: {values.size} values for a grid of {n} nodes")
    return values


def grid_function_frame(gf: GridFunction) -> pd.DataFrame:
    data = {COORD_NAMES[d]: gf.grid.nodes[:, d] for d in range(gf.grid.dim)}
    data["value"] = gf.values
    return pd.DataFrame(data)


def write_grid_function(gf: GridFunction, path: str) -> str:
    """Header x[,y],value; one row per node in the grid's row-major order"""
    return write_frame(grid_function_frame(gf), path)


def read_grid_function(path: str, grid: Grid, atol: float = 1e-9) -> GridFunction:
    """
    Raises:
        GridMismatchError: row count or node coordinates differ from the grid
    """
    frame = read_frame(path)
    values = read_field(path, grid.size)
    for d in range(grid.dim):
        name = COORD_NAMES[d]
        if name in frame.columns and not np.allclose(frame[name].to_numpy(dtype=float), grid.nodes[:, d], atol=atol):
            raise GridMismatchError(f"{path}: column {name!r} does not match the grid nodes")
    return GridFunction(grid, values)


def read_forcing_slices(path: str, n: int) -> Tuple[np.ndarray, np.ndarray]:
    """
    Forcing time slices: a `t` column followed by one column per node.

    Returns:
        (times, slices) with slices of shape (len(times), n)
    """
    frame = read_frame(path)
    if "t" not in frame.columns:
        raise ValueError(f"{path}: forcing slices need a 't' column")
    times = frame["t"].to_numpy(dtype=float)
    slices = frame.drop(columns=["t"]).to_numpy(dtype=float)
    if slices.shape[1] != n:
        raise GridMismatchError(f"{path}: {slices.shape[1]} node columns for a grid of {n} nodes")
    return times, slices


def states_frame(times: np.ndarray, states: np.ndarray) -> pd.DataFrame:
    frame = pd.DataFrame(states, columns=[f"u{i}" for i in range(states.shape[1])])
    frame.insert(0, "t", times)
    frame.insert(0, "k", np.arange(len(times)))
    return frame


def write_report(report: DiagnosticsReport, path: str) -> str:
    """One residual per line: name,value,tolerance,pass"""
    text = "\n".join(report.to_lines()) + "\n"
    atomic_write(path, lambda h: h.write(text))
    return path


def read_report(path: str) -> pd.DataFrame:
    return read_frame(path)


def write_forcing_slices(times: np.ndarray, slices: np.ndarray, path: str) -> str:
    slices = np.asarray(slices, dtype=float)
    frame = pd.DataFrame(slices, columns=[f"f{i}" for i in range(slices.shape[1])])
    frame.insert(0, "t", np.asarray(times, dtype=float))
    return write_frame(frame, path)
