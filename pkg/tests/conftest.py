"""Shared fixtures: seeded generators, small grids and problems, an isolated output root."""
import textwrap

import numpy as np
import pytest

from orliczflow.modular_core import uniform_grid_1d
from orliczflow.pde_instances import InstanceConfig, build_problem


@pytest.fixture
def rng():
    return np.random.default_rng(20240601)


@pytest.fixture
def grid101():
    return uniform_grid_1d(101)


@pytest.fixture
def heat_problem():
    return build_problem(InstanceConfig("classical_variational", resolution=(17,)))


@pytest.fixture
def power_zero_order():
    return build_problem(InstanceConfig("zero_order", resolution=(17,), M={"family": "power", "p": 3.0}))


@pytest.fixture
def quadratic_zero_order():
    return build_problem(InstanceConfig("zero_order", resolution=(17,), M={"family": "quadratic"}))


@pytest.fixture
def double_phase_problem():
    return build_problem(InstanceConfig(
        "musielak_sobolev", resolution=(17,),
        M={"family": "double_phase", "p": 2.0, "q": 3.0, "a": {"linear": [0.0, 1.0]}}))


@pytest.fixture
def reaction_diffusion_problem():
    return build_problem(InstanceConfig("reaction_diffusion", resolution=(17,),
                                       M={"family": "power", "p": 3.0}, N={"family": "power", "p": 5.0}))


@pytest.fixture
def dynamic_boundary_problem():
    return build_problem(InstanceConfig("dynamic_boundary", resolution=(17,),
                                       M={"family": "quadratic"}, M_boundary={"family": "quadratic"}))


@pytest.fixture
def orlicz_exp_problem():
    """The exponential zero-order preset, on a coarser grid"""
    return build_problem(InstanceConfig("zero_order", resolution=(17,), M={"family": "orlicz_exp", "p": 1.0}))


@pytest.fixture
def kinked_nodal_problem():
    return build_problem(InstanceConfig("musielak_sobolev", resolution=(9,),
                                       M={"family": "power", "p": 2.0}, N={"family": "orlicz_exp", "p": 1.0}))


@pytest.fixture
def kinked_boundary_problem():
    return build_problem(InstanceConfig("dynamic_boundary", resolution=(17,),
                                       M={"family": "quadratic"}, M_boundary={"family": "orlicz_exp", "p": 1.0}))


@pytest.fixture
def workspace(tmp_path, monkeypatch):
    """Output root and run registry under tmp_path"""
    out = tmp_path / "output"
    monkeypatch.setenv("ORLICZFLOW_OUTPUT_DIR", str(out))
    monkeypatch.setenv("ORLICZFLOW_RUNS_DB", str(tmp_path / "runs.db"))
    return tmp_path


@pytest.fixture
def write_config(tmp_path):
    """Write a dedented YAML run config and return its path"""

    def _write(text: str, name: str = "run.yaml") -> str:
        path = tmp_path / name
        path.write_text(textwrap.dedent(text).lstrip("\n"), encoding="utf-8")
        return str(path)

    return _write
